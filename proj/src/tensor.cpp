#include "etg/tensor.h"

#include <cmath>
#include <sstream>

#include "etg/common.h"

namespace etg {

size_t shape_numel(const std::vector<size_t>& dims) {
  size_t n = 1;
  for (size_t d : dims) n *= d;
  return n;
}

Tensor::Tensor(std::vector<size_t> dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  if (dims_.empty()) throw ValidationError("tensor: empty dims");
  for (size_t d : dims_)
    if (d == 0) throw ValidationError("tensor: zero extent in dims");
  if (shape_numel(dims_) != data_.size()) {
    std::ostringstream os;
    os << "tensor: dims " << shape_str() << " expect " << shape_numel(dims_)
       << " values, got " << data_.size();
    throw ValidationError(os.str());
  }
  for (size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      std::ostringstream os;
      os << "tensor: non-finite value at flat index " << i;
      throw ValidationError(os.str());
    }
  }
}

Tensor::Tensor(std::vector<size_t> dims) : dims_(std::move(dims)) {
  if (dims_.empty()) throw ValidationError("tensor: empty dims");
  for (size_t d : dims_)
    if (d == 0) throw ValidationError("tensor: zero extent in dims");
  data_.assign(shape_numel(dims_), 0.0);
}

Tensor Tensor::full(std::vector<size_t> dims, double v) {
  Tensor t(std::move(dims));
  for (auto& x : t.data_) x = v;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::check_finite(const std::string& what) const {
  for (size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      std::ostringstream os;
      os << what << ": non-finite value at flat index " << i;
      throw NumericError(os.str());
    }
  }
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
  os << "]";
  return os.str();
}

}  // namespace etg
