#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace etg {

// Dense row-major tensor of doubles. Construction rejects NaN/Inf and
// dim/data mismatches; finished tensors are immutable by convention and
// safe to share read-only across threads.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<size_t> dims, std::vector<double> data);
  explicit Tensor(std::vector<size_t> dims);  // zero-filled

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.dims()); }
  static Tensor full(std::vector<size_t> dims, double v);

  const std::vector<size_t>& dims() const { return dims_; }
  size_t ndim() const { return dims_.size(); }
  size_t dim(size_t i) const { return dims_[i]; }
  size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  // 2-D accessors (row-major)
  double& at(size_t r, size_t c) { return data_[r * dims_[1] + c]; }
  double at(size_t r, size_t c) const { return data_[r * dims_[1] + c]; }

  size_t rows() const { return dims_.empty() ? 0 : dims_[0]; }
  size_t cols() const { return dims_.size() < 2 ? 1 : dims_[1]; }

  bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }
  bool all_finite() const;
  void check_finite(const std::string& what) const;  // throws NumericError

  std::string shape_str() const;

 private:
  std::vector<size_t> dims_;
  std::vector<double> data_;
};

size_t shape_numel(const std::vector<size_t>& dims);

}  // namespace etg
