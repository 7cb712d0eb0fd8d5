#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "etg/tensor.h"

namespace etg {

// Decoupled-weight-decay Adam. Defaults follow the usual convention;
// everything is overridable from RunConfig.
struct AdamWConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// Moments for a single parameter tensor.
struct OptimizerState {
  Tensor m, v;
  uint64_t step = 0;

  static OptimizerState for_param(const Tensor& p) {
    return OptimizerState{Tensor(p.dims()), Tensor(p.dims()), 0};
  }
};

// One AdamW update with bias correction. Throws ValidationError on shape
// mismatch and NumericError on a non-finite gradient (the caller reports the
// offending iteration/frame).
void adamw_step(OptimizerState& st, Tensor& param, const Tensor& grad,
                const AdamWConfig& cfg);

// Named parameter registry with per-parameter moments and a trainability
// flag. std::map keeps iteration order deterministic.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    OptimizerState opt;
    bool trainable = false;
  };

  Tensor& create(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return map_.count(name) != 0; }
  Entry& at(const std::string& name);
  const Entry& at(const std::string& name) const;
  void remove_prefix(const std::string& prefix);

  std::map<std::string, Entry>& entries() { return map_; }
  const std::map<std::string, Entry>& entries() const { return map_; }
  size_t size() const { return map_.size(); }

 private:
  std::map<std::string, Entry> map_;
};

}  // namespace etg
