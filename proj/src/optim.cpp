#include "etg/optim.h"

#include <cmath>
#include <sstream>

#include "etg/common.h"

namespace etg {

void adamw_step(OptimizerState& st, Tensor& param, const Tensor& grad,
                const AdamWConfig& cfg) {
  if (!param.same_shape(grad) || !param.same_shape(st.m) ||
      !param.same_shape(st.v)) {
    std::ostringstream os;
    os << "adamw_step: shape mismatch param " << param.shape_str() << " grad "
       << grad.shape_str();
    throw ValidationError(os.str());
  }
  if (cfg.lr < 0.0) throw ValidationError("adamw_step: negative learning rate");
  for (size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i])) {
      std::ostringstream os;
      os << "adamw_step: non-finite gradient at flat index " << i;
      throw NumericError(os.str());
    }

  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.step));
  for (size_t i = 0; i < param.size(); ++i) {
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * grad[i];
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    param[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                          cfg.weight_decay * param[i]);
  }
}

Tensor& ParamStore::create(const std::string& name, Tensor init) {
  if (map_.count(name))
    throw ValidationError("param store: duplicate parameter '" + name + "'");
  Entry e;
  e.opt = OptimizerState::for_param(init);
  e.value = std::move(init);
  auto [it, ok] = map_.emplace(name, std::move(e));
  (void)ok;
  return it->second.value;
}

ParamStore::Entry& ParamStore::at(const std::string& name) {
  auto it = map_.find(name);
  if (it == map_.end())
    throw ValidationError("param store: unknown parameter '" + name + "'");
  return it->second;
}

const ParamStore::Entry& ParamStore::at(const std::string& name) const {
  auto it = map_.find(name);
  if (it == map_.end())
    throw ValidationError("param store: unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::remove_prefix(const std::string& prefix) {
  for (auto it = map_.begin(); it != map_.end();) {
    if (it->first.rfind(prefix, 0) == 0)
      it = map_.erase(it);
    else
      ++it;
  }
}

}  // namespace etg
