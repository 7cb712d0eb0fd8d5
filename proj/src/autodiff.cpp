#include "etg/autodiff.h"

#include <atomic>
#include <cmath>
#include <cstring>
#include <memory>
#include <sstream>

#include "etg/common.h"

namespace etg::ad {

namespace {
std::atomic<uint32_t> g_tape_counter{1};
}

Tape::Tape() : tape_id_(g_tape_counter.fetch_add(1)) {}

ValueRef Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return ValueRef{int32_t(nodes_.size() - 1), 0, tape_id_};
}

void Tape::check(ValueRef r) const {
  if (!r.valid() || r.tape_id != tape_id_ || size_t(r.node) >= nodes_.size())
    throw ValidationError("tape: value ref does not belong to this graph");
  const Node& n = nodes_[r.node];
  size_t nslots = n.external ? 1 : n.values.size();
  if (size_t(r.slot) >= nslots)
    throw ValidationError("tape: value ref slot out of range");
}

const Tensor& Tape::val(ValueRef r) const {
  check(r);
  const Node& n = nodes_[r.node];
  if (n.external) return *n.external;
  return n.values[r.slot];
}

ValueRef Tape::constant(Tensor v) {
  Node n;
  n.values.push_back(std::move(v));
  n.track = false;
  return push(std::move(n));
}

ValueRef Tape::leaf(Tensor v) {
  Node n;
  n.values.push_back(std::move(v));
  return push(std::move(n));
}

ValueRef Tape::param(const std::string& name, const Tensor* storage) {
  if (!storage) throw ValidationError("tape: null parameter storage");
  auto it = params_.find(name);
  if (it != params_.end()) return it->second;  // one leaf per parameter
  Node n;
  n.external = storage;
  ValueRef r = push(std::move(n));
  params_.emplace(name, r);
  return r;
}

Tensor* Tape::grad_buffer(ValueRef r) {
  check(r);
  Node& n = nodes_[r.node];
  if (!n.track) return nullptr;
  size_t nslots = n.external ? 1 : n.values.size();
  if (n.grads.empty()) {
    n.grads.resize(nslots);
    n.has_grad.assign(nslots, 0);
  }
  if (!n.has_grad[r.slot]) {
    const Tensor& value = n.external ? *n.external : n.values[r.slot];
    n.grads[r.slot] = Tensor(value.dims());
    n.has_grad[r.slot] = 1;
  }
  return &n.grads[r.slot];
}

void Tape::backward(ValueRef loss) {
  check(loss);
  if (val(loss).size() != 1)
    throw ValidationError("tape: backward requires a scalar loss node");
  if (ran_backward_)
    throw ValidationError("tape: backward may run only once per graph");
  ran_backward_ = true;
  Tensor* seed = grad_buffer(loss);
  if (!seed) throw ValidationError("tape: loss does not track gradients");
  (*seed)[0] = 1.0;
  for (int32_t i = int32_t(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.backward || n.grads.empty()) continue;
    bool any = false;
    std::vector<const Tensor*> outs(n.grads.size(), nullptr);
    for (size_t s = 0; s < n.grads.size(); ++s) {
      if (n.has_grad[s]) {
        outs[s] = &n.grads[s];
        any = true;
      }
    }
    if (any) n.backward(*this, outs);
  }
}

const Tensor* Tape::grad(ValueRef r) const {
  check(r);
  const Node& n = nodes_[r.node];
  if (n.grads.empty() || !n.has_grad[r.slot]) return nullptr;
  return &n.grads[r.slot];
}

Tensor Tape::param_grad(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw ValidationError("tape: unknown parameter '" + name + "'");
  const Tensor* g = grad(it->second);
  if (g) return *g;
  return Tensor(val(it->second).dims());
}

// ---------------------------------------------------------------------------
// ops

static void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (!a.same_shape(b)) {
    std::ostringstream os;
    os << op << ": shape mismatch " << a.shape_str() << " vs " << b.shape_str();
    throw ValidationError(os.str());
  }
}

ValueRef Tape::add(ValueRef a, ValueRef b) {
  const Tensor &va = val(a), &vb = val(b);
  require_same_shape(va, vb, "add");
  Tensor out(va.dims());
  for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  return custom({a, b}, {std::move(out)},
                [a, b](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
                  if (Tensor* gb = t.grad_buffer(b))
                    for (size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i];
                })[0];
}

ValueRef Tape::sub(ValueRef a, ValueRef b) {
  const Tensor &va = val(a), &vb = val(b);
  require_same_shape(va, vb, "sub");
  Tensor out(va.dims());
  for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
  return custom({a, b}, {std::move(out)},
                [a, b](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
                  if (Tensor* gb = t.grad_buffer(b))
                    for (size_t i = 0; i < go.size(); ++i) (*gb)[i] -= go[i];
                })[0];
}

ValueRef Tape::mul(ValueRef a, ValueRef b) {
  const Tensor &va = val(a), &vb = val(b);
  require_same_shape(va, vb, "mul");
  Tensor out(va.dims());
  for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  return custom({a, b}, {std::move(out)},
                [a, b](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  const Tensor &va = t.val(a), &vb = t.val(b);
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < go.size(); ++i)
                      (*ga)[i] += go[i] * vb[i];
                  if (Tensor* gb = t.grad_buffer(b))
                    for (size_t i = 0; i < go.size(); ++i)
                      (*gb)[i] += go[i] * va[i];
                })[0];
}

ValueRef Tape::div(ValueRef a, ValueRef b) {
  const Tensor &va = val(a), &vb = val(b);
  require_same_shape(va, vb, "div");
  Tensor out(va.dims());
  for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] / vb[i];
  return custom({a, b}, {std::move(out)},
                [a, b](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  const Tensor &va = t.val(a), &vb = t.val(b);
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < go.size(); ++i)
                      (*ga)[i] += go[i] / vb[i];
                  if (Tensor* gb = t.grad_buffer(b))
                    for (size_t i = 0; i < go.size(); ++i)
                      (*gb)[i] -= go[i] * va[i] / (vb[i] * vb[i]);
                })[0];
}

ValueRef Tape::neg(ValueRef a) { return scale(a, -1.0); }

ValueRef Tape::scale(ValueRef a, double s) {
  const Tensor& va = val(a);
  Tensor out(va.dims());
  for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] * s;
  return custom({a}, {std::move(out)},
                [a, s](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < go.size(); ++i)
                      (*ga)[i] += go[i] * s;
                })[0];
}

ValueRef Tape::add_const(ValueRef a, double c) {
  const Tensor& va = val(a);
  Tensor out(va.dims());
  for (size_t i = 0; i < out.size(); ++i) out[i] = va[i] + c;
  return custom({a}, {std::move(out)},
                [a](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
                })[0];
}

ValueRef Tape::unary(ValueRef a, double (*fwd)(double),
                     double (*dfdx)(double, double)) {
  const Tensor& va = val(a);
  Tensor out(va.dims());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(va[i]);
  std::vector<ValueRef> res = custom(
      {a}, {std::move(out)}, BackwardFn{});
  ValueRef r = res[0];
  nodes_[r.node].backward = [a, r, dfdx](Tape& t,
                                         const std::vector<const Tensor*>& g) {
    const Tensor& go = *g[0];
    const Tensor& x = t.val(a);
    const Tensor& y = t.val(r);
    if (Tensor* ga = t.grad_buffer(a))
      for (size_t i = 0; i < go.size(); ++i)
        (*ga)[i] += go[i] * dfdx(x[i], y[i]);
  };
  return r;
}

ValueRef Tape::relu(ValueRef a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

ValueRef Tape::sigmoid(ValueRef a) {
  return unary(
      a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

ValueRef Tape::tanh_(ValueRef a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

ValueRef Tape::exp_(ValueRef a) {
  return unary(a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

ValueRef Tape::log_(ValueRef a) {
  return unary(a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

ValueRef Tape::abs_(ValueRef a) {
  return unary(a, [](double x) { return std::fabs(x); },
               [](double x, double) {
                 return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
               });
}

ValueRef Tape::square(ValueRef a) {
  return unary(a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

ValueRef Tape::matmul(ValueRef a, ValueRef b) {
  const Tensor &va = val(a), &vb = val(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0)) {
    std::ostringstream os;
    os << "matmul: incompatible shapes " << va.shape_str() << " x "
       << vb.shape_str();
    throw ValidationError(os.str());
  }
  const size_t m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i)
    for (size_t p = 0; p < k; ++p) {
      const double aip = va[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = vb.data() + p * n;
      double* orow = out.data() + i * n;
      for (size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  return custom(
      {a, b}, {std::move(out)},
      [a, b, m, k, n](Tape& t, const std::vector<const Tensor*>& g) {
        const Tensor& go = *g[0];
        const Tensor &va = t.val(a), &vb = t.val(b);
        if (Tensor* ga = t.grad_buffer(a)) {  // gA += g . B^T
          for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              const double* grow = go.data() + i * n;
              const double* brow = vb.data() + p * n;
              for (size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              (*ga)[i * k + p] += acc;
            }
        }
        if (Tensor* gb = t.grad_buffer(b)) {  // gB += A^T . g
          for (size_t i = 0; i < m; ++i) {
            const double* arow = va.data() + i * k;
            const double* grow = go.data() + i * n;
            for (size_t p = 0; p < k; ++p) {
              const double aip = arow[p];
              if (aip == 0.0) continue;
              double* gbrow = gb->data() + p * n;
              for (size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
            }
          }
        }
      })[0];
}

ValueRef Tape::transpose(ValueRef a) {
  const Tensor& va = val(a);
  if (va.ndim() != 2) throw ValidationError("transpose: need 2-D tensor");
  const size_t m = va.dim(0), n = va.dim(1);
  Tensor out({n, m});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j * m + i] = va[i * n + j];
  return custom({a}, {std::move(out)},
                [a, m, n](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < m; ++i)
                      for (size_t j = 0; j < n; ++j)
                        (*ga)[i * n + j] += go[j * m + i];
                })[0];
}

ValueRef Tape::add_rowvec(ValueRef a, ValueRef bias) {
  const Tensor &va = val(a), &vb = val(bias);
  if (va.ndim() != 2 || vb.size() != va.dim(1))
    throw ValidationError("add_rowvec: bias must have one entry per column");
  const size_t m = va.dim(0), n = va.dim(1);
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[i * n + j] = va[i * n + j] + vb[j];
  return custom({a, bias}, {std::move(out)},
                [a, bias, m, n](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
                  if (Tensor* gb = t.grad_buffer(bias))
                    for (size_t i = 0; i < m; ++i)
                      for (size_t j = 0; j < n; ++j)
                        (*gb)[j] += go[i * n + j];
                })[0];
}

ValueRef Tape::concat_cols(ValueRef a, ValueRef b) {
  const Tensor &va = val(a), &vb = val(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(0) != vb.dim(0))
    throw ValidationError("concat_cols: row counts differ");
  const size_t m = va.dim(0), n1 = va.dim(1), n2 = vb.dim(1);
  Tensor out({m, n1 + n2});
  for (size_t i = 0; i < m; ++i) {
    std::memcpy(out.data() + i * (n1 + n2), va.data() + i * n1,
                n1 * sizeof(double));
    std::memcpy(out.data() + i * (n1 + n2) + n1, vb.data() + i * n2,
                n2 * sizeof(double));
  }
  return custom(
      {a, b}, {std::move(out)},
      [a, b, m, n1, n2](Tape& t, const std::vector<const Tensor*>& g) {
        const Tensor& go = *g[0];
        if (Tensor* ga = t.grad_buffer(a))
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n1; ++j)
              (*ga)[i * n1 + j] += go[i * (n1 + n2) + j];
        if (Tensor* gb = t.grad_buffer(b))
          for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n2; ++j)
              (*gb)[i * n2 + j] += go[i * (n1 + n2) + n1 + j];
      })[0];
}

ValueRef Tape::slice_cols(ValueRef a, size_t c0, size_t c1) {
  const Tensor& va = val(a);
  if (va.ndim() != 2 || c0 >= c1 || c1 > va.dim(1))
    throw ValidationError("slice_cols: bad column range");
  const size_t m = va.dim(0), n = va.dim(1), w = c1 - c0;
  Tensor out({m, w});
  for (size_t i = 0; i < m; ++i)
    std::memcpy(out.data() + i * w, va.data() + i * n + c0, w * sizeof(double));
  return custom({a}, {std::move(out)},
                [a, m, n, c0, w](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < m; ++i)
                      for (size_t j = 0; j < w; ++j)
                        (*ga)[i * n + c0 + j] += go[i * w + j];
                })[0];
}

ValueRef Tape::slice_rows(ValueRef a, size_t r0, size_t r1) {
  const Tensor& va = val(a);
  if (va.ndim() != 2 || r0 >= r1 || r1 > va.dim(0))
    throw ValidationError("slice_rows: bad row range");
  const size_t n = va.dim(1), h = r1 - r0;
  Tensor out({h, n});
  std::memcpy(out.data(), va.data() + r0 * n, h * n * sizeof(double));
  return custom({a}, {std::move(out)},
                [a, r0, n, h](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < h * n; ++i)
                      (*ga)[r0 * n + i] += go[i];
                })[0];
}

ValueRef Tape::reshape(ValueRef a, std::vector<size_t> dims) {
  const Tensor& va = val(a);
  if (shape_numel(dims) != va.size())
    throw ValidationError("reshape: element count mismatch");
  Tensor out(std::move(dims));
  std::memcpy(out.data(), va.data(), va.size() * sizeof(double));
  return custom({a}, {std::move(out)},
                [a](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i];
                })[0];
}

ValueRef Tape::row_scale(ValueRef a, ValueRef s) {
  const Tensor &va = val(a), &vs = val(s);
  if (va.ndim() != 2 || vs.size() != va.dim(0))
    throw ValidationError("row_scale: scale must have one entry per row");
  const size_t m = va.dim(0), n = va.dim(1);
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[i * n + j] = va[i * n + j] * vs[i];
  return custom({a, s}, {std::move(out)},
                [a, s, m, n](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  const Tensor &va = t.val(a), &vs = t.val(s);
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < m; ++i)
                      for (size_t j = 0; j < n; ++j)
                        (*ga)[i * n + j] += go[i * n + j] * vs[i];
                  if (Tensor* gs = t.grad_buffer(s))
                    for (size_t i = 0; i < m; ++i) {
                      double acc = 0.0;
                      for (size_t j = 0; j < n; ++j)
                        acc += go[i * n + j] * va[i * n + j];
                      (*gs)[i] += acc;
                    }
                })[0];
}

ValueRef Tape::mul_rowvec(ValueRef a, ValueRef s) {
  const Tensor &va = val(a), &vs = val(s);
  if (va.ndim() != 2 || vs.size() != va.dim(1))
    throw ValidationError("mul_rowvec: scale must have one entry per column");
  const size_t m = va.dim(0), n = va.dim(1);
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[i * n + j] = va[i * n + j] * vs[j];
  return custom({a, s}, {std::move(out)},
                [a, s, m, n](Tape& t, const std::vector<const Tensor*>& g) {
                  const Tensor& go = *g[0];
                  const Tensor &va = t.val(a), &vs = t.val(s);
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < m; ++i)
                      for (size_t j = 0; j < n; ++j)
                        (*ga)[i * n + j] += go[i * n + j] * vs[j];
                  if (Tensor* gs = t.grad_buffer(s))
                    for (size_t i = 0; i < m; ++i)
                      for (size_t j = 0; j < n; ++j)
                        (*gs)[j] += go[i * n + j] * va[i * n + j];
                })[0];
}

ValueRef Tape::sum(ValueRef a) {
  const Tensor& va = val(a);
  double acc = 0.0;
  for (size_t i = 0; i < va.size(); ++i) acc += va[i];
  return custom({a}, {Tensor::scalar(acc)},
                [a](Tape& t, const std::vector<const Tensor*>& g) {
                  const double go = (*g[0])[0];
                  if (Tensor* ga = t.grad_buffer(a))
                    for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += go;
                })[0];
}

ValueRef Tape::mean(ValueRef a) {
  const size_t n = val(a).size();
  return scale(sum(a), 1.0 / double(n));
}

ValueRef Tape::softmax_rows(ValueRef a) {
  const Tensor& va = val(a);
  if (va.ndim() != 2) throw ValidationError("softmax_rows: need 2-D tensor");
  const size_t m = va.dim(0), n = va.dim(1);
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i) {
    double mx = va[i * n];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, va[i * n + j]);
    double z = 0.0;
    for (size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(va[i * n + j] - mx);
      z += out[i * n + j];
    }
    for (size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  std::vector<ValueRef> res = custom({a}, {std::move(out)}, BackwardFn{});
  ValueRef r = res[0];
  nodes_[r.node].backward = [a, r, m, n](Tape& t,
                                         const std::vector<const Tensor*>& g) {
    const Tensor& go = *g[0];
    const Tensor& y = t.val(r);
    if (Tensor* ga = t.grad_buffer(a))
      for (size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (size_t j = 0; j < n; ++j) dot += go[i * n + j] * y[i * n + j];
        for (size_t j = 0; j < n; ++j)
          (*ga)[i * n + j] += y[i * n + j] * (go[i * n + j] - dot);
      }
  };
  return r;
}

ValueRef Tape::logsoftmax_rows(ValueRef a) {
  const Tensor& va = val(a);
  if (va.ndim() != 2) throw ValidationError("logsoftmax_rows: need 2-D tensor");
  const size_t m = va.dim(0), n = va.dim(1);
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i) {
    double mx = va[i * n];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, va[i * n + j]);
    double z = 0.0;
    for (size_t j = 0; j < n; ++j) z += std::exp(va[i * n + j] - mx);
    const double lz = mx + std::log(z);
    for (size_t j = 0; j < n; ++j) out[i * n + j] = va[i * n + j] - lz;
  }
  std::vector<ValueRef> res = custom({a}, {std::move(out)}, BackwardFn{});
  ValueRef r = res[0];
  nodes_[r.node].backward = [a, r, m, n](Tape& t,
                                         const std::vector<const Tensor*>& g) {
    const Tensor& go = *g[0];
    const Tensor& y = t.val(r);
    if (Tensor* ga = t.grad_buffer(a))
      for (size_t i = 0; i < m; ++i) {
        double gsum = 0.0;
        for (size_t j = 0; j < n; ++j) gsum += go[i * n + j];
        for (size_t j = 0; j < n; ++j)
          (*ga)[i * n + j] += go[i * n + j] - std::exp(y[i * n + j]) * gsum;
      }
  };
  return r;
}

// Shared normalization backward: x is normalized over groups of length L with
// stride pattern given by index mapping.
namespace {
struct NormCache {
  std::vector<double> mean, inv_std;
};
}  // namespace

ValueRef Tape::layer_norm_rows(ValueRef a, double eps) {
  const Tensor& va = val(a);
  if (va.ndim() != 2) throw ValidationError("layer_norm_rows: need 2-D tensor");
  const size_t m = va.dim(0), n = va.dim(1);
  auto cache = std::make_shared<NormCache>();
  cache->mean.resize(m);
  cache->inv_std.resize(m);
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (size_t j = 0; j < n; ++j) mu += va[i * n + j];
    mu /= double(n);
    double var = 0.0;
    for (size_t j = 0; j < n; ++j) {
      const double d = va[i * n + j] - mu;
      var += d * d;
    }
    var /= double(n);
    const double is = 1.0 / std::sqrt(var + eps);
    cache->mean[i] = mu;
    cache->inv_std[i] = is;
    for (size_t j = 0; j < n; ++j) out[i * n + j] = (va[i * n + j] - mu) * is;
  }
  std::vector<ValueRef> res = custom({a}, {std::move(out)}, BackwardFn{});
  ValueRef r = res[0];
  nodes_[r.node].backward = [a, r, m, n, cache](
                                Tape& t,
                                const std::vector<const Tensor*>& g) {
    const Tensor& go = *g[0];
    const Tensor& y = t.val(r);
    if (Tensor* ga = t.grad_buffer(a))
      for (size_t i = 0; i < m; ++i) {
        double gsum = 0.0, gydot = 0.0;
        for (size_t j = 0; j < n; ++j) {
          gsum += go[i * n + j];
          gydot += go[i * n + j] * y[i * n + j];
        }
        const double is = cache->inv_std[i];
        for (size_t j = 0; j < n; ++j) {
          const double yv = y[i * n + j];
          (*ga)[i * n + j] +=
              is * (go[i * n + j] - gsum / double(n) - yv * gydot / double(n));
        }
      }
  };
  return r;
}

ValueRef Tape::instance_norm_time(ValueRef a, double eps) {
  const Tensor& va = val(a);
  if (va.ndim() != 2)
    throw ValidationError("instance_norm_time: need 2-D tensor");
  const size_t m = va.dim(0), n = va.dim(1);  // m = time, n = channels
  auto cache = std::make_shared<NormCache>();
  cache->mean.resize(n);
  cache->inv_std.resize(n);
  Tensor out({m, n});
  for (size_t j = 0; j < n; ++j) {
    double mu = 0.0;
    for (size_t i = 0; i < m; ++i) mu += va[i * n + j];
    mu /= double(m);
    double var = 0.0;
    for (size_t i = 0; i < m; ++i) {
      const double d = va[i * n + j] - mu;
      var += d * d;
    }
    var /= double(m);
    const double is = 1.0 / std::sqrt(var + eps);
    cache->mean[j] = mu;
    cache->inv_std[j] = is;
    for (size_t i = 0; i < m; ++i) out[i * n + j] = (va[i * n + j] - mu) * is;
  }
  std::vector<ValueRef> res = custom({a}, {std::move(out)}, BackwardFn{});
  ValueRef r = res[0];
  nodes_[r.node].backward = [a, r, m, n, cache](
                                Tape& t,
                                const std::vector<const Tensor*>& g) {
    const Tensor& go = *g[0];
    const Tensor& y = t.val(r);
    if (Tensor* ga = t.grad_buffer(a))
      for (size_t j = 0; j < n; ++j) {
        double gsum = 0.0, gydot = 0.0;
        for (size_t i = 0; i < m; ++i) {
          gsum += go[i * n + j];
          gydot += go[i * n + j] * y[i * n + j];
        }
        const double is = cache->inv_std[j];
        for (size_t i = 0; i < m; ++i) {
          const double yv = y[i * n + j];
          (*ga)[i * n + j] +=
              is * (go[i * n + j] - gsum / double(m) - yv * gydot / double(m));
        }
      }
  };
  return r;
}

std::vector<ValueRef> Tape::custom(const std::vector<ValueRef>& inputs,
                                   std::vector<Tensor> outputs,
                                   BackwardFn fn) {
  if (outputs.empty()) throw ValidationError("custom op: no outputs");
  for (const ValueRef& in : inputs) check(in);
  bool track = false;
  for (const ValueRef& in : inputs)
    if (nodes_[in.node].track) track = true;
  Node n;
  n.values = std::move(outputs);
  n.inputs = inputs;
  n.track = track;
  if (track) n.backward = std::move(fn);
  const size_t nslots = n.values.size();
  ValueRef first = push(std::move(n));
  std::vector<ValueRef> refs(nslots);
  for (size_t s = 0; s < nslots; ++s)
    refs[s] = ValueRef{first.node, int32_t(s), tape_id_};
  return refs;
}

// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<double(const Tensor&)>& f,
                         const Tensor& x, double h, const Tensor& analytic) {
  if (h <= 0.0) throw ValidationError("finite_diff_check: h must be > 0");
  if (!analytic.same_shape(x))
    throw ValidationError("finite_diff_check: gradient shape mismatch");
  Tensor probe = x;
  double worst = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_check: function returned non-finite value");
    const double numeric = (fp - fm) / (2.0 * h);
    const double err =
        std::fabs(analytic[i] - numeric) / (std::fabs(analytic[i]) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

double finite_diff_check(
    const std::function<ValueRef(Tape&, ValueRef)>& build, const Tensor& x,
    double h) {
  Tensor analytic(x.dims());
  {
    Tape tape;
    ValueRef in = tape.leaf(x);
    ValueRef loss = build(tape, in);
    if (tape.val(loss).size() != 1)
      throw ValidationError("finite_diff_check: build must produce a scalar");
    tape.backward(loss);
    if (const Tensor* g = tape.grad(in)) analytic = *g;
  }
  auto f = [&build](const Tensor& probe) {
    Tape tape;
    ValueRef in = tape.leaf(probe);
    ValueRef loss = build(tape, in);
    return tape.val(loss)[0];
  };
  return finite_diff_check(f, x, h, analytic);
}

}  // namespace etg::ad
