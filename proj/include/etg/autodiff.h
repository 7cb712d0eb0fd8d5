#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "etg/tensor.h"

namespace etg::ad {

class Tape;

// Handle to one output slot of a tape node.
struct ValueRef {
  int32_t node = -1;
  int32_t slot = 0;
  uint32_t tape_id = 0;
  bool valid() const { return node >= 0; }
};

// Backward callback for one node. out_grads has one entry per output slot;
// entries are null when no gradient reached that slot. Implementations
// accumulate into input gradients via Tape::grad_buffer().
using BackwardFn =
    std::function<void(Tape&, const std::vector<const Tensor*>& out_grads)>;

// Reverse-mode tape. Node creation order is the topological order; backward
// visits nodes exactly once in reverse creation order, so identical graphs
// give bitwise-identical gradients. Single-owner during construction and
// backward.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // --- leaves ---
  ValueRef constant(Tensor v);  // no gradient tracked
  ValueRef leaf(Tensor v);      // gradient tracked (inputs under test)
  // Leaf bound to external storage (parameter). The tensor must outlive the
  // tape. Gradients are retrievable by name after backward().
  ValueRef param(const std::string& name, const Tensor* storage);

  // --- elementwise / arithmetic ---
  ValueRef add(ValueRef a, ValueRef b);
  ValueRef sub(ValueRef a, ValueRef b);
  ValueRef mul(ValueRef a, ValueRef b);
  ValueRef div(ValueRef a, ValueRef b);
  ValueRef neg(ValueRef a);
  ValueRef scale(ValueRef a, double s);
  ValueRef add_const(ValueRef a, double c);
  ValueRef relu(ValueRef a);
  ValueRef sigmoid(ValueRef a);
  ValueRef tanh_(ValueRef a);
  ValueRef exp_(ValueRef a);
  ValueRef log_(ValueRef a);
  ValueRef abs_(ValueRef a);
  ValueRef square(ValueRef a);

  // --- linear algebra / shaping (2-D row-major) ---
  ValueRef matmul(ValueRef a, ValueRef b);
  ValueRef transpose(ValueRef a);
  ValueRef add_rowvec(ValueRef a, ValueRef bias);   // bias: 1xC
  ValueRef concat_cols(ValueRef a, ValueRef b);
  ValueRef slice_cols(ValueRef a, size_t c0, size_t c1);
  ValueRef slice_rows(ValueRef a, size_t r0, size_t r1);
  ValueRef reshape(ValueRef a, std::vector<size_t> dims);
  ValueRef row_scale(ValueRef a, ValueRef s);       // s: Tx1, scales row t
  ValueRef mul_rowvec(ValueRef a, ValueRef s);      // s: 1xC, scales column c

  // --- reductions / rows ---
  ValueRef sum(ValueRef a);
  ValueRef mean(ValueRef a);
  ValueRef softmax_rows(ValueRef a);
  ValueRef logsoftmax_rows(ValueRef a);
  ValueRef layer_norm_rows(ValueRef a, double eps);
  // Per-channel normalization over the time axis (rows); a is TxC.
  ValueRef instance_norm_time(ValueRef a, double eps);

  // --- custom multi-output op ---
  std::vector<ValueRef> custom(const std::vector<ValueRef>& inputs,
                               std::vector<Tensor> outputs, BackwardFn fn);

  // --- access ---
  const Tensor& val(ValueRef r) const;
  size_t num_nodes() const { return nodes_.size(); }
  uint32_t id() const { return tape_id_; }

  // Runs reverse accumulation from a scalar loss. Throws ValidationError on a
  // non-scalar loss or a ref from another tape.
  void backward(ValueRef loss);

  // After backward(): gradient of a tracked ref, or null if none reached it.
  const Tensor* grad(ValueRef r) const;
  // Gradient for a registered parameter; zeros if the parameter was never
  // touched by the loss.
  Tensor param_grad(const std::string& name) const;
  const std::map<std::string, ValueRef>& params() const { return params_; }

  // For backward callbacks: lazily-allocated accumulation buffer of r.
  // Returns null if r does not track gradients (constant).
  Tensor* grad_buffer(ValueRef r);

 private:
  struct Node {
    std::vector<Tensor> values;        // one per slot (empty for param slot 0)
    const Tensor* external = nullptr;  // parameter storage
    std::vector<ValueRef> inputs;
    BackwardFn backward;
    std::vector<Tensor> grads;     // lazily sized per slot
    std::vector<uint8_t> has_grad;
    bool track = true;
  };

  ValueRef push(Node n);
  void check(ValueRef r) const;
  const Tensor& v(ValueRef r) const { return val(r); }

  // unary elementwise helper: fwd(x) and dfdx given (x, y)
  ValueRef unary(ValueRef a, double (*fwd)(double),
                 double (*dfdx)(double, double));

  std::vector<Node> nodes_;
  std::map<std::string, ValueRef> params_;
  uint32_t tape_id_;
  bool ran_backward_ = false;
};

// Max relative gradient error of a scalar function against central
// differences: max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-8).
// Throws NumericError if f returns a non-finite value.
double finite_diff_check(const std::function<double(const Tensor&)>& f,
                         const Tensor& x, double h, const Tensor& analytic);

// Convenience: build the scalar loss on a fresh tape from a tracked leaf;
// the analytic gradient comes from tape backward.
double finite_diff_check(
    const std::function<ValueRef(Tape&, ValueRef)>& build, const Tensor& x,
    double h = 1e-4);

}  // namespace etg::ad
