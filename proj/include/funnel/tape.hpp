#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "funnel/tensor.hpp"

namespace funnel {

class GradTape;

// Value plus gradient storage. Parameters keep one TapeNode alive across
// steps; intermediates live as long as the tape's recorded ops reference them.
struct TapeNode {
  Tensor3 value;
  Tensor3 grad;  // allocated on first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (!grad.same_shape(value)) grad = Tensor3::zeros(value.batch, value.seq, value.dim);
  }
};

using NodeRef = std::shared_ptr<TapeNode>;

inline NodeRef make_node(Tensor3 v, bool requires_grad = false) {
  auto n = std::make_shared<TapeNode>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return n;
}

// Cheap handle: a node plus the tape (if any) that records ops on it.
// A Var with no tape participates in forward computation only.
class Var {
 public:
  Var() = default;
  Var(NodeRef n, GradTape* tape) : n_(std::move(n)), tape_(tape) {}

  const Tensor3& value() const { return n_->value; }
  Tensor3& grad() { n_->ensure_grad(); return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  GradTape* tape() const { return tape_; }
  const NodeRef& node() const { return n_; }
  bool empty() const { return !n_; }

 private:
  NodeRef n_;
  GradTape* tape_ = nullptr;
};

// Reverse-mode tape: an ordered record of executed primitive ops. backward()
// replays the records in exact reverse execution order, exactly once.
class GradTape {
 public:
  // Wrap a fresh tensor (input or constant).
  Var leaf(Tensor3 v, bool requires_grad = false) {
    return Var(make_node(std::move(v), requires_grad), this);
  }

  // Bind an existing node (a parameter) to this tape.
  Var use(const NodeRef& n) { return Var(n, this); }

  void record(std::function<void()> bw) { ops_.push_back(std::move(bw)); }

  size_t size() const { return ops_.size(); }

  // Seeds dLoss/dLoss = 1 and runs every recorded op backward. The loss must
  // be a scalar produced under this tape.
  void backward(const Var& loss);

  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

// Free-function form of the same operation.
inline void backward(GradTape& tape, const Var& loss) { tape.backward(loss); }

// Wrap a tensor for pure inference (no tape, no gradients).
inline Var constant(Tensor3 v) { return Var(make_node(std::move(v), false), nullptr); }

// ---------------------------------------------------------------------------
// Primitive ops. Each runs eagerly and, when any input requires gradients and
// lives on a tape, records its backward closure.
// ---------------------------------------------------------------------------

// (B,S,K) x (1,K,N) -> (B,S,N). Plain 2-D matmul is the batch==1 case.
Var matmul(const Var& a, const Var& w);

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

// max(a, b) elementwise; gradient routes to a on ties.
Var emax(const Var& a, const Var& b);

Var scale(const Var& a, Scalar c);

// x: (B,S,N), bias: (1,1,N) broadcast over every position.
Var add_bias(const Var& x, const Var& bias);

// (1,S,D) -> (B,S,D); backward sums over the batch.
Var broadcast_batch(const Var& x, int b);

// Softmax over the last dim with masked positions receiving weight exactly 0.
// mask.batch must divide x.batch (heads expand the batch axis); mask.seq must
// equal x.dim. An all-masked row is an error.
Var softmax_lastdim(const Var& x, const SeqMask& mask);

// Causal variant: entry (i, j) is additionally masked where kpos[j] > qpos[i].
Var softmax_lastdim_causal(const Var& x, const SeqMask& mask,
                           const std::vector<int>& qpos, const std::vector<int>& kpos);

// x / sqrt(mean(x^2) + eps) * gain, per (batch, seq) position. gain: (1,1,D).
Var rmsnorm(const Var& x, const Var& gain, Scalar eps = 1e-6);

// tanh-approximation GELU.
Var gelu(const Var& x);

// Rotary position rotation applied per head-dim pair, using the given
// original-coordinate positions (one per sequence slot, shared across batch).
Var rope_apply(const Var& x, const std::vector<int>& positions, int n_heads, Scalar base);

// Per (batch, head) attention logits: out[b*H+h] = scale * Q_bh * K_bh^T.
// q: (B,Sq,D), k: (B,Sk,D) -> (B*H, Sq, Sk).
Var head_scores(const Var& q, const Var& k, int n_heads, Scalar scale);

// Per (batch, head) value mix: probs (B*H,Sq,Sk) x v (B,Sk,D) -> (B,Sq,D).
Var head_mix(const Var& probs, const Var& v, int n_heads);

// Embedding lookup; backward scatter-adds into the table. table: (1,V,D).
Var gather_rows(const Var& table, const TokenIds& ids);

// Fused softmax + cross-entropy, weighted mean over positions:
//   loss = sum_i w_i * (-log p_{y_i}) / sum_i w_i         -> (1,1,1)
// logits: (B,S,C); labels and weights have B*S entries. sum(w) must be > 0.
Var softmax_xent(const Var& logits, const std::vector<int>& labels,
                 const std::vector<Scalar>& weights);

// Sum of every element -> (1,1,1). Backward broadcasts the upstream scalar.
Var sum_all(const Var& x);

// ---------------------------------------------------------------------------
// FLOPs instrumentation: matmul-family ops add 2*m*n*k per multiply when a
// counter is active. Normalization, softmax, and elementwise ops contribute 0
// by convention.
// ---------------------------------------------------------------------------
void flops_counter_begin();
int64_t flops_counter_end();
void flops_counter_add(int64_t n);

namespace detail {

inline GradTape* pick_tape(std::initializer_list<const Var*> vars) {
  GradTape* t = nullptr;
  for (const Var* v : vars) {
    if (v->empty() || !v->tape()) continue;
    if (t && t != v->tape()) throw usage_error("operands recorded on different tapes");
    t = v->tape();
  }
  return t;
}

inline bool any_grad(std::initializer_list<const Var*> vars) {
  for (const Var* v : vars)
    if (!v->empty() && v->requires_grad()) return true;
  return false;
}

inline Var result(GradTape* tape, Tensor3 out, bool requires_grad) {
  return Var(make_node(std::move(out), requires_grad), tape);
}

}  // namespace detail

}  // namespace funnel
