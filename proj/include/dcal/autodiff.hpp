#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "dcal/tensor.hpp"

namespace dcal {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run gradient tape.
///
/// Each forward pass records onto a fresh tape. A node participates in
/// differentiation iff it is a leaf flagged `requires_grad` or has a
/// participating parent. `backward` walks nodes in exact reverse recording
/// order. Gradients of tensors the loss does not depend on are zero.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf; participates iff `value.requires_grad()`.
  Var leaf(Tensor value);
  /// Leaf that never participates.
  Var constant(Tensor value);
  /// Result of an op. `fn` runs during backward only when some parent participates.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);

  /// Populates gradients of every participating node. Throws UsageError if
  /// `loss` was not recorded on this tape or is not a scalar.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  /// Accumulated gradient, or zeros of the value's shape if none flowed.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const;

  /// Mutable gradient buffer of `v` (zero-initialised on first use), used by
  /// backward closures to accumulate into their parents.
  std::span<double> grad_buffer(Var v);
  /// Adds `contribution` to the gradient of `v`, adopting the buffer when none exists yet.
  void accumulate_grad(Var v, std::vector<double>&& contribution);
  void accumulate_grad(Var v, std::span<const double> contribution);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Node ids whose backward closures ran during the last backward, in visit order.
  const std::vector<std::size_t>& last_backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  void check_owned(Var v, const char* what) const;

  std::vector<Node> nodes_;
  std::vector<std::size_t> visits_;
};

// ---- differentiable ops ----------------------------------------------------

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var relu(Var a);

/// y[n,o] = sum_j W[o,j] x[n,j] (+ b[o]).
Var dense(Var x, Var weight);
Var dense(Var x, Var weight, Var bias);

/// 3x3 cross-correlation, zero padding 1: x[B,C,H,W], k[O,C,3,3] -> [B,O,H,W].
Var conv2d(Var x, Var kernel);

/// Adds per-channel bias b[C] to x[B,C,...].
Var add_channel_bias(Var x, Var bias);

/// 2x2 average pooling with stride 2 (H and W must be even).
Var avg_pool2(Var x);
/// Mean over spatial dims: [B,C,H,W] -> [B,C].
Var global_avg_pool(Var x);

/// x[n,c,...] * table[members[n], c] for table [K,C].
Var scale_by_member(Var x, Var table, std::span<const int> members);
/// x[n,c,...] + table[members[n], c] for table [K,C].
Var add_bias_by_member(Var x, Var table, std::span<const int> members);

/// x[n,...] * factors[n], factors constant.
Var scale_rows(Var x, std::span<const double> factors);

struct CrossEntropy {
  Var loss;      // scalar mean over rows
  Tensor probs;  // [B,C] softmax
};

/// Mean softmax cross-entropy. Max-subtracted, so stable for large logits.
CrossEntropy softmax_cross_entropy(Var logits, std::span<const int> labels);

/// Row-wise softmax of a [B,C] tensor (no tape).
Tensor softmax_rows(const Tensor& logits);

}  // namespace dcal
