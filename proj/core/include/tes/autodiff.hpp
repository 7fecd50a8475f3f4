#pragma once

// Tape-based reverse-mode differentiation over tes::Tensor.
//
// A Tape owns every node created while it is alive. Leaves are either owned
// copies or borrowed references to tensors that must outlive the tape (model
// parameters are borrowed so inference does not copy weights). Nodes that do
// not depend on any requires_grad leaf record no backward rule, so a tape
// built purely from constants is a plain forward pass.
//
// Gradient semantics: backward() zeroes the gradients of interior nodes and
// accumulates into leaf gradients. Callers that run several backward passes
// on one tape must call zero_grad() between them.

#include <atomic>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "tes/tensor.hpp"

namespace tes {

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  /// Gradient buffer; a zero tensor if backward never reached this node.
  const Tensor& grad() const;
  bool requires_grad() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Accumulates into in_grads[i] (nullptr when input i needs no gradient).
  using BackwardFn =
      std::function<void(const Tensor& out_grad, std::span<Tensor* const> in_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  /// `value` must outlive the tape.
  Var borrow(const Tensor& value, bool requires_grad = false);

  /// Records an operation. The backward rule is dropped when no input
  /// requires a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Returns the number of operations replayed.
  std::size_t backward(const Var& loss);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return *nodes_[id].value; }
  std::shared_ptr<const Tensor> shared_value(const Var& v) const { return nodes_[v.id_].value; }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    std::shared_ptr<const Tensor> value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Tensor& grad_buffer(std::size_t id);

  std::vector<Node> nodes_;
  mutable Tensor zero_scratch_;
};

// ---- operations ------------------------------------------------------------
// All operations require their arguments to live on the same tape.

/// input[batch,in] · weight[in,out] + bias[out].
Var affine(const Var& input, const Var& weight, const Var& bias);
/// Cross-correlation of input[batch,cin,H,W] with kernel[cout,cin,kh,kw].
Var conv2d(const Var& input, const Var& kernel, const Var& bias, std::size_t stride,
           std::size_t padding);
/// Nearest-neighbour 2x spatial upsampling of [batch,c,H,W].
Var upsample2x(const Var& input);

Var relu(const Var& x);
Var tanh_op(const Var& x);
/// Row-wise softmax over the last axis of a rank-1 or rank-2 tensor.
Var softmax(const Var& x);
Var log_softmax(const Var& x);

Var reshape(const Var& x, Shape shape);
/// Collapses every axis after the first.
Var flatten(const Var& x);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
/// Elementwise clamp; gradient passes only where the input lies inside [lo, hi].
Var clamp(const Var& x, double lo, double hi);
/// Projects onto the l-inf ball of radius eps around `center` (same size as
/// x). Gradient is passed through unchanged.
Var linf_project(const Var& x, std::span<const double> center, double eps);
Var sum(const Var& x);
Var mean(const Var& x);

/// Mean over the batch of -log softmax(logits)[label].
Var cross_entropy(const Var& logits, std::span<const std::size_t> labels);

/// KL(target || predicted) for probability vectors. Zero predicted entries
/// under positive target mass are clamped to 1e-12 and counted.
Var kl_divergence(const Var& target, const Var& predicted);
std::size_t kl_clamp_count();

/// max(F_y - max_{j!=y} F_j, -margin), averaged over rows of a rank-2 input.
Var cw_loss_untargeted(const Var& logits, std::span<const std::size_t> labels, double margin);
/// max(max_{j!=t} F_j - F_t, -margin), averaged over rows.
Var cw_loss_targeted(const Var& logits, std::span<const std::size_t> targets, double margin);

Var cw_loss_untargeted(const Var& logits, std::size_t label, double margin);
Var cw_loss_targeted(const Var& logits, std::size_t target, double margin);

}  // namespace tes
