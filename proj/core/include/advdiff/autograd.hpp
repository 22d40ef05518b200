#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape owns every intermediate of one computation; models stay const and
// read-only, so concurrent forward/backward passes on separate tapes are safe.

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "advdiff/tensor.hpp"

namespace advdiff::ag {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A value that never receives gradient.
  Var constant(Tensor value);
  /// A leaf whose gradient is accumulated by backward().
  Var leaf(Tensor value);

  /// Records an op result. `backward` runs only if some input requires grad.
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  /// Seeds d(output)/d(output) = 1 for a single-element output and propagates.
  void backward(Var output);

  /// Gradient accumulated at `v`; zeros when nothing flowed there.
  Tensor grad(Var v) const;

  bool requires_grad(Var v) const { return needs_grad(v.id()); }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  /// Adds `g` into the gradient buffer of node `id` (allocated lazily).
  void accumulate(int id, const Tensor& g);
  /// Mutable gradient buffer for node `id`, allocated on first use.
  Tensor& grad_buffer(int id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

// ---- elementwise -----------------------------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var silu(Var x);
Var sigmoid(Var x);

// ---- shape -----------------------------------------------------------------
Var reshape(Var x, Shape shape);
/// Concatenates two NCHW tensors along the channel axis.
Var concat_channels(Var a, Var b);
/// Nearest-neighbour 2x spatial upsampling of an NCHW tensor.
Var upsample2x(Var x);
/// (N, C, 2H, 2W) -> (N, 4C, H, W); each 2x2 block becomes four channels.
Var space_to_depth2(Var x);
/// Inverse of space_to_depth2.
Var depth_to_space2(Var x);
/// Mean over spatial positions: NCHW -> NC.
Var global_avg_pool(Var x);

// ---- linear algebra --------------------------------------------------------
/// 2-D convolution. x: N x Cin x H x W, w: Cout x Cin x k x k, b: Cout.
Var conv2d(Var x, Var w, Var b, int stride, int pad);
/// y = x W^T + b with x: N x in, w: out x in, b: out (b may be invalid).
Var linear(Var x, Var w, Var b);
/// Adds a per-sample, per-channel offset e (N x C) to x (N x C x H x W).
Var add_channel_offset(Var x, Var e);
/// Row-wise L2 normalisation of an N x d matrix.
Var l2_normalize_rows(Var x);
/// Row-wise dot product of two N x d matrices -> N.
Var row_dot(Var a, Var b);

// ---- reductions / losses ---------------------------------------------------
Var sum(Var x);
Var mean(Var x);
/// Mean squared difference; a scalar.
Var mse(Var a, Var b);
/// Mean softmax cross-entropy of N x K logits against integer labels.
Var cross_entropy(Var logits, std::span<const int> labels);

}  // namespace advdiff::ag
