#pragma once

// Tape-based reverse-mode differentiation over the handful of primitives the
// conv networks in this project need.

#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "phg/tensor.hpp"

namespace phg {

struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  Var constant(Tensor value);
  // Records a trainable leaf. `value` must outlive the tape.
  Var parameter(std::size_t index, const Tensor& value);

  Var record(Tensor value, std::span<const Var> inputs, Backward backward);

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Adds `g` into the gradient slot of `v`; no-op for nodes that do not need
  // a gradient.
  void accumulate(Var v, const Tensor& g);

  // Runs the backward pass from a scalar `loss` and returns one gradient per
  // entry of `params` (zero-filled for parameters the loss does not touch).
  std::vector<Tensor> gradients(Var loss, std::span<const Tensor> params);

  // Node ids in the order the last backward pass visited them.
  const std::vector<std::size_t>& last_backward_order() const { return visited_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    std::optional<std::size_t> param;
    bool needs_grad = false;
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<std::size_t> visited_;
};

namespace ad {

// Cross-correlation of input [Ci,H,W] with kernels [Co,Ci,kh,kw]; `bias` is
// optional ([Co]). Output spatial size is H + 2*padding - kh + 1.
Var conv2d(Tape& tape, Var input, Var kernels, Var bias, std::size_t padding);
Var relu(Tape& tape, Var x);
// 2x2 max pooling with stride 2; H and W must be even.
Var max_pool2(Tape& tape, Var x);
// Nearest-neighbour 2x upsampling.
Var upsample2(Tape& tape, Var x);
Var concat_channels(Tape& tape, std::span<const Var> parts);
Var softmax(Tape& tape, Var logits);
Var add(Tape& tape, Var a, Var b);
Var mul(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var x, float factor);
Var sum(Tape& tape, Var x);
Var slice_channels(Tape& tape, Var x, std::size_t begin, std::size_t end);

Var cross_entropy(Tape& tape, Var logits, const LabelMap& target);
Var l2_loss(Tape& tape, Var pred, const Tensor& target);
// KL(softmax(teacher) || softmax(student)) averaged over pixels; the teacher
// side is a constant.
Var kl_logits(Tape& tape, Var student_logits, const Tensor& teacher_logits);

}  // namespace ad

// Forward-only kernels shared by the tape ops and by evaluation code.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor* bias, std::size_t padding);
double loss_cross_entropy(const Tensor& logits, const LabelMap& target);
double loss_l2(const Tensor& pred, const Tensor& target);
double loss_kl_logits(const Tensor& student_logits, const Tensor& teacher_logits);

}  // namespace phg
