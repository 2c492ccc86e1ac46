// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "fpe/tensor.hpp"

// Reverse-mode differentiation over activations. Model weights are plain
// tensors and never receive gradients; only inputs created with
// Var::leaf(..., true) and everything computed from them are tracked.
namespace fpe::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  static Var leaf(Tensor value, bool requires_grad);

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor& grad() const { return node_->grad; }
  const std::shared_ptr<Node>& node() const { return node_; }
  bool defined() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Seeds root.grad with `seed` and propagates to every tracked ancestor.
void backward(const Var& root, const Tensor& seed);

struct ConvSpec {
  int stride = 1;
  int pad_top = 0;
  int pad_left = 0;
  int pad_bottom = 0;
  int pad_right = 0;

  static ConvSpec same(int pad, int stride = 1) { return {stride, pad, pad, pad, pad}; }
};

// x: [N, in], weight: [out, in] -> [N, out]
Var linear(const Var& x, const Tensor& weight, const Tensor* bias);
// x: [C, H, W], weight: [O, C, kh, kw] -> [O, Ho, Wo]
Var conv2d(const Var& x, const Tensor& weight, const Tensor* bias, ConvSpec spec);
// x: [C, ...]; statistics over (C / groups) channels and all trailing dims.
Var group_norm(const Var& x, int groups, const Tensor& gamma, const Tensor& beta, float eps);
// x: [N, D]; normalized over D.
Var layer_norm(const Var& x, const Tensor& gamma, const Tensor& beta, float eps);

Var silu(const Var& x);
Var gelu(const Var& x);
Var quick_gelu(const Var& x);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, float s);
// x: [C, ...], bias: [C] broadcast over trailing dims.
Var add_channel_bias(const Var& x, const Var& bias);
// Concatenate along the leading axis.
Var concat0(const Var& a, const Var& b);
// Split the last axis at `at`.
std::pair<Var, Var> split_last(const Var& x, int64_t at);
// [C, H, W] -> [C, 2H, 2W]
Var upsample_nearest2x(const Var& x);
Var reshape(const Var& x, Shape shape);
// [A, B] -> [B, A]
Var transpose2d(const Var& x);
// Row `row` of a [N, D] matrix as [1, D].
Var select_row(const Var& x, int64_t row);
// Sum of all elements of (a - b)^2 divided by element count.
Var mse(const Var& a, const Var& b);

// Called with the stacked per-head probabilities [heads, N, M] after softmax.
// Returning true means the hook overwrote the probabilities, in which case
// no gradient flows back to the queries and keys.
using ProbsHook = std::function<bool(Tensor& probs)>;

// Multi-head scaled dot-product attention.
// q: [N, heads*d], k: [M, heads*d], v: [M, heads*dv] -> [N, heads*dv]
Var attention(const Var& q, const Var& k, const Var& v, int heads, bool causal, const ProbsHook& hook);

}  // namespace fpe::ag
