#pragma once

// Minimal reverse-mode automatic differentiation over NCHW float tensors.
//
// A Var is a shared handle to a graph node. Operations record their inputs
// and a backward closure only when gradients are enabled on the calling
// thread and at least one input requires a gradient, so inference runs
// (NoGradGuard) build no graph and never touch shared parameter state.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mdc/tensor.hpp"

namespace mdc::ag {

class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  explicit Node(Tensor v) : value(std::move(v)) {}

  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> inputs;
  std::function<void(Node&)> backward_fn;

  /// Gradient storage, zero-allocated on first use.
  Tensor& grad_buffer();
  const Shape& shape() const { return value.shape(); }
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

Var constant(Tensor t);
Var parameter(Tensor t);
float scalar(const Var& v);

/// Runs reverse accumulation from a 1x1x1x1 root.
void backward(const Var& root);

// Elementwise arithmetic (operands must share a shape).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var add_scalar(const Var& a, float s);
Var sum_all(std::span<const Var> terms);

// Pointwise nonlinearities.
Var leaky_relu(const Var& a, float slope);
Var softplus(const Var& a);
Var clamp_min(const Var& a, float lo);
/// Clamps to [0,1] in the forward pass; the gradient passes unchanged.
Var clamp01_ste(const Var& a);
/// Rounds half away from zero; identity gradient.
Var ste_round(const Var& a);

// Layout.
Var concat_channels(std::span<const Var> parts);
Var slice_channels(const Var& a, int begin, int count);
Var crop_spatial(const Var& a, int height, int width);
Var broadcast_channels(const Var& per_channel, const Shape& target);
Var avg_pool2(const Var& a);
Var upsample_nearest2(const Var& a);

// Convolutions. Weights are Cout x Cin x K x K (conv, depthwise with Cin=1)
// or Cin x Cout x K x K (transposed conv); bias may be null.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride,
                     int pad, int output_pad);
Var depthwise_conv2d(const Var& x, const Var& w, const Var& b, int pad);

/// Bilinear sampling of `img` at (i + dy, j + dx); flow is Nx2xHxW with
/// channel 0 = dy, channel 1 = dx. Sample coordinates clamp to the border.
Var warp_bilinear(const Var& img, const Var& flow);

/// Per-pixel L2 normalisation across channels.
Var channel_normalize(const Var& a, float eps = 1e-10f);

// Reductions to 1x1x1x1.
Var sum(const Var& a);
Var mean(const Var& a);
Var mse(const Var& a, const Var& b);
Var l1(const Var& a, const Var& b);

/// Total bits -log2 P(y) of `y` under a discretized Gaussian with unit bins:
/// P = Phi((y+.5-mu)/sigma) - Phi((y-.5-mu)/sigma), each term floored at
/// p_min.
Var gaussian_bits(const Var& y, const Var& mu, const Var& sigma, double p_min);

}  // namespace mdc::ag
