#pragma once

#include <cstdint>

#include "etm/core/autograd.hpp"

// Differentiable primitives on NCHW tensors. Every op records a backward
// closure when any input requires a gradient.
namespace ETM_NS::ops {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

/// x: [B,Ci,H,W], weight: [Co,Ci,k,k], bias: [Co] or undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, Conv2dOptions options = {});

std::int64_t conv_output_size(std::int64_t input, int kernel, Conv2dOptions options);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, real factor);

/// max(x, 0), subgradient 0 at 0.
Var relu(const Var& x);
Var leaky_relu(const Var& x, real slope);

/// [B,C,H,W] -> [B,C,1,1]
Var global_avg_pool(const Var& x);
/// Nearest-neighbour resize; a 1x1 input is broadcast over the whole map.
Var upsample_nearest(const Var& x, std::int64_t out_h, std::int64_t out_w);
/// Bilinear resize with aligned corners.
Var resize_bilinear(const Var& x, std::int64_t out_h, std::int64_t out_w);

/// Softmax / log-softmax over the channel axis of [B,C,H,W].
Var softmax_channels(const Var& x);
Var log_softmax_channels(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);

}  // namespace etm::ops
