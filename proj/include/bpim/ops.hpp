#pragma once

#include <vector>

#include "bpim/autograd.hpp"

namespace bpim::ops {

// Element-wise arithmetic. Binary ops require identical shapes unless noted.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& x, double s);
/// x [N, C, ...] times w [N, 1, ...]: w is broadcast across channels.
Var mul_channel_broadcast(const Var& x, const Var& w);
/// x [N, ...] plus e [1, ...]: e is broadcast across the batch.
Var add_batch_broadcast(const Var& x, const Var& e);
Var sum(const Var& x);

Var silu(const Var& x);
Var sigmoid(const Var& x);
Var gelu(const Var& x);
Var exp(const Var& x);
Var abs(const Var& x);
Var clamp_min(const Var& x, double lo);

Var reshape(const Var& x, Shape shape);
/// Concatenation along axis 1 (channels).
Var concat(const std::vector<Var>& xs);
/// GSConv-style two-group shuffle: even channels first, then odd channels.
Var channel_shuffle(const Var& x);

// Convolutions. Weights are [O, C/groups, kh, kw] and [O, C, kd, kh, kw].
struct Conv2dOptions {
    int stride = 1;
    int padding = 0;
    int groups = 1;
};
Var conv2d(const Var& x, const Var& w, const Var& bias, const Conv2dOptions& opt = {});
/// Stride-1 3D convolution over [N, C, D, H, W] with symmetric padding per axis.
Var conv3d(const Var& x, const Var& w, const Var& bias, int pad_d, int pad_h, int pad_w);

// Normalisation. Channel axis is 1 for batch/group norm, last axis for layer norm.
struct RunningStats {
    Tensor mean;
    Tensor var;
};
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, RunningStats& stats, bool training,
               double momentum, double eps);
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);

// Resampling over the trailing [H, W] axes of [N, C, H, W].
Var max_pool2d(const Var& x, int kernel, int stride, int padding);
Var avg_pool2d(const Var& x, int kernel, int stride);
Var upsample_nearest(const Var& x, int factor);
/// Nearest-neighbour resize to an arbitrary [oh, ow].
Var resize_nearest(const Var& x, std::int64_t oh, std::int64_t ow);

/// Stacks [N, C, H, W] maps into [N, C, S, H, W] along a new axis 2.
Var stack_depth(const std::vector<Var>& xs);
/// Max over axis 2 of [N, C, S, H, W], removing it.
Var max_over_depth(const Var& x);

// Token layout and dense algebra.
/// [N, C, H, W] -> [N, H*W, C].
Var flatten_tokens(const Var& x);
/// [N, H*W, C] -> [N, C, H, W].
Var unflatten_tokens(const Var& t, std::int64_t h, std::int64_t w);
/// x [..., in] with weight [out, in] and optional bias [out].
Var linear(const Var& x, const Var& w, const Var& bias);
/// Batched a [B, M, K] times b [B, K, N].
Var matmul(const Var& a, const Var& b);
Var transpose_last2(const Var& x);
Var softmax_last(const Var& x);
/// [N, T, h*d] -> [N*h, T, d] and back.
Var split_heads(const Var& x, int heads);
Var merge_heads(const Var& x, int heads);

}  // namespace bpim::ops
