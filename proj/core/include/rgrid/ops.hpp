#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rgrid/tensor.hpp"

/// Differentiable operator set. Every op validates its shape algebra and
/// throws ConfigError naming the offending shapes.
namespace rgrid::ops {

/// a[..., m, k] x b[k, n] -> [..., m, n], or batched a[..., m, k] x b[..., k, n]
/// with identical leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Elementwise a + b where b's shape equals a's shape or a trailing suffix of
/// it (bias add, positional-embedding add).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor abs(const Tensor& a);

Tensor sum(const Tensor& a);
/// Mean over one axis; the axis is removed from the output shape.
Tensor mean(const Tensor& a, std::size_t axis);

/// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
Tensor gelu(const Tensor& a);
/// Over the last axis, max-subtracted.
Tensor softmax(const Tensor& a);
/// Over the last axis; gamma and beta are [features].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// x[B, C, H, W], weight[O, C, kh, kw], bias[O] (may be undefined).
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opt = {});
/// x[B, C, L], weight[O, C, k], bias[O] (may be undefined).
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opt = {});

/// Non-overlapping pooling with window = stride = k over the last two axes.
Tensor avg_pool2d(const Tensor& x, std::size_t k);
Tensor max_pool2d(const Tensor& x, std::size_t k);

Tensor reshape(const Tensor& a, Shape shape);
/// General axis permutation: out.shape[i] = a.shape[axes[i]].
Tensor permute(const Tensor& a, std::span<const std::size_t> axes);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
/// out.flat[i] = a.flat[index[i]]; gradients scatter-add back.
Tensor gather(const Tensor& a, std::vector<std::size_t> index, Shape out_shape);

/// Mean softmax cross-entropy of logits[B, K] against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Per-sample cross-entropy values (no tape).
std::vector<double> cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels);

}  // namespace rgrid::ops
