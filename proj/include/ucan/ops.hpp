#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ucan/tensor.hpp"

namespace ucan::ops {

/// Guard below which a vector is considered degenerate by l2_normalize.
inline constexpr double kNormEpsilon = 1e-12;

// Elementwise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
/// Gradient passes only where lo < a < hi.
Tensor clamp(const Tensor& a, double lo, double hi);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor squared_norm(const Tensor& a);
/// Mean of a list of scalar tensors.
Tensor mean_of(std::span<const Tensor> scalars);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[m x n] + b[n] broadcast over rows, or x[n] + b[n].
Tensor add_bias(const Tensor& x, const Tensor& b);
/// W[out x in] * flatten(x) + b[out].
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);

// Feature-map operations on C x H x W tensors.
Tensor conv1x1(const Tensor& z, const Tensor& w, const Tensor& b);
/// Zero-padded, stride-1 3x3 convolution; w is [out x in x 3 x 3].
Tensor conv3x3(const Tensor& z, const Tensor& w, const Tensor& b);
/// 2x2 stride-2 pooling; odd trailing rows/columns are dropped.
Tensor avg_pool2(const Tensor& z);
Tensor max_pool2(const Tensor& z);
Tensor global_avg_pool(const Tensor& z);

// Normalization and losses.
Tensor l2_normalize(const Tensor& p);
/// Each row of a [rows x cols] matrix scaled to unit norm.
Tensor normalize_rows(const Tensor& w);
/// -log softmax(logits)[label].
Tensor softmax_xent(const Tensor& logits, std::size_t label);

/// Numerically stable softmax of raw values (no graph).
std::vector<double> softmax(std::span<const double> logits);
std::size_t argmax(std::span<const double> values);

}  // namespace ucan::ops
