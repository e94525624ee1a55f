#pragma once

#include <span>

#include "rundet/tensor.hpp"

namespace rundet {

struct ConvGeometry {
  int stride = 1;
  int pad = 0;
};

/// Cross-correlation (no kernel flip). x: BxCxHxW, w: OxCxKxK, bias: (O) or
/// undefined. Output extent floor((H + 2*pad - K) / stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, ConvGeometry geom);

/// Transposed convolution, the exact adjoint of conv2d for the same kernel
/// and geometry. x: BxCxHxW, w: CxOxKxK. Output extent (H-1)*stride - 2*pad + K.
Tensor deconv2d(const Tensor& x, const Tensor& w, const Tensor& bias, ConvGeometry geom);

/// Unpadded max pooling. Ties route the gradient to the first maximum in
/// row-major window order.
Tensor maxpool2d(const Tensor& x, int window, int stride);

Tensor relu(const Tensor& x);

/// Per-position channel L2 normalisation followed by a per-channel gain.
Tensor l2norm_channels(const Tensor& x, const Tensor& gamma);
inline constexpr double kL2NormEpsilon = 1e-10;

Tensor add(const Tensor& a, const Tensor& b);
Tensor concat_channels(std::span<const Tensor> parts);

/// Elementwise scale * x + shift with scalar constants.
Tensor affine(const Tensor& x, double scale, double shift);

/// Sum of -log softmax(row)[target] over rows whose target is >= 0.
///
/// Rows of `num_classes` logits are read from `logits` as follows:
///  - rank 1 or 2: contiguous rows;
///  - rank 4 (BxG*KxHxW prediction map): one row per (b, y, x, g), ordered
///    exactly in that nesting, channel g*K + k holding class k.
/// `targets` has one entry per row; -1 excludes the row.
Tensor softmax_ce(const Tensor& logits, std::span<const int> targets, int num_classes);

/// Number of softmax rows `softmax_ce` reads from `logits`.
std::size_t softmax_row_count(const Shape& logits, int num_classes);

/// Sum over elements of weight * huber(pred - target) with unit threshold:
/// 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise. Empty weights means all ones.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, std::span<const double> weights = {});

}  // namespace rundet
