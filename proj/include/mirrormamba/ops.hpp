#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "mirrormamba/tensor.hpp"

// Differentiable operations. Layout is row-major and channel-first
// ([B,C,H,W]) unless an op says otherwise. Binary elementwise ops accept
// identical shapes, or a right operand that lacks only the leading batch axis.

namespace mm {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> silu(const Tensor<T>& a);
template <typename T> Tensor<T> softplus(const Tensor<T>& a);

/// Sum of all elements, shape [1].
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes);
template <typename T> Tensor<T> flip(const Tensor<T>& a, std::size_t axis);

/// out[i] = a[source[i]]. Backward scatters, so source need not be a bijection.
template <typename T>
Tensor<T> gather(const Tensor<T>& a, Shape out_shape, std::shared_ptr<const std::vector<std::size_t>> source);

/// [B,C,H,W] -> [B,H,W,C] and back.
template <typename T> Tensor<T> to_channels_last(const Tensor<T>& x);
template <typename T> Tensor<T> to_channels_first(const Tensor<T>& x);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis = 1);
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& a, const std::vector<std::size_t>& sizes, std::size_t axis = 1);

/// Normalizes over the last axis, then applies gamma/beta of that width.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// x[..., in] * W[out, in]^T + b[out]. Pass an undefined bias to skip it.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Cross-correlation of x[B,Cin,H,W] with kernel[Cout,Cin,kh,kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, int stride, int padding);

/// Per-channel cross-correlation, kernel[C,1,k,k], stride 1.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, int padding);

/// Spatial mean of [B,C,H,W] -> [B,C].
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

/// x[B,C,H,W] scaled by w[B,C] per channel.
template <typename T> Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& w);

/// Bilinear resize with half-pixel centers (align_corners = false); source
/// coordinates are clamped to the valid range.
template <typename T> Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

/// Mean binary cross-entropy from logits, max(z,0) - z*y + log1p(exp(-|z|)).
/// The target never receives a gradient.
template <typename T> Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target);

}  // namespace mm
