#pragma once

#include <cstddef>
#include <string>

#include "mirrormamba/module.hpp"
#include "mirrormamba/scan.hpp"

namespace mm {

/// Squeeze-and-excitation gate driven by a separate context map:
/// w = sigmoid(fc2(SiLU(fc1(GAP(context))))), output = x scaled by w.
template <typename T>
struct ChannelAttention {
  std::size_t channels = 0;
  Tensor<T> fc1_w, fc1_b;  // [C/4, C]
  Tensor<T> fc2_w, fc2_b;  // [C, C/4]

  static ChannelAttention init(std::size_t channels, Rng& rng);
  /// Per-channel weights in (0,1), shape [B,C].
  Tensor<T> weights(const Tensor<T>& context) const;
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& context) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Scan branch whose hidden state evolves on the low-level input while the
/// read-out projection C comes from the high-level guidance. Both inputs go
/// through the same norm, projection and depthwise convolution. Row-major
/// (M1) order, no residual.
template <typename T>
struct CrossScanBlock {
  std::size_t channels = 0;
  std::size_t inner = 0;
  Tensor<T> norm_g, norm_b;
  Tensor<T> in_x_w, in_x_b;
  Tensor<T> in_z_w, in_z_b;
  Tensor<T> conv_w, conv_b;
  ScanParams<T> ssm;
  Tensor<T> out_w, out_b;

  static CrossScanBlock init(std::size_t channels, std::size_t d_state, Rng& rng, std::size_t expand = 2);
  Tensor<T> forward(const Tensor<T>& x_low, const Tensor<T>& x_high) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// One decoder level. The running feature is refined as
///   F_final' = F_out + CC(SS(CS(F_out, F_final)), F_out)
/// then merged upward with expand_and_merge. With enabled = false the
/// refinement is a plain sum.
template <typename T>
struct BedLevel {
  std::size_t channels = 0;
  std::size_t next_channels = 0;  // 0 at the finest level (no expansion)
  bool enabled = true;
  CrossScanBlock<T> cs;
  ScanBlock<T> ss;
  ChannelAttention<T> cc;
  Tensor<T> expand_w, expand_b;  // [C_next, C, 1, 1]
  Tensor<T> head_w, head_b;      // [1, C, 1, 1]

  static BedLevel init(std::size_t channels, std::size_t next_channels, std::size_t d_state, Rng& rng,
                       bool enabled = true);

  Tensor<T> refine(const Tensor<T>& f_out, const Tensor<T>& f_final) const;
  /// bilinear 2x of (F_final + F_out), then a 1x1 convolution to C_next.
  Tensor<T> expand_and_merge(const Tensor<T>& f_final, const Tensor<T>& f_out) const;
  /// 1x1 convolution to one logit channel.
  Tensor<T> prediction_head(const Tensor<T>& f_final) const;

  void collect(const std::string& prefix, ParamList<T>& out) const;
};

}  // namespace mm
