#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "mirrormamba/module.hpp"
#include "mirrormamba/scan.hpp"

namespace mm {

struct BackboneConfig {
  std::size_t base_channels = 16;
  std::array<std::size_t, 4> stage_depths{1, 1, 2, 1};
  std::size_t input_channels = 3;

  /// Channel width of pyramid level i (0-based): C1 * 2^i.
  std::size_t channels(std::size_t level) const { return base_channels << level; }
};

/// Four feature maps at strides 4, 8, 16, 32.
template <typename T>
struct FeaturePyramid {
  std::array<Tensor<T>, 4> levels;
};

/// Visual state-space block: a four-direction scan mixer (shared parameters,
/// outputs averaged) and a SiLU MLP, each wrapped in a residual.
template <typename T>
struct VssBlock {
  ScanBlock<T> mixer;
  Tensor<T> mlp_norm_g, mlp_norm_b;
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;

  static VssBlock init(std::size_t channels, std::size_t d_state, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Small VMamba-style encoder shared by every input modality.
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, std::size_t d_state, Rng& rng);

  const BackboneConfig& config() const { return cfg_; }

  /// 4x4 stride-4 convolution, then channel layer norm.
  Tensor<T> patch_embed(const Tensor<T>& image) const;
  /// Stage blocks followed by the stride-2 downsample (none after stage 3).
  Tensor<T> vss_stage(const Tensor<T>& x, std::size_t stage) const;
  Tensor<T> stage_blocks(const Tensor<T>& x, std::size_t stage) const;
  Tensor<T> downsample(const Tensor<T>& x, std::size_t stage) const;
  FeaturePyramid<T> extract_pyramid(const Tensor<T>& image) const;

  void collect(const std::string& prefix, ParamList<T>& out) const;

  // Exposed for tests that zero or inspect individual weights.
  Tensor<T> patch_w, patch_b, patch_norm_g, patch_norm_b;
  std::array<std::vector<VssBlock<T>>, 4> stages;
  std::array<Tensor<T>, 3> down_w, down_b, down_norm_g, down_norm_b;

 private:
  BackboneConfig cfg_;
};

/// Layer norm over the channel axis of a [B,C,H,W] map.
template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta);

/// PyTorch-default convolution init: uniform(+-1/sqrt(fan_in)), zero bias.
template <typename T>
Tensor<T> conv_kernel_init(std::size_t c_out, std::size_t c_in, std::size_t k, Rng& rng);

}  // namespace mm
