#include "mirrormamba/backbone.hpp"

#include <cmath>

#include "mirrormamba/ops.hpp"

namespace mm {

template <typename T>
Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  return to_channels_first(layer_norm(to_channels_last(x), gamma, beta));
}

template <typename T>
Tensor<T> conv_kernel_init(std::size_t c_out, std::size_t c_in, std::size_t k, Rng& rng) {
  auto w = make_param<T>({c_out, c_in, k, k});
  const double bound = 1.0 / std::sqrt(double(c_in * k * k));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : w.vec()) v = T(u(rng));
  return w;
}

template <typename T>
VssBlock<T> VssBlock<T>::init(std::size_t channels, std::size_t d_state, Rng& rng) {
  VssBlock b;
  b.mixer = ScanBlock<T>::init(channels, d_state, rng, true);
  b.mlp_norm_g = make_param<T>({channels}, T(1));
  b.mlp_norm_b = make_param<T>({channels});
  b.fc1_w = trunc_normal<T>({2 * channels, channels}, 0.02, rng);
  b.fc1_b = make_param<T>({2 * channels});
  b.fc2_w = make_param<T>({channels, 2 * channels});
  b.fc2_b = make_param<T>({channels});
  return b;
}

template <typename T>
Tensor<T> VssBlock<T>::forward(const Tensor<T>& x) const {
  auto y = mixer.forward_multi(x, kAllScanOrders);
  auto h = layer_norm(to_channels_last(y), mlp_norm_g, mlp_norm_b);
  h = linear(silu(linear(h, fc1_w, fc1_b)), fc2_w, fc2_b);
  return add(y, to_channels_first(h));
}

template <typename T>
void VssBlock<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  mixer.collect(prefix + "mixer.", out);
  add_param(out, prefix, "mlp.norm.g", mlp_norm_g);
  add_param(out, prefix, "mlp.norm.b", mlp_norm_b);
  add_param(out, prefix, "mlp.fc1.w", fc1_w);
  add_param(out, prefix, "mlp.fc1.b", fc1_b);
  add_param(out, prefix, "mlp.fc2.w", fc2_w);
  add_param(out, prefix, "mlp.fc2.b", fc2_b);
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& cfg, std::size_t d_state, Rng& rng) : cfg_(cfg) {
  if (cfg.base_channels == 0) throw ArgumentError("backbone: base_channels must be positive");
  const std::size_t c1 = cfg.channels(0);
  patch_w = conv_kernel_init<T>(c1, cfg.input_channels, 4, rng);
  patch_b = make_param<T>({c1});
  patch_norm_g = make_param<T>({c1}, T(1));
  patch_norm_b = make_param<T>({c1});
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t d = 0; d < cfg.stage_depths[s]; ++d)
      stages[s].push_back(VssBlock<T>::init(cfg.channels(s), d_state, rng));
    if (s < 3) {
      down_w[s] = conv_kernel_init<T>(cfg.channels(s + 1), cfg.channels(s), 2, rng);
      down_b[s] = make_param<T>({cfg.channels(s + 1)});
      down_norm_g[s] = make_param<T>({cfg.channels(s + 1)}, T(1));
      down_norm_b[s] = make_param<T>({cfg.channels(s + 1)});
    }
  }
}

template <typename T>
Tensor<T> Backbone<T>::patch_embed(const Tensor<T>& image) const {
  if (image.rank() != 4 || image.dim(1) != cfg_.input_channels)
    throw DimensionError("patch_embed: expected [B," + std::to_string(cfg_.input_channels) + ",H,W], got " +
                         shape_str(image.shape()));
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0)
    throw ArgumentError("patch_embed: H and W must be divisible by 32, got " + shape_str(image.shape()));
  return channel_norm(conv2d(image, patch_w, patch_b, 4, 0), patch_norm_g, patch_norm_b);
}

template <typename T>
Tensor<T> Backbone<T>::stage_blocks(const Tensor<T>& x, std::size_t stage) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.channels(stage))
    throw DimensionError("vss_stage " + std::to_string(stage) + ": expected " +
                         std::to_string(cfg_.channels(stage)) + " channels, got " + shape_str(x.shape()));
  Tensor<T> y = x;
  for (const auto& blk : stages[stage]) y = blk.forward(y);
  return y;
}

template <typename T>
Tensor<T> Backbone<T>::downsample(const Tensor<T>& x, std::size_t stage) const {
  if (stage >= 3) throw ArgumentError("downsample: no downsample after the last stage");
  return channel_norm(conv2d(x, down_w[stage], down_b[stage], 2, 0), down_norm_g[stage], down_norm_b[stage]);
}

template <typename T>
Tensor<T> Backbone<T>::vss_stage(const Tensor<T>& x, std::size_t stage) const {
  auto y = stage_blocks(x, stage);
  return stage < 3 ? downsample(y, stage) : y;
}

template <typename T>
FeaturePyramid<T> Backbone<T>::extract_pyramid(const Tensor<T>& image) const {
  FeaturePyramid<T> pyr;
  auto x = patch_embed(image);
  for (std::size_t s = 0; s < 4; ++s) {
    x = stage_blocks(x, s);
    pyr.levels[s] = x;
    if (s < 3) x = downsample(x, s);
  }
  return pyr;
}

template <typename T>
void Backbone<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix, "patch.w", patch_w);
  add_param(out, prefix, "patch.b", patch_b);
  add_param(out, prefix, "patch.norm.g", patch_norm_g);
  add_param(out, prefix, "patch.norm.b", patch_norm_b);
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t d = 0; d < stages[s].size(); ++d)
      stages[s][d].collect(prefix + "stage" + std::to_string(s + 1) + ".block" + std::to_string(d) + ".", out);
    if (s < 3) {
      const std::string p = prefix + "down" + std::to_string(s + 1) + ".";
      add_param(out, p, "w", down_w[s]);
      add_param(out, p, "b", down_b[s]);
      add_param(out, p, "norm.g", down_norm_g[s]);
      add_param(out, p, "norm.b", down_norm_b[s]);
    }
  }
}

template struct VssBlock<float>;
template struct VssBlock<double>;
template class Backbone<float>;
template class Backbone<double>;
template Tensor<float> channel_norm(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> channel_norm(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template Tensor<float> conv_kernel_init(std::size_t, std::size_t, std::size_t, Rng&);
template Tensor<double> conv_kernel_init(std::size_t, std::size_t, std::size_t, Rng&);

}  // namespace mm
