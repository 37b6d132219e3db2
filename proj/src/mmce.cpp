#include "mirrormamba/mmce.hpp"

#include "mirrormamba/backbone.hpp"
#include "mirrormamba/ops.hpp"

namespace mm {

template <typename T>
Tensor<T> fuse_concat(const std::vector<Tensor<T>>& features) {
  if (features.size() < 2 || features.size() > 3)
    throw ArgumentError("fuse_concat: expected 2 or 3 modalities, got " + std::to_string(features.size()));
  for (const auto& f : features)
    if (f.shape() != features[0].shape())
      throw DimensionError("fuse_concat: modality shapes differ, " + shape_str(f.shape()) + " vs " +
                           shape_str(features[0].shape()));
  return concat(features, 1);
}

template <typename T>
Tensor<T> directional_attention(const Tensor<T>& f, const ScanBlock<T>& first, ScanOrder order_a,
                                const ScanBlock<T>& second, ScanOrder order_b, const Tensor<T>& conv_w,
                                const Tensor<T>& conv_b) {
  auto pair = concat(std::vector<Tensor<T>>{first.forward(f, order_a), second.forward(f, order_b)}, 1);
  return sigmoid(conv2d(pair, conv_w, conv_b, 1, 1));
}

template <typename T>
MmceLevel<T> MmceLevel<T>::init(std::size_t channels, std::size_t modalities, std::size_t d_state, Rng& rng,
                                bool enabled, GateTarget gate, ScanDirections directions) {
  if (modalities < 2 || modalities > 3) throw ArgumentError("mmce: modalities must be 2 or 3");
  MmceLevel m;
  m.channels = channels;
  m.modalities = modalities;
  m.enabled = enabled;
  m.gate = gate;
  m.directions = directions;
  const std::size_t kc = modalities * channels;
  m.t_w = conv_kernel_init<T>(channels, kc, 3, rng);
  m.t_b = make_param<T>({channels});
  if (!enabled) return m;
  m.f1_w = conv_kernel_init<T>(channels, kc, 3, rng);
  m.f1_b = make_param<T>({channels});
  m.m1 = ScanBlock<T>::init(channels, d_state, rng);
  m.m2 = ScanBlock<T>::init(channels, d_state, rng);
  m.m3 = ScanBlock<T>::init(channels, d_state, rng);
  m.m4 = ScanBlock<T>::init(channels, d_state, rng);
  m.wh_w = conv_kernel_init<T>(channels, 2 * channels, 3, rng);
  m.wh_b = make_param<T>({channels});
  m.wv_w = conv_kernel_init<T>(channels, 2 * channels, 3, rng);
  m.wv_b = make_param<T>({channels});
  return m;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> MmceLevel<T>::compress(const Tensor<T>& f_concat) const {
  if (f_concat.rank() != 4 || f_concat.dim(1) != modalities * channels)
    throw DimensionError("mmce compress: expected " + std::to_string(modalities * channels) + " channels, got " +
                         shape_str(f_concat.shape()));
  auto t = conv2d(f_concat, t_w, t_b, 1, 1);
  if (!enabled) return {t, Tensor<T>()};
  return {t, conv2d(f_concat, f1_w, f1_b, 1, 1)};
}

template <typename T>
Tensor<T> MmceLevel<T>::horizontal_attention(const Tensor<T>& f) const {
  if (directions == ScanDirections::kVerticalOnly)
    return directional_attention(f, m1, ScanOrder::M3, m2, ScanOrder::M4, wh_w, wh_b);
  return directional_attention(f, m1, ScanOrder::M1, m2, ScanOrder::M2, wh_w, wh_b);
}

template <typename T>
Tensor<T> MmceLevel<T>::vertical_attention(const Tensor<T>& f) const {
  if (directions == ScanDirections::kHorizontalOnly)
    return directional_attention(f, m3, ScanOrder::M1, m4, ScanOrder::M2, wv_w, wv_b);
  return directional_attention(f, m3, ScanOrder::M3, m4, ScanOrder::M4, wv_w, wv_b);
}

template <typename T>
MmceLevelState<T> MmceLevel<T>::forward_state(const std::vector<Tensor<T>>& features,
                                              const MmceGateOverride<T>& hooks) const {
  if (features.size() != modalities)
    throw ArgumentError("mmce: level built for " + std::to_string(modalities) + " modalities, got " +
                        std::to_string(features.size()));
  MmceLevelState<T> s;
  s.f_concat = fuse_concat(features);
  std::tie(s.t, s.f1) = compress(s.f_concat);
  if (!enabled) {
    s.f_out = s.t;
    return s;
  }
  s.w_horiz = hooks.w_horiz ? Tensor<T>(s.t.shape(), *hooks.w_horiz) : horizontal_attention(s.f1);
  s.f2 = mul(s.w_horiz, s.t);
  s.w_vert = hooks.w_vert ? Tensor<T>(s.t.shape(), *hooks.w_vert) : vertical_attention(s.f2);
  s.f_out = mul(s.w_vert, gate == GateTarget::kT ? s.t : s.f2);
  return s;
}

template <typename T>
void MmceLevel<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix, "t.w", t_w);
  add_param(out, prefix, "t.b", t_b);
  if (!enabled) return;
  add_param(out, prefix, "f1.w", f1_w);
  add_param(out, prefix, "f1.b", f1_b);
  m1.collect(prefix + "m1.", out);
  m2.collect(prefix + "m2.", out);
  m3.collect(prefix + "m3.", out);
  m4.collect(prefix + "m4.", out);
  add_param(out, prefix, "wh.w", wh_w);
  add_param(out, prefix, "wh.b", wh_b);
  add_param(out, prefix, "wv.w", wv_w);
  add_param(out, prefix, "wv.b", wv_b);
}

template struct MmceLevel<float>;
template struct MmceLevel<double>;
template Tensor<float> fuse_concat(const std::vector<Tensor<float>>&);
template Tensor<double> fuse_concat(const std::vector<Tensor<double>>&);
template Tensor<float> directional_attention(const Tensor<float>&, const ScanBlock<float>&, ScanOrder,
                                             const ScanBlock<float>&, ScanOrder, const Tensor<float>&,
                                             const Tensor<float>&);
template Tensor<double> directional_attention(const Tensor<double>&, const ScanBlock<double>&, ScanOrder,
                                              const ScanBlock<double>&, ScanOrder, const Tensor<double>&,
                                              const Tensor<double>&);

}  // namespace mm
