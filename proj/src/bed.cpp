#include "mirrormamba/bed.hpp"

#include <algorithm>

#include "mirrormamba/backbone.hpp"
#include "mirrormamba/ops.hpp"

namespace mm {

template <typename T>
ChannelAttention<T> ChannelAttention<T>::init(std::size_t channels, Rng& rng) {
  ChannelAttention a;
  a.channels = channels;
  const std::size_t hidden = std::max<std::size_t>(1, channels / 4);
  a.fc1_w = trunc_normal<T>({hidden, channels}, 0.02, rng);
  a.fc1_b = make_param<T>({hidden});
  a.fc2_w = trunc_normal<T>({channels, hidden}, 0.02, rng);
  a.fc2_b = make_param<T>({channels});
  return a;
}

template <typename T>
Tensor<T> ChannelAttention<T>::weights(const Tensor<T>& context) const {
  auto s = global_avg_pool(context);
  return sigmoid(linear(silu(linear(s, fc1_w, fc1_b)), fc2_w, fc2_b));
}

template <typename T>
Tensor<T> ChannelAttention<T>::forward(const Tensor<T>& x, const Tensor<T>& context) const {
  if (x.shape() != context.shape())
    throw DimensionError("cross_channel_attention: " + shape_str(x.shape()) + " vs " + shape_str(context.shape()));
  return scale_channels(x, weights(context));
}

template <typename T>
void ChannelAttention<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix, "fc1.w", fc1_w);
  add_param(out, prefix, "fc1.b", fc1_b);
  add_param(out, prefix, "fc2.w", fc2_w);
  add_param(out, prefix, "fc2.b", fc2_b);
}

template <typename T>
CrossScanBlock<T> CrossScanBlock<T>::init(std::size_t channels, std::size_t d_state, Rng& rng, std::size_t expand) {
  CrossScanBlock s;
  s.channels = channels;
  s.inner = channels * expand;
  const std::size_t e = s.inner;
  s.norm_g = make_param<T>({channels}, T(1));
  s.norm_b = make_param<T>({channels});
  s.in_x_w = trunc_normal<T>({e, channels}, 0.02, rng);
  s.in_x_b = make_param<T>({e});
  s.in_z_w = trunc_normal<T>({e, channels}, 0.02, rng);
  s.in_z_b = make_param<T>({e});
  s.conv_w = make_param<T>({e, 1, 3, 3});
  std::uniform_real_distribution<double> u(-1.0 / 3.0, 1.0 / 3.0);
  for (auto& v : s.conv_w.vec()) v = T(u(rng));
  s.conv_b = make_param<T>({e});
  s.ssm = ScanParams<T>::init(e, d_state, rng);
  s.out_w = trunc_normal<T>({channels, e}, 0.02, rng);
  s.out_b = make_param<T>({channels});
  return s;
}

template <typename T>
Tensor<T> CrossScanBlock<T>::forward(const Tensor<T>& x_low, const Tensor<T>& x_high) const {
  if (x_low.shape() != x_high.shape())
    throw DimensionError("cross scan block: " + shape_str(x_low.shape()) + " vs " + shape_str(x_high.shape()));
  if (x_low.rank() != 4 || x_low.dim(1) != channels)
    throw DimensionError("cross scan block: expected " + std::to_string(channels) + " channels, got " +
                         shape_str(x_low.shape()));
  const std::size_t b = x_low.dim(0), h = x_low.dim(2), w = x_low.dim(3);
  auto prep = [&](const Tensor<T>& x, Tensor<T>* gate) {
    auto n = layer_norm(to_channels_last(x), norm_g, norm_b);
    if (gate) *gate = linear(n, in_z_w, in_z_b);
    auto c = silu(depthwise_conv2d(to_channels_first(linear(n, in_x_w, in_x_b)), conv_w, conv_b, 1));
    return reshape(to_channels_last(c), Shape{b, h * w, inner});
  };
  Tensor<T> z;
  auto lo = prep(x_low, &z);
  auto hi = prep(x_high, nullptr);
  auto y = reshape(cross_selective_scan(lo, hi, ssm), Shape{b, h, w, inner});
  return to_channels_first(linear(mul(y, silu(z)), out_w, out_b));
}

template <typename T>
void CrossScanBlock<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix, "norm.g", norm_g);
  add_param(out, prefix, "norm.b", norm_b);
  add_param(out, prefix, "in_x.w", in_x_w);
  add_param(out, prefix, "in_x.b", in_x_b);
  add_param(out, prefix, "in_z.w", in_z_w);
  add_param(out, prefix, "in_z.b", in_z_b);
  add_param(out, prefix, "conv.w", conv_w);
  add_param(out, prefix, "conv.b", conv_b);
  ssm.collect(prefix + "ssm.", out);
  add_param(out, prefix, "out.w", out_w);
  add_param(out, prefix, "out.b", out_b);
}

template <typename T>
BedLevel<T> BedLevel<T>::init(std::size_t channels, std::size_t next_channels, std::size_t d_state, Rng& rng,
                              bool enabled) {
  BedLevel l;
  l.channels = channels;
  l.next_channels = next_channels;
  l.enabled = enabled;
  if (enabled) {
    l.cs = CrossScanBlock<T>::init(channels, d_state, rng);
    l.ss = ScanBlock<T>::init(channels, d_state, rng, false);
    // A zero read-out in a chained branch would leave both scans without
    // gradient, so the inner scan starts small instead of zero.
    l.ss.out_w = trunc_normal<T>({channels, l.ss.inner}, 0.02, rng);
    l.cc = ChannelAttention<T>::init(channels, rng);
  }
  if (next_channels) {
    l.expand_w = conv_kernel_init<T>(next_channels, channels, 1, rng);
    l.expand_b = make_param<T>({next_channels});
  }
  l.head_w = conv_kernel_init<T>(1, channels, 1, rng);
  l.head_b = make_param<T>({1});
  return l;
}

template <typename T>
Tensor<T> BedLevel<T>::refine(const Tensor<T>& f_out, const Tensor<T>& f_final) const {
  if (f_out.shape() != f_final.shape())
    throw DimensionError("bed_refine: F_out " + shape_str(f_out.shape()) + " vs F_final " +
                         shape_str(f_final.shape()));
  if (!enabled) return add(f_out, f_final);
  auto cs_out = cs.forward(f_out, f_final);
  auto ss_out = ss.forward(cs_out, ScanOrder::M1);
  return add(f_out, cc.forward(ss_out, f_out));
}

template <typename T>
Tensor<T> BedLevel<T>::expand_and_merge(const Tensor<T>& f_final, const Tensor<T>& f_out) const {
  if (!next_channels) throw ArgumentError("expand_and_merge: finest level has no next level");
  if (f_final.shape() != f_out.shape()) throw DimensionError("expand_and_merge: operand shapes differ");
  auto up = bilinear_resize(add(f_final, f_out), 2 * f_out.dim(2), 2 * f_out.dim(3));
  return conv2d(up, expand_w, expand_b, 1, 0);
}

template <typename T>
Tensor<T> BedLevel<T>::prediction_head(const Tensor<T>& f_final) const {
  return conv2d(f_final, head_w, head_b, 1, 0);
}

template <typename T>
void BedLevel<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  if (enabled) {
    cs.collect(prefix + "cs.", out);
    ss.collect(prefix + "ss.", out);
    cc.collect(prefix + "cc.", out);
  }
  if (next_channels) {
    add_param(out, prefix, "expand.w", expand_w);
    add_param(out, prefix, "expand.b", expand_b);
  }
  add_param(out, prefix, "head.w", head_w);
  add_param(out, prefix, "head.b", head_b);
}

template struct ChannelAttention<float>;
template struct ChannelAttention<double>;
template struct CrossScanBlock<float>;
template struct CrossScanBlock<double>;
template struct BedLevel<float>;
template struct BedLevel<double>;

}  // namespace mm
