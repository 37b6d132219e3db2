#include "mirrormamba/scan.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>

#include "mirrormamba/ops.hpp"

namespace mm {

namespace {

// exp for the decay factor. The float path is a branch-free Cephes-style
// polynomial so the state loop vectorizes; relative error is ~1e-7.
template <typename T>
inline T decay_exp(T v);

template <>
inline double decay_exp<double>(double v) {
  return std::exp(v);
}

template <>
inline float decay_exp<float>(float v) {
  v = std::min(std::max(v, -80.0f), 80.0f);
  const float shifter = 12582912.0f;  // 1.5 * 2^23
  float kf = v * 1.44269504088896341f + shifter;
  const std::int32_t ki = std::bit_cast<std::int32_t>(kf) - 0x4B400000;
  kf -= shifter;
  float r = v - kf * 0.693359375f;
  r += kf * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float e = p * r * r + r + 1.0f;
  return std::bit_cast<float>(std::bit_cast<std::int32_t>(e) + (ki << 23));
}

std::shared_ptr<std::vector<std::size_t>> plane_table(std::size_t planes, std::span<const std::size_t> perm) {
  const std::size_t hw = perm.size();
  auto table = std::make_shared<std::vector<std::size_t>>(planes * hw);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t t = 0; t < hw; ++t) (*table)[p * hw + t] = p * hw + perm[t];
  return table;
}

void check_fmap(const Shape& s, const char* op) {
  if (s.size() != 4) throw DimensionError(std::string(op) + ": expected [B,C,H,W], got " + shape_str(s));
}

}  // namespace

std::string to_string(ScanOrder order) {
  switch (order) {
    case ScanOrder::M1: return "M1";
    case ScanOrder::M2: return "M2";
    case ScanOrder::M3: return "M3";
    case ScanOrder::M4: return "M4";
  }
  return "?";
}

std::vector<std::size_t> scan_permutation(ScanOrder order, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw ArgumentError("scan_permutation: grid must be non-empty");
  std::vector<std::size_t> perm;
  perm.reserve(h * w);
  switch (order) {
    case ScanOrder::M1:
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) perm.push_back(i * w + j);
      break;
    case ScanOrder::M2:
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = w; j-- > 0;) perm.push_back(i * w + j);
      break;
    case ScanOrder::M3:
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t i = 0; i < h; ++i) perm.push_back(i * w + j);
      break;
    case ScanOrder::M4:
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t i = h; i-- > 0;) perm.push_back(i * w + j);
      break;
  }
  return perm;
}

std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t t = 0; t < perm.size(); ++t) inv[perm[t]] = t;
  return inv;
}

std::pair<std::size_t, std::size_t> oriented_extent(ScanOrder order, std::size_t h, std::size_t w) {
  return (order == ScanOrder::M3 || order == ScanOrder::M4) ? std::pair{w, h} : std::pair{h, w};
}

template <typename T>
Tensor<T> scan_flatten(const Tensor<T>& fmap, ScanOrder order) {
  check_fmap(fmap.shape(), "scan_flatten");
  const std::size_t b = fmap.dim(0), c = fmap.dim(1), h = fmap.dim(2), w = fmap.dim(3), hw = h * w;
  const auto perm = scan_permutation(order, h, w);
  auto table = std::make_shared<std::vector<std::size_t>>(b * hw * c);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t t = 0; t < hw; ++t)
      for (std::size_t ch = 0; ch < c; ++ch) (*table)[(n * hw + t) * c + ch] = (n * c + ch) * hw + perm[t];
  return gather<T>(fmap, Shape{b, hw, c}, std::move(table));
}

template <typename T>
Tensor<T> scan_unflatten(const Tensor<T>& seq, ScanOrder order, std::size_t h, std::size_t w) {
  if (seq.rank() != 3 || seq.dim(1) != h * w)
    throw DimensionError("scan_unflatten: expected [B," + std::to_string(h * w) + ",C], got " +
                         shape_str(seq.shape()));
  const std::size_t b = seq.dim(0), c = seq.dim(2), hw = h * w;
  const auto inv = inverse_permutation(scan_permutation(order, h, w));
  auto table = std::make_shared<std::vector<std::size_t>>(b * c * hw);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t s = 0; s < hw; ++s) (*table)[(n * c + ch) * hw + s] = (n * hw + inv[s]) * c + ch;
  return gather<T>(seq, Shape{b, c, h, w}, std::move(table));
}

template <typename T>
Tensor<T> orient(const Tensor<T>& fmap, ScanOrder order) {
  check_fmap(fmap.shape(), "orient");
  if (order == ScanOrder::M1) return fmap;
  const std::size_t h = fmap.dim(2), w = fmap.dim(3);
  const auto perm = scan_permutation(order, h, w);
  const auto [oh, ow] = oriented_extent(order, h, w);
  return gather<T>(fmap, Shape{fmap.dim(0), fmap.dim(1), oh, ow}, plane_table(fmap.dim(0) * fmap.dim(1), perm));
}

template <typename T>
Tensor<T> unorient(const Tensor<T>& fmap, ScanOrder order, std::size_t h, std::size_t w) {
  check_fmap(fmap.shape(), "unorient");
  if (order == ScanOrder::M1) return fmap;
  const auto [oh, ow] = oriented_extent(order, h, w);
  if (fmap.dim(2) != oh || fmap.dim(3) != ow) throw DimensionError("unorient: extent mismatch");
  const auto inv = inverse_permutation(scan_permutation(order, h, w));
  return gather<T>(fmap, Shape{fmap.dim(0), fmap.dim(1), h, w}, plane_table(fmap.dim(0) * fmap.dim(1), inv));
}

template <typename T>
Tensor<T> ssm_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& bm,
                   const Tensor<T>& cm, const Tensor<T>& d_skip) {
  if (x.rank() != 3) throw DimensionError("ssm_scan: x must be [B,L,D], got " + shape_str(x.shape()));
  const std::size_t nb = x.dim(0), len = x.dim(1), nd = x.dim(2);
  if (a.rank() != 2 || a.dim(0) != nd) throw DimensionError("ssm_scan: A must be [D,N], got " + shape_str(a.shape()));
  const std::size_t ns = a.dim(1);
  if (delta.shape() != x.shape()) throw DimensionError("ssm_scan: delta shape " + shape_str(delta.shape()));
  const Shape bc_shape{nb, len, ns};
  if (bm.shape() != bc_shape || cm.shape() != bc_shape)
    throw DimensionError("ssm_scan: B/C must be " + shape_str(bc_shape) + ", got " + shape_str(bm.shape()) +
                         " / " + shape_str(cm.shape()));
  if (d_skip.numel() != nd) throw DimensionError("ssm_scan: D must have " + std::to_string(nd) + " entries");

  const T* xv = x.vec().data();
  const T* dv = delta.vec().data();
  const T* av = a.vec().data();
  const T* bv = bm.vec().data();
  const T* cv = cm.vec().data();
  const T* sv = d_skip.vec().data();

  const std::size_t state = nd * ns;
  const bool record = Tape<T>::active() != nullptr;
  auto hs = std::make_shared<std::vector<T>>(record ? nb * len * state : 0);
  std::vector<T> y(nb * len * nd);
  std::vector<T> h(state);
  for (std::size_t b = 0; b < nb; ++b) {
    std::fill(h.begin(), h.end(), T(0));
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t row = (b * len + t);
      const T* bt = bv + row * ns;
      const T* ct = cv + row * ns;
      for (std::size_t d = 0; d < nd; ++d) {
        const T dt = dv[row * nd + d];
        const T xin = xv[row * nd + d];
        const T dtx = dt * xin;
        T* hd = h.data() + d * ns;
        const T* ad = av + d * ns;
        T acc = 0;
#pragma omp simd reduction(+ : acc)
        for (std::size_t n = 0; n < ns; ++n) {
          const T hn = decay_exp<T>(dt * ad[n]) * hd[n] + dtx * bt[n];
          hd[n] = hn;
          acc += ct[n] * hn;
        }
        y[row * nd + d] = acc + sv[d] * xin;
      }
      if (record) std::memcpy(hs->data() + row * state, h.data(), state * sizeof(T));
    }
  }

  return detail::make_result<T>(
      x.shape(), std::move(y), {x, delta, a, bm, cm, d_skip},
      [=](Node<T>& out) {
        const T* xv2 = out.inputs[0]->data.data();
        const T* dv2 = out.inputs[1]->data.data();
        const T* av2 = out.inputs[2]->data.data();
        const T* bv2 = out.inputs[3]->data.data();
        const T* cv2 = out.inputs[4]->data.data();
        const T* sv2 = out.inputs[5]->data.data();
        std::vector<T> gx(nb * len * nd, T(0)), gdelta(nb * len * nd, T(0)), ga(state, T(0));
        std::vector<T> gb(nb * len * ns, T(0)), gc(nb * len * ns, T(0)), gs(nd, T(0));
        std::vector<T> gh(state);
        const T* gy = out.grad.data();
        for (std::size_t b = 0; b < nb; ++b) {
          std::fill(gh.begin(), gh.end(), T(0));
          for (std::size_t t = len; t-- > 0;) {
            const std::size_t row = b * len + t;
            const T* ht = hs->data() + row * state;
            const T* hp = t > 0 ? hs->data() + (row - 1) * state : nullptr;
            const T* bt = bv2 + row * ns;
            const T* ct = cv2 + row * ns;
            T* gbt = gb.data() + row * ns;
            T* gct = gc.data() + row * ns;
            for (std::size_t d = 0; d < nd; ++d) {
              const T g = gy[row * nd + d];
              const T dt = dv2[row * nd + d];
              const T xin = xv2[row * nd + d];
              gs[d] += g * xin;
              T* ghd = gh.data() + d * ns;
              T* gad = ga.data() + d * ns;
              const T* ad = av2 + d * ns;
              const T* htd = ht + d * ns;
              T gdt = 0, gxs = 0;
#pragma omp simd reduction(+ : gdt, gxs)
              for (std::size_t n = 0; n < ns; ++n) {
                const T hprev = hp ? hp[d * ns + n] : T(0);
                const T gtot = ghd[n] + g * ct[n];
                gct[n] += g * htd[n];
                const T decay = decay_exp<T>(dt * ad[n]);
                const T gdecay = gtot * hprev * decay;
                gdt += gdecay * ad[n] + gtot * bt[n] * xin;
                gad[n] += gdecay * dt;
                gbt[n] += gtot * dt * xin;
                gxs += gtot * bt[n];
                ghd[n] = gtot * decay;
              }
              gdelta[row * nd + d] += gdt;
              gx[row * nd + d] += g * sv2[d] + gxs * dt;
            }
          }
        }
        auto accumulate = [&](std::size_t k, const std::vector<T>& src) {
          if (!out.inputs[k]->requires_grad) return;
          auto& dst = out.inputs[k]->grad;
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        };
        accumulate(0, gx);
        accumulate(1, gdelta);
        accumulate(2, ga);
        accumulate(3, gb);
        accumulate(4, gc);
        accumulate(5, gs);
      },
      "ssm_scan");
}

template <typename T>
ScanParams<T> ScanParams<T>::init(std::size_t d_model, std::size_t d_state, Rng& rng) {
  ScanParams p;
  p.d_model = d_model;
  p.d_state = d_state;
  p.dt_rank = std::max<std::size_t>(1, (d_model + 15) / 16);
  p.dt_down = trunc_normal<T>({p.dt_rank, d_model}, 0.02, rng);
  p.dt_up = trunc_normal<T>({d_model, p.dt_rank}, 0.02, rng);
  p.dt_bias = make_param<T>({d_model});
  std::uniform_real_distribution<double> u(std::log(0.01), std::log(0.1));
  for (auto& v : p.dt_bias.vec()) {
    const double dt = std::exp(u(rng));
    v = T(dt + std::log(-std::expm1(-dt)));
  }
  p.b_proj = trunc_normal<T>({d_state, d_model}, 0.02, rng);
  p.c_proj = trunc_normal<T>({d_state, d_model}, 0.02, rng);
  p.a_log = make_param<T>({d_model, d_state});
  for (std::size_t d = 0; d < d_model; ++d)
    for (std::size_t n = 0; n < d_state; ++n) p.a_log[d * d_state + n] = T(std::log(double(n + 1)));
  p.d_skip = make_param<T>({d_model}, T(1));
  return p;
}

template <typename T>
void ScanParams<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  add_param(out, prefix, "dt_down", dt_down);
  add_param(out, prefix, "dt_up", dt_up);
  add_param(out, prefix, "dt_bias", dt_bias);
  add_param(out, prefix, "b_proj", b_proj);
  add_param(out, prefix, "c_proj", c_proj);
  add_param(out, prefix, "a_log", a_log);
  add_param(out, prefix, "d_skip", d_skip);
}

namespace {

template <typename T>
Tensor<T> as_batched(const Tensor<T>& x, std::size_t d_model, const char* op) {
  if (x.rank() == 2) return reshape(x, Shape{1, x.dim(0), x.dim(1)});
  if (x.rank() != 3) throw DimensionError(std::string(op) + ": expected [L,D] or [B,L,D], got " + shape_str(x.shape()));
  if (x.dim(2) != d_model)
    throw DimensionError(std::string(op) + ": input width " + std::to_string(x.dim(2)) + " but params expect " +
                         std::to_string(d_model));
  return x;
}

template <typename T>
Tensor<T> scan_core(const Tensor<T>& x_low, const Tensor<T>& x_high, const ScanParams<T>& p) {
  const Tensor<T> none;
  auto delta = softplus(linear(linear(x_low, p.dt_down, none), p.dt_up, p.dt_bias));
  auto bm = linear(x_low, p.b_proj, none);
  auto cm = linear(x_high, p.c_proj, none);
  auto a = scale(exp(p.a_log), T(-1));
  return ssm_scan(x_low, delta, a, bm, cm, p.d_skip);
}

}  // namespace

template <typename T>
Tensor<T> selective_scan_1d(const Tensor<T>& x, const ScanParams<T>& params) {
  if (x.rank() == 2 && x.dim(1) != params.d_model)
    throw DimensionError("selective_scan_1d: input width does not match params");
  auto xb = as_batched(x, params.d_model, "selective_scan_1d");
  auto y = scan_core(xb, xb, params);
  return x.rank() == 2 ? reshape(y, x.shape()) : y;
}

template <typename T>
Tensor<T> cross_selective_scan(const Tensor<T>& x_low, const Tensor<T>& x_high, const ScanParams<T>& params) {
  if (x_low.shape() != x_high.shape())
    throw DimensionError("cross_selective_scan: " + shape_str(x_low.shape()) + " vs " + shape_str(x_high.shape()));
  if (x_low.rank() == 2 && x_low.dim(1) != params.d_model)
    throw DimensionError("cross_selective_scan: input width does not match params");
  auto lo = as_batched(x_low, params.d_model, "cross_selective_scan");
  auto hi = as_batched(x_high, params.d_model, "cross_selective_scan");
  auto y = scan_core(lo, hi, params);
  return x_low.rank() == 2 ? reshape(y, x_low.shape()) : y;
}

template <typename T>
ScanBlock<T> ScanBlock<T>::init(std::size_t channels, std::size_t d_state, Rng& rng, bool residual,
                                std::size_t expand) {
  ScanBlock s;
  s.channels = channels;
  s.inner = channels * expand;
  s.residual = residual;
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
  s.out_w = make_param<T>({channels, e});
  s.out_b = make_param<T>({channels});
  return s;
}

template <typename T>
Tensor<T> ScanBlock<T>::forward(const Tensor<T>& x, ScanOrder order) const {
  check_fmap(x.shape(), "scan_block");
  if (x.dim(1) != channels)
    throw DimensionError("scan_block: input has " + std::to_string(x.dim(1)) + " channels, block expects " +
                         std::to_string(channels));
  const std::size_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const auto [oh, ow] = oriented_extent(order, h, w);
  auto o = orient(x, order);
  auto n = layer_norm(to_channels_last(o), norm_g, norm_b);
  auto xi = linear(n, in_x_w, in_x_b);
  auto z = linear(n, in_z_w, in_z_b);
  auto xc = silu(depthwise_conv2d(to_channels_first(xi), conv_w, conv_b, 1));
  auto seq = reshape(to_channels_last(xc), Shape{b, oh * ow, inner});
  auto y = reshape(selective_scan_1d(seq, ssm), Shape{b, oh, ow, inner});
  auto out = to_channels_first(linear(mul(y, silu(z)), out_w, out_b));
  auto r = unorient(out, order, h, w);
  return residual ? add(x, r) : r;
}

template <typename T>
Tensor<T> ScanBlock<T>::forward_multi(const Tensor<T>& x, std::span<const ScanOrder> orders) const {
  check_fmap(x.shape(), "scan_block");
  if (orders.empty()) throw ArgumentError("scan_block: no scan orders given");
  if (x.dim(1) != channels) throw DimensionError("scan_block: channel mismatch");
  const std::size_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  auto n = layer_norm(to_channels_last(x), norm_g, norm_b);
  auto xi = to_channels_first(linear(n, in_x_w, in_x_b));
  auto z = linear(n, in_z_w, in_z_b);
  Tensor<T> acc;
  for (auto order : orders) {
    const auto [oh, ow] = oriented_extent(order, h, w);
    auto xc = silu(depthwise_conv2d(orient(xi, order), conv_w, conv_b, 1));
    auto seq = reshape(to_channels_last(xc), Shape{b, oh * ow, inner});
    auto y = to_channels_first(reshape(selective_scan_1d(seq, ssm), Shape{b, oh, ow, inner}));
    auto yb = unorient(y, order, h, w);
    acc = acc.defined() ? add(acc, yb) : yb;
  }
  if (orders.size() > 1) acc = scale(acc, T(1) / T(orders.size()));
  auto out = to_channels_first(linear(mul(to_channels_last(acc), silu(z)), out_w, out_b));
  return residual ? add(x, out) : out;
}

template <typename T>
void ScanBlock<T>::collect(const std::string& prefix, ParamList<T>& out) const {
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

#define MM_INSTANTIATE_SCAN(T)                                                                                  \
  template Tensor<T> scan_flatten(const Tensor<T>&, ScanOrder);                                                \
  template Tensor<T> scan_unflatten(const Tensor<T>&, ScanOrder, std::size_t, std::size_t);                    \
  template Tensor<T> orient(const Tensor<T>&, ScanOrder);                                                      \
  template Tensor<T> unorient(const Tensor<T>&, ScanOrder, std::size_t, std::size_t);                          \
  template Tensor<T> ssm_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                              const Tensor<T>&, const Tensor<T>&);                                             \
  template struct ScanParams<T>;                                                                               \
  template Tensor<T> selective_scan_1d(const Tensor<T>&, const ScanParams<T>&);                                \
  template Tensor<T> cross_selective_scan(const Tensor<T>&, const Tensor<T>&, const ScanParams<T>&);           \
  template struct ScanBlock<T>;

MM_INSTANTIATE_SCAN(float)
MM_INSTANTIATE_SCAN(double)

}  // namespace mm
