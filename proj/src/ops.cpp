#include "mirrormamba/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace mm {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
std::vector<T>* in_grad(Node<T>& out, std::size_t k) {
  auto& in = out.inputs[k];
  return in->requires_grad ? &in->grad : nullptr;
}

template <typename T>
const std::vector<T>& in_data(Node<T>& out, std::size_t k) {
  return out.inputs[k]->data;
}

// Number of times b repeats inside a: 1 for equal shapes, B when b lacks
// only the leading batch axis.
template <typename T>
std::size_t broadcast_reps(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return 1;
  if (a.rank() == b.rank() + 1 && std::equal(b.shape().begin(), b.shape().end(), a.shape().begin() + 1))
    return a.shape()[0];
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                       " do not conform");
}

template <typename T, typename F, typename G>
Tensor<T> unary(const Tensor<T>& a, F f, G df, const char* name) {
  const auto& x = a.vec();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return detail::make_result<T>(
      a.shape(), std::move(y), {a},
      [df](Node<T>& out) {
        const auto& xin = in_data(out, 0);
        auto& gx = *in_grad(out, 0);
        for (std::size_t i = 0; i < xin.size(); ++i) gx[i] += out.grad[i] * df(xin[i], out.data[i]);
      },
      name);
}

template <typename T>
T sigmoid_scalar(T v) {
  return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
T softplus_scalar(T v) {
  return v > T(20) ? v : std::log1p(std::exp(v));
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Source index table for a general axis permutation.
std::shared_ptr<std::vector<std::size_t>> permute_table(const Shape& in, const std::vector<std::size_t>& axes,
                                                        Shape& out) {
  out.resize(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) out[i] = in[axes[i]];
  auto in_st = strides_of(in);
  std::vector<std::size_t> src_st(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) src_st[i] = in_st[axes[i]];
  auto table = std::make_shared<std::vector<std::size_t>>(shape_numel(in));
  std::vector<std::size_t> idx(out.size(), 0);
  for (std::size_t o = 0; o < table->size(); ++o) {
    std::size_t src = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) src += idx[k] * src_st[k];
    (*table)[o] = src;
    for (std::size_t k = idx.size(); k-- > 0;) {
      if (++idx[k] < out[k]) break;
      idx[k] = 0;
    }
  }
  return table;
}

struct ResizeAxis {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_hi;
};

ResizeAxis resize_axis(std::size_t in, std::size_t out) {
  ResizeAxis r;
  r.lo.resize(out);
  r.hi.resize(out);
  r.w_hi.resize(out);
  const double ratio = double(in) / double(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (double(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, double(in - 1));
    auto lo = std::size_t(std::floor(src));
    lo = std::min(lo, in - 1);
    r.lo[o] = lo;
    r.hi[o] = std::min(lo + 1, in - 1);
    r.w_hi[o] = src - double(lo);
  }
  return r;
}

template <typename T>
void im2col(const T* x, std::size_t c_in, std::size_t h, std::size_t w, std::size_t k, int stride, int pad,
            std::size_t ho, std::size_t wo, T* cols) {
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = long(oy) * stride - pad + long(ki);
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= long(h)) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (c * h + std::size_t(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = long(ox) * stride - pad + long(kj);
            dst[ox] = (ix < 0 || ix >= long(w)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, std::size_t c_in, std::size_t h, std::size_t w, std::size_t k, int stride, int pad,
            std::size_t ho, std::size_t wo, T* gx) {
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = long(oy) * stride - pad + long(ki);
          if (iy < 0 || iy >= long(h)) continue;
          T* dst = gx + (c * h + std::size_t(iy)) * w;
          const T* src = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = long(ox) * stride - pad + long(kj);
            if (ix >= 0 && ix < long(w)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t reps = broadcast_reps(a, b, "add");
  const std::size_t n = b.numel();
  std::vector<T> y(a.vec());
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] += b[i];
  return detail::make_result<T>(
      a.shape(), std::move(y), {a, b},
      [reps, n](Node<T>& out) {
        if (auto* ga = in_grad(out, 0))
          for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i];
        if (auto* gb = in_grad(out, 1))
          for (std::size_t r = 0; r < reps; ++r)
            for (std::size_t i = 0; i < n; ++i) (*gb)[i] += out.grad[r * n + i];
      },
      "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t reps = broadcast_reps(a, b, "sub");
  const std::size_t n = b.numel();
  std::vector<T> y(a.vec());
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] -= b[i];
  return detail::make_result<T>(
      a.shape(), std::move(y), {a, b},
      [reps, n](Node<T>& out) {
        if (auto* ga = in_grad(out, 0))
          for (std::size_t i = 0; i < out.grad.size(); ++i) (*ga)[i] += out.grad[i];
        if (auto* gb = in_grad(out, 1))
          for (std::size_t r = 0; r < reps; ++r)
            for (std::size_t i = 0; i < n; ++i) (*gb)[i] -= out.grad[r * n + i];
      },
      "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t reps = broadcast_reps(a, b, "mul");
  const std::size_t n = b.numel();
  std::vector<T> y(a.vec());
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t i = 0; i < n; ++i) y[r * n + i] *= b[i];
  return detail::make_result<T>(
      a.shape(), std::move(y), {a, b},
      [reps, n](Node<T>& out) {
        const auto& av = in_data(out, 0);
        const auto& bv = in_data(out, 1);
        auto* ga = in_grad(out, 0);
        auto* gb = in_grad(out, 1);
        for (std::size_t r = 0; r < reps; ++r)
          for (std::size_t i = 0; i < n; ++i) {
            const T g = out.grad[r * n + i];
            if (ga) (*ga)[r * n + i] += g * bv[i];
            if (gb) (*gb)[i] += g * av[r * n + i];
          }
      },
      "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(
      a, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; }, "scale");
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary(
      a, [](T v) { return std::exp(v); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(
      a, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); }, "sigmoid");
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return unary(
      a, [](T v) { return v * sigmoid_scalar(v); },
      [](T x, T) {
        const T s = sigmoid_scalar(x);
        return s * (T(1) + x * (T(1) - s));
      },
      "silu");
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return unary(
      a, [](T v) { return softplus_scalar(v); }, [](T x, T) { return sigmoid_scalar(x); }, "softplus");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.vec()) s += v;
  return detail::make_result<T>(
      Shape{1}, std::vector<T>{s}, {a},
      [](Node<T>& out) {
        auto& ga = *in_grad(out, 0);
        const T g = out.grad[0];
        for (auto& v : ga) v += g;
      },
      "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / T(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return detail::make_result<T>(
      std::move(shape), a.vec(), {a},
      [](Node<T>& out) {
        auto& ga = *in_grad(out, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += out.grad[i];
      },
      "reshape");
}

template <typename T>
Tensor<T> gather(const Tensor<T>& a, Shape out_shape, std::shared_ptr<const std::vector<std::size_t>> source) {
  if (shape_numel(out_shape) != source->size())
    throw DimensionError("gather: index table size does not match " + shape_str(out_shape));
  const auto& x = a.vec();
  std::vector<T> y(source->size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t s = (*source)[i];
    if (s >= x.size()) throw DimensionError("gather: source index out of range");
    y[i] = x[s];
  }
  return detail::make_result<T>(
      std::move(out_shape), std::move(y), {a},
      [source](Node<T>& out) {
        auto& ga = *in_grad(out, 0);
        for (std::size_t i = 0; i < out.grad.size(); ++i) ga[(*source)[i]] += out.grad[i];
      },
      "gather");
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  if (axes.size() != a.rank()) throw DimensionError("permute: axis list length does not match rank");
  std::vector<char> seen(axes.size(), 0);
  for (auto ax : axes) {
    if (ax >= axes.size() || seen[ax]) throw ArgumentError("permute: axes are not a permutation");
    seen[ax] = 1;
  }
  Shape out;
  auto table = permute_table(a.shape(), axes, out);
  return gather<T>(a, std::move(out), std::move(table));
}

template <typename T>
Tensor<T> flip(const Tensor<T>& a, std::size_t axis) {
  const auto& s = a.shape();
  if (axis >= s.size()) throw DimensionError("flip: axis out of range");
  auto st = strides_of(s);
  const std::size_t n = s[axis];
  auto table = std::make_shared<std::vector<std::size_t>>(a.numel());
  for (std::size_t i = 0; i < table->size(); ++i) {
    const std::size_t k = (i / st[axis]) % n;
    (*table)[i] = i + (n - 1 - 2 * k) * st[axis];
  }
  return gather<T>(a, s, std::move(table));
}

template <typename T>
Tensor<T> to_channels_last(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("to_channels_last expects [B,C,H,W], got " + shape_str(x.shape()));
  return permute(x, {0, 2, 3, 1});
}

template <typename T>
Tensor<T> to_channels_first(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("to_channels_first expects [B,H,W,C], got " + shape_str(x.shape()));
  return permute(x, {0, 3, 1, 2});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range");
  Shape out = s0;
  out[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t k = 0; k < s0.size(); ++k)
      if (k != axis && p.shape()[k] != s0[k])
        throw DimensionError("concat: " + shape_str(p.shape()) + " does not conform to " + shape_str(s0));
    out[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= s0[k];
  for (std::size_t k = axis + 1; k < s0.size(); ++k) inner *= s0[k];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[axis] * inner);
  const std::size_t row = out[axis] * inner;
  std::vector<T> y(outer * row);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& src = parts[p].vec();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + o * widths[p], widths[p], y.begin() + o * row + off);
    off += widths[p];
  }
  return detail::make_result<T>(
      std::move(out), std::move(y), parts,
      [widths, outer, row](Node<T>& node) {
        std::size_t off2 = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
          if (auto* g = in_grad(node, p))
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < widths[p]; ++i) (*g)[o * widths[p] + i] += node.grad[o * row + off2 + i];
          off2 += widths[p];
        }
      },
      "concat");
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& a, const std::vector<std::size_t>& sizes, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw DimensionError("split: axis out of range");
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t(0)) != s[axis])
    throw DimensionError("split: sizes do not sum to extent " + std::to_string(s[axis]));
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= s[k];
  for (std::size_t k = axis + 1; k < s.size(); ++k) inner *= s[k];
  const std::size_t row = s[axis] * inner;
  std::vector<Tensor<T>> result;
  std::size_t off = 0;
  for (auto sz : sizes) {
    Shape ps = s;
    ps[axis] = sz;
    const std::size_t width = sz * inner;
    std::vector<T> y(outer * width);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(a.vec().begin() + o * row + off, width, y.begin() + o * width);
    result.push_back(detail::make_result<T>(
        std::move(ps), std::move(y), {a},
        [outer, row, off, width](Node<T>& node) {
          auto& g = *in_grad(node, 0);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < width; ++i) g[o * row + off + i] += node.grad[o * width + i];
        },
        "split"));
    off += width;
  }
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("layer_norm: affine width does not match last axis of " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / c;
  const auto& xv = x.vec();
  std::vector<T> y(xv.size());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * c;
    T mu = 0;
    for (std::size_t i = 0; i < c; ++i) mu += xr[i];
    mu /= T(c);
    T var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= T(c);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < c; ++i) {
      const T h = (xr[i] - mu) * rs;
      (*xhat)[r * c + i] = h;
      y[r * c + i] = h * gamma[i] + beta[i];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(y), {x, gamma, beta},
      [c, rows, xhat, rstd](Node<T>& out) {
        const auto& gam = in_data(out, 1);
        auto* gx = in_grad(out, 0);
        auto* gg = in_grad(out, 1);
        auto* gb = in_grad(out, 2);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* go = out.grad.data() + r * c;
          const T* h = xhat->data() + r * c;
          T s1 = 0, s2 = 0;
          for (std::size_t i = 0; i < c; ++i) {
            const T gh = go[i] * gam[i];
            s1 += gh;
            s2 += gh * h[i];
            if (gg) (*gg)[i] += go[i] * h[i];
            if (gb) (*gb)[i] += go[i];
          }
          if (gx) {
            const T rs = (*rstd)[r];
            for (std::size_t i = 0; i < c; ++i)
              (*gx)[r * c + i] += rs * (go[i] * gam[i] - (s1 + h[i] * s2) / T(c));
          }
        }
      },
      "layer_norm");
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) throw DimensionError("linear: weight must be [out,in]");
  const std::size_t in = weight.dim(1), outf = weight.dim(0);
  if (x.shape().back() != in)
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != outf) throw DimensionError("linear: bias width mismatch");
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  std::vector<T> y(rows * outf);
  {
    CMapMat<T> X(x.vec().data(), rows, in);
    CMapMat<T> W(weight.vec().data(), outf, in);
    MapMat<T> Y(y.data(), rows, outf);
    Y.noalias() = X * W.transpose();
    if (has_bias)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < outf; ++o) y[r * outf + o] += bias[o];
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result<T>(
      std::move(out_shape), std::move(y), inputs,
      [rows, in, outf, has_bias](Node<T>& out) {
        CMapMat<T> G(out.grad.data(), rows, outf);
        if (auto* gx = in_grad(out, 0)) {
          CMapMat<T> W(in_data(out, 1).data(), outf, in);
          MapMat<T> GX(gx->data(), rows, in);
          GX.noalias() += G * W;
        }
        if (auto* gw = in_grad(out, 1)) {
          CMapMat<T> X(in_data(out, 0).data(), rows, in);
          MapMat<T> GW(gw->data(), outf, in);
          GW.noalias() += G.transpose() * X;
        }
        if (has_bias)
          if (auto* gb = in_grad(out, 2))
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t o = 0; o < outf; ++o) (*gb)[o] += out.grad[r * outf + o];
      },
      "linear");
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, int stride, int padding) {
  if (stride <= 0) throw ArgumentError("conv2d: stride must be positive, got " + std::to_string(stride));
  if (padding < 0) throw ArgumentError("conv2d: padding must be non-negative");
  if (x.rank() != 4) throw DimensionError("conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
  if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3))
    throw DimensionError("conv2d: kernel must be [Cout,Cin,k,k], got " + shape_str(kernel.shape()));
  const std::size_t b = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t c_out = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != c_in)
    throw DimensionError("conv2d: input has " + std::to_string(c_in) + " channels, kernel expects " +
                         std::to_string(kernel.dim(1)));
  if (long(h) + 2 * padding < long(k) || long(w) + 2 * padding < long(k))
    throw DimensionError("conv2d: kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != c_out) throw DimensionError("conv2d: bias width mismatch");
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  const std::size_t kk = c_in * k * k, hw = ho * wo;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);

  std::vector<T> y(b * c_out * hw);
  std::vector<T> cols(pointwise ? 0 : kk * hw);
  CMapMat<T> K(kernel.vec().data(), c_out, kk);
  for (std::size_t n = 0; n < b; ++n) {
    const T* xn = x.vec().data() + n * c_in * h * w;
    const T* cp = xn;
    if (!pointwise) {
      im2col(xn, c_in, h, w, k, stride, padding, ho, wo, cols.data());
      cp = cols.data();
    }
    MapMat<T> Y(y.data() + n * c_out * hw, c_out, hw);
    Y.noalias() = K * CMapMat<T>(cp, kk, hw);
    if (has_bias)
      for (std::size_t o = 0; o < c_out; ++o) Y.row(o).array() += bias[o];
  }
  std::vector<Tensor<T>> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result<T>(
      Shape{b, c_out, ho, wo}, std::move(y), inputs,
      [=](Node<T>& out) {
        auto* gx = in_grad(out, 0);
        auto* gk = in_grad(out, 1);
        auto* gb = has_bias ? in_grad(out, 2) : nullptr;
        const auto& xv = in_data(out, 0);
        CMapMat<T> Kb(in_data(out, 1).data(), c_out, kk);
        std::vector<T> buf(pointwise ? 0 : kk * hw);
        std::vector<T> gcols(pointwise ? 0 : kk * hw);
        for (std::size_t n = 0; n < b; ++n) {
          CMapMat<T> G(out.grad.data() + n * c_out * hw, c_out, hw);
          const T* xn = xv.data() + n * c_in * h * w;
          if (gk) {
            const T* cp = xn;
            if (!pointwise) {
              im2col(xn, c_in, h, w, k, stride, padding, ho, wo, buf.data());
              cp = buf.data();
            }
            MapMat<T> GK(gk->data(), c_out, kk);
            GK.noalias() += G * CMapMat<T>(cp, kk, hw).transpose();
          }
          if (gx) {
            T* gxn = gx->data() + n * c_in * h * w;
            if (pointwise) {
              MapMat<T> GX(gxn, c_in, hw);
              GX.noalias() += Kb.transpose() * G;
            } else {
              MapMat<T> GC(gcols.data(), kk, hw);
              GC.noalias() = Kb.transpose() * G;
              col2im(gcols.data(), c_in, h, w, k, stride, padding, ho, wo, gxn);
            }
          }
          // A plain loop: Eigen's vectorized sum peels by address, which
          // would make the result depend on where the heap put the buffer.
          if (gb)
            for (std::size_t o = 0; o < c_out; ++o) {
              const T* g = out.grad.data() + (n * c_out + o) * hw;
              T acc = 0;
              for (std::size_t i = 0; i < hw; ++i) acc += g[i];
              (*gb)[o] += acc;
            }
        }
      },
      "conv2d");
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, int padding) {
  if (x.rank() != 4) throw DimensionError("depthwise_conv2d: input must be [B,C,H,W]");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel.rank() != 4 || kernel.dim(0) != c || kernel.dim(1) != 1 || kernel.dim(2) != kernel.dim(3))
    throw DimensionError("depthwise_conv2d: kernel must be [C,1,k,k], got " + shape_str(kernel.shape()));
  const std::size_t k = kernel.dim(2);
  if (padding < 0 || long(h) + 2 * padding < long(k) || long(w) + 2 * padding < long(k))
    throw DimensionError("depthwise_conv2d: kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != c) throw DimensionError("depthwise_conv2d: bias width mismatch");
  const std::size_t ho = h + 2 * padding - k + 1, wo = w + 2 * padding - k + 1;
  std::vector<T> y(b * c * ho * wo);
  const auto& xv = x.vec();
  const auto& kv = kernel.vec();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* xp = xv.data() + (n * c + ch) * h * w;
      const T* kp = kv.data() + ch * k * k;
      T* yp = y.data() + (n * c + ch) * ho * wo;
      const T b0 = has_bias ? bias[ch] : T(0);
      std::fill(yp, yp + ho * wo, b0);
      for (std::size_t ki = 0; ki < k; ++ki)
        for (std::size_t kj = 0; kj < k; ++kj) {
          const T kw = kp[ki * k + kj];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = long(oy) - padding + long(ki);
            if (iy < 0 || iy >= long(h)) continue;
            const long lo = std::max(0L, long(padding) - long(kj));
            const long hi = std::min(long(wo), long(w) + padding - long(kj));
            const T* xr = xp + iy * w - padding + long(kj);
            T* yr = yp + oy * wo;
            for (long ox = lo; ox < hi; ++ox) yr[ox] += kw * xr[ox];
          }
        }
    }
  std::vector<Tensor<T>> inputs{x, kernel};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result<T>(
      Shape{b, c, ho, wo}, std::move(y), inputs,
      [=](Node<T>& out) {
        auto* gx = in_grad(out, 0);
        auto* gk = in_grad(out, 1);
        auto* gb = has_bias ? in_grad(out, 2) : nullptr;
        const auto& xv2 = in_data(out, 0);
        const auto& kv2 = in_data(out, 1);
        for (std::size_t n = 0; n < b; ++n)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T* xp = xv2.data() + (n * c + ch) * h * w;
            const T* gy = out.grad.data() + (n * c + ch) * ho * wo;
            if (gb)
              for (std::size_t i = 0; i < ho * wo; ++i) (*gb)[ch] += gy[i];
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const T kw = kv2[ch * k * k + ki * k + kj];
                T acc = 0;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const long iy = long(oy) - padding + long(ki);
                  if (iy < 0 || iy >= long(h)) continue;
                  const long lo = std::max(0L, long(padding) - long(kj));
                  const long hi = std::min(long(wo), long(w) + padding - long(kj));
                  const long base = iy * long(w) - padding + long(kj);
                  const T* gr = gy + oy * wo;
                  if (gx) {
                    T* gxr = gx->data() + (n * c + ch) * h * w + base;
                    for (long ox = lo; ox < hi; ++ox) gxr[ox] += kw * gr[ox];
                  }
                  const T* xr = xp + base;
                  for (long ox = lo; ox < hi; ++ox) acc += gr[ox] * xr[ox];
                }
                if (gk) (*gk)[ch * k * k + ki * k + kj] += acc;
              }
          }
      },
      "depthwise_conv2d");
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool: input must be [B,C,H,W]");
  const std::size_t bc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> y(bc);
  for (std::size_t i = 0; i < bc; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < hw; ++j) s += x[i * hw + j];
    y[i] = s / T(hw);
  }
  return detail::make_result<T>(
      Shape{x.dim(0), x.dim(1)}, std::move(y), {x},
      [bc, hw](Node<T>& out) {
        auto& g = *in_grad(out, 0);
        for (std::size_t i = 0; i < bc; ++i)
          for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += out.grad[i] / T(hw);
      },
      "global_avg_pool");
}

template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() != 4 || w.rank() != 2 || w.dim(0) != x.dim(0) || w.dim(1) != x.dim(1))
    throw DimensionError("scale_channels: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const std::size_t bc = w.numel(), hw = x.dim(2) * x.dim(3);
  std::vector<T> y(x.vec());
  for (std::size_t i = 0; i < bc; ++i)
    for (std::size_t j = 0; j < hw; ++j) y[i * hw + j] *= w[i];
  return detail::make_result<T>(
      x.shape(), std::move(y), {x, w},
      [bc, hw](Node<T>& out) {
        const auto& xv = in_data(out, 0);
        const auto& wv = in_data(out, 1);
        auto* gx = in_grad(out, 0);
        auto* gw = in_grad(out, 1);
        for (std::size_t i = 0; i < bc; ++i) {
          T acc = 0;
          for (std::size_t j = 0; j < hw; ++j) {
            const T g = out.grad[i * hw + j];
            if (gx) (*gx)[i * hw + j] += g * wv[i];
            acc += g * xv[i * hw + j];
          }
          if (gw) (*gw)[i] += acc;
        }
      },
      "scale_channels");
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw DimensionError("bilinear_resize: input must be [B,C,H,W]");
  if (out_h < 1 || out_w < 1) throw ArgumentError("bilinear_resize: output size must be positive");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == h && out_w == w) return reshape(x, x.shape());
  auto ry = std::make_shared<ResizeAxis>(resize_axis(h, out_h));
  auto rx = std::make_shared<ResizeAxis>(resize_axis(w, out_w));
  std::vector<T> y(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = x.vec().data() + p * h * w;
    T* yp = y.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T wy = T(ry->w_hi[oy]);
      const T* r0 = xp + ry->lo[oy] * w;
      const T* r1 = xp + ry->hi[oy] * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T wx = T(rx->w_hi[ox]);
        const std::size_t x0 = rx->lo[ox], x1 = rx->hi[ox];
        const T top = r0[x0] * (T(1) - wx) + r0[x1] * wx;
        const T bot = r1[x0] * (T(1) - wx) + r1[x1] * wx;
        yp[oy * out_w + ox] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  Shape out_shape{x.dim(0), x.dim(1), out_h, out_w};
  return detail::make_result<T>(
      std::move(out_shape), std::move(y), {x},
      [=](Node<T>& out) {
        auto& g = *in_grad(out, 0);
        for (std::size_t p = 0; p < planes; ++p) {
          T* gp = g.data() + p * h * w;
          const T* go = out.grad.data() + p * out_h * out_w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const T wy = T(ry->w_hi[oy]);
            T* r0 = gp + ry->lo[oy] * w;
            T* r1 = gp + ry->hi[oy] * w;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const T wx = T(rx->w_hi[ox]);
              const std::size_t x0 = rx->lo[ox], x1 = rx->hi[ox];
              const T v = go[oy * out_w + ox];
              r0[x0] += v * (T(1) - wy) * (T(1) - wx);
              r0[x1] += v * (T(1) - wy) * wx;
              r1[x0] += v * wy * (T(1) - wx);
              r1[x1] += v * wy * wx;
            }
          }
        }
      },
      "bilinear_resize");
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target) {
  if (logits.shape() != target.shape())
    throw DimensionError("bce_with_logits: " + shape_str(logits.shape()) + " vs " + shape_str(target.shape()));
  for (T t : target.vec())
    if (!(t >= T(0) && t <= T(1))) throw ArgumentError("bce_with_logits: target outside [0,1]");
  const std::size_t n = logits.numel();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits[i], t = target[i];
    acc += std::max(z, T(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  auto tgt = target.vec();
  return detail::make_result<T>(
      Shape{1}, std::vector<T>{acc / T(n)}, {logits},
      [tgt = std::move(tgt), n](Node<T>& out) {
        auto& g = *in_grad(out, 0);
        const auto& z = in_data(out, 0);
        const T s = out.grad[0] / T(n);
        for (std::size_t i = 0; i < n; ++i) g[i] += s * (sigmoid_scalar(z[i]) - tgt[i]);
      },
      "bce_with_logits");
}

#define MM_INSTANTIATE_OPS(T)                                                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                                               \
  template Tensor<T> exp(const Tensor<T>&);                                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                \
  template Tensor<T> silu(const Tensor<T>&);                                                                   \
  template Tensor<T> softplus(const Tensor<T>&);                                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                         \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                               \
  template Tensor<T> flip(const Tensor<T>&, std::size_t);                                                      \
  template Tensor<T> gather(const Tensor<T>&, Shape, std::shared_ptr<const std::vector<std::size_t>>);         \
  template Tensor<T> to_channels_last(const Tensor<T>&);                                                       \
  template Tensor<T> to_channels_first(const Tensor<T>&);                                                      \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                       \
  template std::vector<Tensor<T>> split(const Tensor<T>&, const std::vector<std::size_t>&, std::size_t);       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);                   \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int);              \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                        \
  template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> bilinear_resize(const Tensor<T>&, std::size_t, std::size_t);                              \
  template Tensor<T> bce_with_logits(const Tensor<T>&, const Tensor<T>&);

MM_INSTANTIATE_OPS(float)
MM_INSTANTIATE_OPS(double)

}  // namespace mm
