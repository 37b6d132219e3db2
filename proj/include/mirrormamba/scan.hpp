#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mirrormamba/module.hpp"
#include "mirrormamba/tensor.hpp"

namespace mm {

/// Traversal orders mapping an HxW grid to a sequence.
///   M1: rows top->bottom, each left->right
///   M2: rows top->bottom, each right->left
///   M3: columns left->right, each top->bottom
///   M4: columns left->right, each bottom->top
enum class ScanOrder { M1, M2, M3, M4 };

inline constexpr std::array<ScanOrder, 4> kAllScanOrders{ScanOrder::M1, ScanOrder::M2, ScanOrder::M3, ScanOrder::M4};

std::string to_string(ScanOrder order);

/// perm[t] is the row-major spatial index visited at step t.
std::vector<std::size_t> scan_permutation(ScanOrder order, std::size_t h, std::size_t w);
std::vector<std::size_t> inverse_permutation(std::span<const std::size_t> perm);

/// Grid extents seen in scan coordinates; M3/M4 swap H and W.
std::pair<std::size_t, std::size_t> oriented_extent(ScanOrder order, std::size_t h, std::size_t w);

/// [B,C,H,W] -> [B,H*W,C] in the given order.
template <typename T> Tensor<T> scan_flatten(const Tensor<T>& fmap, ScanOrder order);
/// [B,H*W,C] -> [B,C,H,W]; exact inverse of scan_flatten.
template <typename T> Tensor<T> scan_unflatten(const Tensor<T>& seq, ScanOrder order, std::size_t h, std::size_t w);

/// Re-lays a [B,C,H,W] map so that its row-major traversal is `order`.
template <typename T> Tensor<T> orient(const Tensor<T>& fmap, ScanOrder order);
/// Inverse of orient; (h, w) are the extents of the original map.
template <typename T> Tensor<T> unorient(const Tensor<T>& fmap, ScanOrder order, std::size_t h, std::size_t w);

/// The raw recurrence, per batch b, channel d and state n:
///   h_t = exp(delta_t A) * h_{t-1} + delta_t * B_t * x_t,   h_0 = 0
///   y_t = sum_n C_t h_t + D x_t
/// x, delta: [B,L,D]; A: [D,N]; Bm, Cm: [B,L,N]; d_skip: [D]. Sequential in
/// t, so runtime is linear in L. Backward keeps every h_t.
template <typename T>
Tensor<T> ssm_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& bm,
                   const Tensor<T>& cm, const Tensor<T>& d_skip);

/// Learned parameters of one selective scan over D channels with state N.
/// delta = softplus(dt_up (dt_down x) + dt_bias), B = b_proj x, C = c_proj x,
/// A = -exp(a_log).
template <typename T>
struct ScanParams {
  std::size_t d_model = 0;
  std::size_t d_state = 0;
  std::size_t dt_rank = 0;
  Tensor<T> dt_down;  // [R,D]
  Tensor<T> dt_up;    // [D,R]
  Tensor<T> dt_bias;  // [D]
  Tensor<T> b_proj;   // [N,D]
  Tensor<T> c_proj;   // [N,D]
  Tensor<T> a_log;    // [D,N]
  Tensor<T> d_skip;   // [D]

  /// A_log = log(1..N) per channel; dt_bias puts softplus output
  /// log-uniformly in [0.01, 0.1].
  static ScanParams init(std::size_t d_model, std::size_t d_state, Rng& rng);
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// x: [L,D] or [B,L,D].
template <typename T> Tensor<T> selective_scan_1d(const Tensor<T>& x, const ScanParams<T>& params);

/// Same recurrence as selective_scan_1d with delta and B taken from x_low,
/// but the read-out C taken from the guidance x_high.
template <typename T>
Tensor<T> cross_selective_scan(const Tensor<T>& x_low, const Tensor<T>& x_high, const ScanParams<T>& params);

/// Directional visual scan block:
///   LN -> linear expand -> depthwise 3x3 -> SiLU -> scan(order)
///      -> gate with SiLU(linear expand) -> linear back -> (+ input)
/// The depthwise convolution runs in the scan's own frame (see orient), so a
/// mirrored input under the mirrored order gives the mirrored output.
template <typename T>
struct ScanBlock {
  std::size_t channels = 0;
  std::size_t inner = 0;
  bool residual = true;
  Tensor<T> norm_g, norm_b;
  Tensor<T> in_x_w, in_x_b;  // [E,C], [E]
  Tensor<T> in_z_w, in_z_b;
  Tensor<T> conv_w, conv_b;  // [E,1,3,3], [E]
  ScanParams<T> ssm;
  Tensor<T> out_w, out_b;    // [C,E], [C]

  static ScanBlock init(std::size_t channels, std::size_t d_state, Rng& rng, bool residual = true,
                        std::size_t expand = 2);
  Tensor<T> forward(const Tensor<T>& x, ScanOrder order) const;
  /// Mean of forward(x, o) over the given orders, sharing every parameter.
  Tensor<T> forward_multi(const Tensor<T>& x, std::span<const ScanOrder> orders) const;
  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// scan_block as a free function for callers that think in operations.
template <typename T>
Tensor<T> scan_block(const Tensor<T>& fmap, ScanOrder order, const ScanBlock<T>& params) {
  return params.forward(fmap, order);
}

}  // namespace mm
