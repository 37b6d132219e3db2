#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mirrormamba/module.hpp"
#include "mirrormamba/scan.hpp"

namespace mm {

/// Which map the vertical attention gates at the end of the extractor.
/// kT follows the printed formulation (F_out = W_vert * T); kF2 gates the
/// horizontally-enhanced F2 instead.
enum class GateTarget { kT, kF2 };

/// Scan orders used by the two attention stages.
enum class ScanDirections {
  kHorizontalVertical,  // (M1,M2) then (M3,M4)
  kHorizontalOnly,      // (M1,M2) twice
  kVerticalOnly,        // (M3,M4) twice
};

/// Every intermediate of one extractor level.
template <typename T>
struct MmceLevelState {
  Tensor<T> f_concat, t, f1, w_horiz, f2, w_vert, f_out;
};

/// Test hook: replaces an attention map by a constant.
template <typename T>
struct MmceGateOverride {
  std::optional<T> w_horiz;
  std::optional<T> w_vert;
};

/// Channel concatenation of 2 (rgb, depth) or 3 (rgb, depth, flow) maps.
template <typename T>
Tensor<T> fuse_concat(const std::vector<Tensor<T>>& features);

/// Multi-direction correspondence extractor for one pyramid level.
template <typename T>
struct MmceLevel {
  std::size_t channels = 0;
  std::size_t modalities = 0;
  bool enabled = true;
  GateTarget gate = GateTarget::kT;
  ScanDirections directions = ScanDirections::kHorizontalVertical;

  Tensor<T> t_w, t_b;    // [C,kC,3,3]
  Tensor<T> f1_w, f1_b;  // [C,kC,3,3]
  ScanBlock<T> m1, m2, m3, m4;
  Tensor<T> wh_w, wh_b;  // [C,2C,3,3]
  Tensor<T> wv_w, wv_b;

  /// With enabled = false only the T compression exists and F_out = T.
  static MmceLevel init(std::size_t channels, std::size_t modalities, std::size_t d_state, Rng& rng,
                        bool enabled = true, GateTarget gate = GateTarget::kT,
                        ScanDirections directions = ScanDirections::kHorizontalVertical);

  /// Two independent 3x3 convolutions kC -> C: (T, F1).
  std::pair<Tensor<T>, Tensor<T>> compress(const Tensor<T>& f_concat) const;
  /// First-stage attention map, sigmoid(conv([Ma(F), Mb(F)])).
  Tensor<T> horizontal_attention(const Tensor<T>& f) const;
  /// Second-stage attention map.
  Tensor<T> vertical_attention(const Tensor<T>& f) const;

  MmceLevelState<T> forward_state(const std::vector<Tensor<T>>& features,
                                  const MmceGateOverride<T>& hooks = {}) const;
  Tensor<T> forward(const std::vector<Tensor<T>>& features) const { return forward_state(features).f_out; }

  void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// sigmoid(conv3x3([first(F, order_a), second(F, order_b)])).
template <typename T>
Tensor<T> directional_attention(const Tensor<T>& f, const ScanBlock<T>& first, ScanOrder order_a,
                                const ScanBlock<T>& second, ScanOrder order_b, const Tensor<T>& conv_w,
                                const Tensor<T>& conv_b);

}  // namespace mm
