#pragma once

#include <span>
#include <vector>

#include <json.hpp>

namespace mm {

inline constexpr double kDefaultThreshold = 0.5;
inline constexpr double kFBetaSquared = 0.3;

/// Threshold used to binarize a prediction. Adaptive uses twice the mean
/// prediction (capped at 1), a common convention in salient-object work.
struct Binarize {
  double threshold = kDefaultThreshold;
  bool adaptive = false;

  double resolve(std::span<const float> pred) const;
};

struct PixelCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

PixelCounts count_pixels(std::span<const float> pred, std::span<const float> gt, double threshold);

// pred holds probabilities, gt holds {0,1}; mismatched sizes throw.
double iou(std::span<const float> pred, std::span<const float> gt, const Binarize& bin = {});
double f_beta(std::span<const float> pred, std::span<const float> gt, double beta_sq = kFBetaSquared,
              const Binarize& bin = {});
double mae(std::span<const float> pred, std::span<const float> gt);
double accuracy(std::span<const float> pred, std::span<const float> gt, const Binarize& bin = {});

struct SampleMetrics {
  double iou = 0, f_beta = 0, mae = 0, accuracy = 0;
};

SampleMetrics evaluate_sample(std::span<const float> pred, std::span<const float> gt, const Binarize& bin = {});

struct EvalResult {
  double iou = 0, f_beta = 0, mae = 0, accuracy = 0;
  std::vector<SampleMetrics> per_sample;
};

/// Unweighted mean of the per-sample values.
EvalResult aggregate(std::vector<SampleMetrics> per_sample);

nlohmann::json to_json(const EvalResult& r, bool with_samples = false);

/// Aligned plain-text table with IoU, F-beta, MAE and Accuracy columns.
std::string format_table(const std::vector<std::pair<std::string, EvalResult>>& rows);

}  // namespace mm
