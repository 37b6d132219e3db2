#include "mirrormamba/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <string>

#include "mirrormamba/tensor.hpp"

namespace mm {

double Binarize::resolve(std::span<const float> pred) const {
  if (!adaptive) return threshold;
  if (pred.empty()) return threshold;
  const double m = std::accumulate(pred.begin(), pred.end(), 0.0) / double(pred.size());
  return std::min(2.0 * m, 1.0);
}

PixelCounts count_pixels(std::span<const float> pred, std::span<const float> gt, double threshold) {
  if (pred.size() != gt.size())
    throw DimensionError("metrics: prediction has " + std::to_string(pred.size()) + " pixels, mask has " +
                         std::to_string(gt.size()));
  PixelCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= threshold, g = gt[i] > 0.5f;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double iou(std::span<const float> pred, std::span<const float> gt, const Binarize& bin) {
  const auto c = count_pixels(pred, gt, bin.resolve(pred));
  const std::size_t uni = c.tp + c.fp + c.fn;
  return uni == 0 ? 1.0 : double(c.tp) / double(uni);
}

double f_beta(std::span<const float> pred, std::span<const float> gt, double beta_sq, const Binarize& bin) {
  const auto c = count_pixels(pred, gt, bin.resolve(pred));
  if (c.tp == 0) return 0.0;
  const double p = double(c.tp) / double(c.tp + c.fp), r = double(c.tp) / double(c.tp + c.fn);
  return (1.0 + beta_sq) * p * r / (beta_sq * p + r);
}

double mae(std::span<const float> pred, std::span<const float> gt) {
  if (pred.size() != gt.size()) throw DimensionError("mae: size mismatch");
  if (pred.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(double(pred[i]) - double(gt[i]));
  return s / double(pred.size());
}

double accuracy(std::span<const float> pred, std::span<const float> gt, const Binarize& bin) {
  const auto c = count_pixels(pred, gt, bin.resolve(pred));
  const std::size_t n = c.tp + c.fp + c.fn + c.tn;
  return n == 0 ? 1.0 : double(c.tp + c.tn) / double(n);
}

SampleMetrics evaluate_sample(std::span<const float> pred, std::span<const float> gt, const Binarize& bin) {
  return {iou(pred, gt, bin), f_beta(pred, gt, kFBetaSquared, bin), mae(pred, gt), accuracy(pred, gt, bin)};
}

EvalResult aggregate(std::vector<SampleMetrics> per_sample) {
  EvalResult r;
  for (const auto& s : per_sample) {
    r.iou += s.iou;
    r.f_beta += s.f_beta;
    r.mae += s.mae;
    r.accuracy += s.accuracy;
  }
  if (!per_sample.empty()) {
    const double n = double(per_sample.size());
    r.iou /= n;
    r.f_beta /= n;
    r.mae /= n;
    r.accuracy /= n;
  }
  r.per_sample = std::move(per_sample);
  return r;
}

nlohmann::json to_json(const EvalResult& r, bool with_samples) {
  nlohmann::json j{{"iou", r.iou}, {"f_beta", r.f_beta}, {"mae", r.mae}, {"accuracy", r.accuracy},
                   {"samples", r.per_sample.size()}};
  if (with_samples) {
    auto arr = nlohmann::json::array();
    for (const auto& s : r.per_sample)
      arr.push_back({{"iou", s.iou}, {"f_beta", s.f_beta}, {"mae", s.mae}, {"accuracy", s.accuracy}});
    j["per_sample"] = arr;
  }
  return j;
}

std::string format_table(const std::vector<std::pair<std::string, EvalResult>>& rows) {
  std::size_t name_w = 7;
  for (const auto& [name, r] : rows) name_w = std::max(name_w, name.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %8s  %8s  %8s  %9s\n", int(name_w), "variant", "IoU^", "Fb^", "MAE_",
                "Accuracy^");
  out += buf;
  out += std::string(name_w + 43, '-') + "\n";
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %8.4f  %8.4f  %8.4f  %9.4f\n", int(name_w), name.c_str(), r.iou,
                  r.f_beta, r.mae, r.accuracy);
    out += buf;
  }
  return out;
}

}  // namespace mm
