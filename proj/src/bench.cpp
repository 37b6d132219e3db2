#include "mirrormamba/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <map>
#include <random>

#include "mirrormamba/scan.hpp"

namespace mm {

std::vector<ScanBenchRow> bench_scan(const std::vector<std::size_t>& lengths, const ScanBenchOptions& opts) {
  if (opts.repeats == 0) throw ArgumentError("bench: repeats must be positive");
  Rng rng(opts.seed);
  const auto params = ScanParams<float>::init(opts.channels, opts.d_state, rng);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::map<std::size_t, double> medians;
  auto time_length = [&](std::size_t l) {
    if (auto it = medians.find(l); it != medians.end()) return it->second;
    Tensor<float> x({1, l, opts.channels});
    for (auto& v : x.vec()) v = n(rng);
    NoGradScope<float> off;
    (void)selective_scan_1d(x, params);  // warm-up
    std::vector<double> t;
    for (std::size_t r = 0; r < opts.repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto y = selective_scan_1d(x, params);
      t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    std::nth_element(t.begin(), t.begin() + std::ptrdiff_t(t.size() / 2), t.end());
    return medians[l] = t[t.size() / 2];
  };
  std::vector<ScanBenchRow> rows;
  for (auto l : lengths) {
    if (l < 2) throw ArgumentError("bench: lengths must be at least 2");
    const double half = time_length(l / 2), full = time_length(l);
    rows.push_back({l, full, full / half});
  }
  return rows;
}

std::string bench_csv(const std::vector<ScanBenchRow>& rows) {
  std::string out = "length,median_seconds,ratio_vs_half\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.6e,%.4f\n", r.length, r.median_seconds, r.ratio);
    out += buf;
  }
  return out;
}

}  // namespace mm
