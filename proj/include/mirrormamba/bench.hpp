#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mm {

struct ScanBenchRow {
  std::size_t length = 0;
  double median_seconds = 0;
  double ratio = 0;  // median(L) / median(L/2)
};

struct ScanBenchOptions {
  std::size_t channels = 16;
  std::size_t d_state = 16;
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
};

/// Times a forward selective scan over [1, L, D] for each length and for
/// half of it, so every row carries its own doubling ratio.
std::vector<ScanBenchRow> bench_scan(const std::vector<std::size_t>& lengths, const ScanBenchOptions& opts = {});

std::string bench_csv(const std::vector<ScanBenchRow>& rows);

}  // namespace mm
