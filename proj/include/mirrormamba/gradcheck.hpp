#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mirrormamba/tensor.hpp"

namespace mm {

struct GradcheckReport {
  double max_abs_err = 0;
  double max_rel_err = 0;
  std::size_t coords_checked = 0;
  bool pass = false;
};

struct GradcheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Denominator floor for the relative error, so coordinates whose true
  // gradient is ~0 are judged on absolute error.
  double rel_floor = 1e-6;
  // 0 checks every coordinate; otherwise a seeded random subset per input.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  // 2: (f(x+e) - f(x-e)) / 2e. 4: the five-point stencil
  // (-f(x+2e) + 8f(x+e) - 8f(x-e) + f(x-2e)) / 12e, whose O(e^4) truncation
  // error allows a larger eps and so far less cancellation noise.
  int stencil = 2;
};

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

/// Compares reverse-mode gradients with central differences for every
/// checked input coordinate.
/// Non-scalar outputs are reduced with a fixed random weighting first, so
/// every output element contributes.
GradcheckReport gradcheck(const GradFn& fn, std::vector<Tensor<double>> inputs, const GradcheckOptions& opts = {});

}  // namespace mm
