#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mirrormamba/gradcheck.hpp"

namespace mm {

/// One differentiable operation prepared for gradient checking: build()
/// draws fresh random inputs (and module parameters) from a seed and returns
/// the function together with the tensors to differentiate against.
struct GradcheckCase {
  std::string name;
  std::function<std::pair<GradFn, std::vector<Tensor<double>>>(std::uint64_t seed)> build;
  std::size_t max_coords = 0;  // 0 = every coordinate
};

/// Every differentiable op and module, ending with the end-to-end model on
/// a tiny configuration at 32x32.
const std::vector<GradcheckCase>& gradcheck_registry();

struct GradcheckRun {
  std::string name;
  std::uint64_t seed = 0;
  GradcheckReport report;
};

/// Runs the cases whose name contains `filter` (all if empty) for seeds
/// first_seed .. first_seed+seeds-1.
std::vector<GradcheckRun> run_gradchecks(const std::string& filter, std::uint64_t first_seed, std::size_t seeds,
                                         double tol = 1e-4);

}  // namespace mm
