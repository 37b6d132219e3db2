#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mirrormamba/tensor.hpp"

namespace mm {

using Rng = std::mt19937_64;

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
};

/// Flat, ordered view of a model's parameters. Names are stable and double
/// as checkpoint keys.
template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
Tensor<T> make_param(Shape shape, T fill = T(0)) {
  Tensor<T> t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

/// Normal(0, std) resampled until inside +-2 std.
template <typename T>
Tensor<T> trunc_normal(Shape shape, double std, Rng& rng) {
  Tensor<T> t = make_param<T>(std::move(shape));
  std::normal_distribution<double> dist(0.0, std);
  for (auto& v : t.vec()) {
    double s;
    do s = dist(rng);
    while (std::abs(s) > 2 * std);
    v = T(s);
  }
  return t;
}

template <typename T>
void add_param(ParamList<T>& out, const std::string& prefix, const char* name, const Tensor<T>& t) {
  out.push_back({prefix + name, t});
}

template <typename T>
std::size_t param_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.numel();
  return n;
}

/// splitmix64 finalizer, used to derive independent seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace mm
