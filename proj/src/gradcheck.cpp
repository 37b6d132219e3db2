#include "mirrormamba/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mirrormamba/ops.hpp"

namespace mm {

namespace {

Tensor<double> reduce(const Tensor<double>& out, std::vector<double>& weights, std::uint64_t seed) {
  if (out.numel() == 1) return out;
  if (weights.size() != out.numel()) {
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    weights.resize(out.numel());
    for (auto& w : weights) w = u(rng) * (rng() & 1 ? 1.0 : -1.0);
  }
  return sum(mul(out, Tensor<double>(out.shape(), weights)));
}

}  // namespace

GradcheckReport gradcheck(const GradFn& fn, std::vector<Tensor<double>> inputs, const GradcheckOptions& opts) {
  if (!(opts.eps > 0)) throw ArgumentError("gradcheck: eps must be positive");
  if (opts.stencil != 2 && opts.stencil != 4) throw ArgumentError("gradcheck: stencil must be 2 or 4");
  std::vector<double> weights;
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = reduce(fn(inputs), weights, opts.seed);
    tape.backward(loss);
  }

  auto eval = [&]() {
    NoGradScope<double> off;
    return reduce(fn(inputs), weights, opts.seed).item();
  };

  GradcheckReport rep;
  std::mt19937_64 rng(opts.seed);
  for (auto& in : inputs) {
    const std::vector<double> analytic(in.grad().begin(), in.grad().end());
    std::vector<std::size_t> coords(in.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.max_coords_per_input && coords.size() > opts.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_input);
    }
    auto& data = in.vec();
    for (auto i : coords) {
      const double saved = data[i];
      auto at = [&](double offset) {
        data[i] = saved + offset;
        return eval();
      };
      const double h = opts.eps;
      double numeric;
      if (opts.stencil == 2) {
        numeric = (at(h) - at(-h)) / (2 * h);
      } else {
        numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
      }
      data[i] = saved;
      const double a = analytic[i];
      const double abs_err = std::abs(a - numeric);
      const double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), opts.rel_floor});
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      rep.max_rel_err = std::max(rep.max_rel_err, rel_err);
      ++rep.coords_checked;
    }
  }
  rep.pass = rep.max_rel_err < opts.tol;
  return rep;
}

}  // namespace mm
