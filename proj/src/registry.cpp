#include "mirrormamba/registry.hpp"

#include <random>

#include "mirrormamba/bed.hpp"
#include "mirrormamba/backbone.hpp"
#include "mirrormamba/mmce.hpp"
#include "mirrormamba/model.hpp"
#include "mirrormamba/ops.hpp"
#include "mirrormamba/scan.hpp"
#include "mirrormamba/trainer.hpp"

namespace mm {

namespace {

using D = double;
using Inputs = std::vector<Tensor<D>>;
using Built = std::pair<GradFn, Inputs>;

Tensor<D> rnd(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<D> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

// Zero-initialized projections would make whole branches gradient-free, so
// module parameters are perturbed in place (the returned handles share
// storage with the module) before checking.
Inputs jittered(const ParamList<D>& params, Rng& rng, double sigma = 0.2) {
  std::normal_distribution<double> n(0.0, sigma);
  Inputs out;
  for (const auto& p : params) {
    auto t = p.value;
    for (auto& v : t.vec()) v += n(rng);
    out.push_back(t);
  }
  return out;
}

void append(Inputs& dst, const Inputs& src) { dst.insert(dst.end(), src.begin(), src.end()); }

GradcheckCase unary(std::string name, Tensor<D> (*op)(const Tensor<D>&), Shape shape = {2, 3, 4}) {
  return {name, [op, shape](std::uint64_t seed) -> Built {
            Rng rng(seed);
            return {[op](const Inputs& in) { return op(in[0]); }, {rnd(shape, rng, -2, 2)}};
          }};
}

std::vector<GradcheckCase> build_registry() {
  std::vector<GradcheckCase> r;
  auto binary = [&](std::string name, Tensor<D> (*op)(const Tensor<D>&, const Tensor<D>&), Shape sa, Shape sb) {
    r.push_back({name, [op, sa, sb](std::uint64_t seed) -> Built {
                   Rng rng(seed);
                   return {[op](const Inputs& in) { return op(in[0], in[1]); }, {rnd(sa, rng), rnd(sb, rng)}};
                 }});
  };
  binary("add", &add<D>, {2, 3, 4}, {2, 3, 4});
  binary("add_broadcast", &add<D>, {2, 3, 4}, {3, 4});
  binary("sub", &sub<D>, {2, 3, 4}, {2, 3, 4});
  binary("mul", &mul<D>, {2, 3, 4}, {2, 3, 4});
  binary("mul_broadcast", &mul<D>, {2, 3, 4}, {3, 4});
  r.push_back({"scale", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) { return scale(in[0], 1.7); }, {rnd({5}, rng)}};
               }});
  r.push_back(unary("exp", &mm::exp<D>));
  r.push_back(unary("sigmoid", &sigmoid<D>));
  r.push_back(unary("silu", &silu<D>));
  r.push_back(unary("softplus", &softplus<D>));
  r.push_back(unary("sum", &sum<D>));
  r.push_back(unary("mean", &mean<D>));
  r.push_back(unary("to_channels_last", &to_channels_last<D>, {2, 3, 2, 4}));
  r.push_back(unary("to_channels_first", &to_channels_first<D>, {2, 2, 4, 3}));
  r.push_back(unary("global_avg_pool", &global_avg_pool<D>, {2, 3, 4, 5}));
  r.push_back({"reshape", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) { return reshape(in[0], Shape{4, 6}); }, {rnd({2, 3, 4}, rng)}};
               }});
  r.push_back({"permute", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) { return permute(in[0], {2, 0, 1}); }, {rnd({2, 3, 4}, rng)}};
               }});
  r.push_back({"flip", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) { return flip(in[0], 1); }, {rnd({2, 3, 4}, rng)}};
               }});
  r.push_back({"concat", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) { return concat(in, 1); }, {rnd({2, 1, 3}, rng), rnd({2, 2, 3}, rng)}};
               }});
  r.push_back({"split", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) {
                           auto parts = split(in[0], {1, 3}, 1);
                           return concat(std::vector<Tensor<D>>{mul(parts[1], parts[1]), parts[0]}, 1);
                         },
                         {rnd({2, 4, 3}, rng)}};
               }});
  r.push_back({"layer_norm", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) { return layer_norm(in[0], in[1], in[2]); },
                         {rnd({3, 5}, rng), rnd({5}, rng), rnd({5}, rng)}};
               }});
  r.push_back({"linear", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) { return linear(in[0], in[1], in[2]); },
                         {rnd({2, 3, 4}, rng), rnd({5, 4}, rng), rnd({5}, rng)}};
               }});
  auto conv = [&](std::string name, Shape x, Shape k, int stride, int pad) {
    r.push_back({name, [=](std::uint64_t seed) -> Built {
                   Rng rng(seed);
                   return {[=](const Inputs& in) { return conv2d(in[0], in[1], in[2], stride, pad); },
                           {rnd(x, rng), rnd(k, rng), rnd({k[0]}, rng)}};
                 }});
  };
  conv("conv2d_3x3", {2, 3, 5, 4}, {2, 3, 3, 3}, 1, 1);
  conv("conv2d_1x1", {2, 3, 4, 4}, {2, 3, 1, 1}, 1, 0);
  conv("conv2d_stride2", {1, 2, 6, 6}, {3, 2, 2, 2}, 2, 0);
  conv("conv2d_patch4", {1, 3, 8, 8}, {2, 3, 4, 4}, 4, 0);
  r.push_back({"depthwise_conv2d", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) { return depthwise_conv2d(in[0], in[1], in[2], 1); },
                         {rnd({2, 3, 4, 5}, rng), rnd({3, 1, 3, 3}, rng), rnd({3}, rng)}};
               }});
  r.push_back({"scale_channels", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) { return scale_channels(in[0], in[1]); },
                         {rnd({2, 3, 2, 2}, rng), rnd({2, 3}, rng)}};
               }});
  r.push_back({"bilinear_up", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) { return bilinear_resize(in[0], 6, 8); }, {rnd({1, 2, 3, 4}, rng)}};
               }});
  r.push_back({"bilinear_down", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 return {[](const Inputs& in) { return bilinear_resize(in[0], 2, 3); }, {rnd({1, 2, 5, 7}, rng)}};
               }});
  r.push_back({"bce_with_logits", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 auto target = rnd({2, 1, 3, 3}, rng, 0.0, 1.0);
                 return {[target](const Inputs& in) { return bce_with_logits(in[0], target); },
                         {rnd({2, 1, 3, 3}, rng, -3, 3)}};
               }});
  for (auto order : kAllScanOrders) {
    r.push_back({"scan_flatten_" + to_string(order), [order](std::uint64_t seed) -> Built {
                   Rng rng(seed);
                   return {[order](const Inputs& in) { return scan_flatten(in[0], order); },
                           {rnd({1, 2, 3, 4}, rng)}};
                 }});
  }
  r.push_back({"ssm_scan", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 const std::size_t b = 2, l = 5, d = 3, n = 2;
                 return {[](const Inputs& in) { return ssm_scan(in[0], in[1], in[2], in[3], in[4], in[5]); },
                         {rnd({b, l, d}, rng), rnd({b, l, d}, rng, 0.05, 0.8), rnd({d, n}, rng, -2.0, -0.2),
                          rnd({b, l, n}, rng), rnd({b, l, n}, rng), rnd({d}, rng)}};
               }});
  auto scan_case = [&](std::string name, bool cross) {
    r.push_back({name, [cross](std::uint64_t seed) -> Built {
                   Rng rng(seed);
                   auto p = ScanParams<D>::init(3, 2, rng);
                   ParamList<D> plist;
                   p.collect("", plist);
                   Inputs in{rnd({2, 6, 3}, rng), rnd({2, 6, 3}, rng)};
                   append(in, jittered(plist, rng, 0.1));
                   GradFn fn = [p, cross](const Inputs& x) {
                     return cross ? cross_selective_scan(x[0], x[1], p) : selective_scan_1d(x[0], p);
                   };
                   if (!cross) in.erase(in.begin() + 1);
                   return {fn, in};
                 }});
  };
  scan_case("selective_scan_1d", false);
  scan_case("cross_selective_scan", true);

  for (auto order : kAllScanOrders) {
    r.push_back({"scan_block_" + to_string(order), [order](std::uint64_t seed) -> Built {
                   Rng rng(seed);
                   auto blk = ScanBlock<D>::init(2, 2, rng);
                   ParamList<D> pl;
                   blk.collect("", pl);
                   Inputs in{rnd({1, 2, 3, 4}, rng)};
                   append(in, jittered(pl, rng, 0.2));
                   return {[blk, order](const Inputs& x) { return blk.forward(x[0], order); }, in};
                 },
                 12});
  }
  r.push_back({"vss_block", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 auto blk = VssBlock<D>::init(2, 2, rng);
                 ParamList<D> pl;
                 blk.collect("", pl);
                 Inputs in{rnd({1, 2, 3, 3}, rng)};
                 append(in, jittered(pl, rng, 0.2));
                 return {[blk](const Inputs& x) { return blk.forward(x[0]); }, in};
               },
               12});
  r.push_back({"mmce_level", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 auto lvl = MmceLevel<D>::init(2, 3, 2, rng);
                 ParamList<D> pl;
                 lvl.collect("", pl);
                 Inputs in{rnd({1, 2, 3, 3}, rng), rnd({1, 2, 3, 3}, rng), rnd({1, 2, 3, 3}, rng)};
                 append(in, jittered(pl, rng, 0.2));
                 return {[lvl](const Inputs& x) { return lvl.forward({x[0], x[1], x[2]}); }, in};
               },
               8});
  r.push_back({"bed_level", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 auto lvl = BedLevel<D>::init(4, 2, 2, rng);
                 ParamList<D> pl;
                 lvl.collect("", pl);
                 Inputs in{rnd({1, 4, 2, 3}, rng), rnd({1, 4, 2, 3}, rng)};
                 append(in, jittered(pl, rng, 0.2));
                 return {[lvl](const Inputs& x) {
                           auto refined = lvl.refine(x[0], x[1]);
                           return concat(std::vector<Tensor<D>>{reshape(lvl.prediction_head(refined), Shape{6}),
                                                                reshape(lvl.expand_and_merge(refined, x[0]), Shape{48})},
                                         0);
                         },
                         in};
               },
               8});
  r.push_back({"model_end_to_end", [](std::uint64_t seed) -> Built {
                 Rng rng(seed);
                 ModelConfig cfg;
                 cfg.backbone.base_channels = 4;
                 cfg.backbone.stage_depths = {1, 1, 1, 1};
                 cfg.d_state = 2;
                 cfg.seed = seed;
                 auto model = std::make_shared<MirrorMamba<D>>(cfg);
                 Inputs in{rnd({1, 3, 32, 32}, rng, 0, 1), rnd({1, 3, 32, 32}, rng, 0, 1),
                           rnd({1, 3, 32, 32}, rng, -0.5, 0.5)};
                 append(in, jittered(model->parameters(), rng, 0.05));
                 auto mask = rnd({1, 1, 32, 32}, rng, 0, 1);
                 for (auto& v : mask.vec()) v = v > 0.7 ? 1.0 : 0.0;
                 return {[model, mask](const Inputs& x) {
                           auto out = model->forward({x[0], x[1], x[2]});
                           return add(deep_supervision_loss(out, mask, nullptr), mean(out.probability));
                         },
                         in};
               },
               1});
  return r;
}

}  // namespace

const std::vector<GradcheckCase>& gradcheck_registry() {
  static const std::vector<GradcheckCase> r = build_registry();
  return r;
}

std::vector<GradcheckRun> run_gradchecks(const std::string& filter, std::uint64_t first_seed, std::size_t seeds,
                                         double tol) {
  std::vector<GradcheckRun> runs;
  for (const auto& c : gradcheck_registry()) {
    if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
    for (std::size_t s = 0; s < seeds; ++s) {
      const std::uint64_t seed = first_seed + s;
      auto [fn, inputs] = c.build(seed);
      GradcheckOptions opts;
      opts.tol = tol;
      opts.stencil = 4;
      // Five-point truncation grows as eps^4 and cancellation as 1/eps; 3e-4 keeps
      // both under 1e-5 for the scan blocks, whose exp/softplus chains are the
      // most curved functions in the registry.
      opts.eps = 3e-4;
      opts.seed = seed;
      opts.max_coords_per_input = c.max_coords;
      runs.push_back({c.name, seed, gradcheck(fn, inputs, opts)});
    }
  }
  return runs;
}

}  // namespace mm
