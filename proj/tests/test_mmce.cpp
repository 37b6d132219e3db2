#include <gtest/gtest.h>

#include "mirrormamba/mmce.hpp"
#include "mirrormamba/ops.hpp"
#include "test_util.hpp"

using namespace mm;
using mmtest::max_abs_diff;
using mmtest::randn;

namespace {

MmceLevel<double> random_level(std::size_t c, std::size_t k, Rng& rng, GateTarget gate = GateTarget::kT) {
  auto m = MmceLevel<double>::init(c, k, 2, rng, true, gate);
  ParamList<double> ps;
  m.collect("", ps);
  mmtest::randomize(ps, rng, 0.3);
  return m;
}

std::vector<Tensor<double>> random_features(std::size_t k, std::size_t c, Rng& rng, std::size_t h = 6,
                                            std::size_t w = 5) {
  std::vector<Tensor<double>> f;
  for (std::size_t i = 0; i < k; ++i) f.push_back(randn<double>({2, c, h, w}, rng));
  return f;
}

}  // namespace

TEST(Mmce, FuseConcatShapesAndOrder) {
  Rng rng(51);
  auto three = random_features(3, 8, rng);
  auto y3 = fuse_concat(three);
  EXPECT_EQ(y3.dim(1), 24u);
  EXPECT_EQ(fuse_concat(random_features(2, 8, rng)).dim(1), 16u);
  const std::size_t plane = 8 * 6 * 5;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < plane; ++i) ASSERT_EQ(y3[b * 3 * plane + i], three[0][b * plane + i]);
  EXPECT_THROW(fuse_concat(random_features(1, 8, rng)), ArgumentError);
  EXPECT_THROW(fuse_concat(random_features(4, 8, rng)), ArgumentError);
  auto bad = random_features(2, 8, rng);
  bad.push_back(randn<double>({2, 8, 6, 4}, rng));
  EXPECT_THROW(fuse_concat(bad), DimensionError);
}

TEST(Mmce, CompressShapes) {
  Rng rng(52);
  for (std::size_t k : {2u, 3u}) {
    auto m = MmceLevel<double>::init(4, k, 2, rng);
    auto [t, f1] = m.compress(Tensor<double>(Shape{1, 4 * k, 6, 6}));
    EXPECT_EQ(t.shape(), (Shape{1, 4, 6, 6}));
    EXPECT_EQ(f1.shape(), (Shape{1, 4, 6, 6}));
    for (double v : t.vec()) EXPECT_EQ(v, 0.0);
    for (double v : f1.vec()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Mmce, AttentionIsStrictlyInsideUnitInterval) {
  Rng rng(53);
  auto m = random_level(3, 3, rng);
  auto s = m.forward_state(random_features(3, 3, rng));
  for (const auto* w : {&s.w_horiz, &s.w_vert})
    for (double v : w->vec()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
}

TEST(Mmce, HorizontalPairFlipEquivariance) {
  Rng rng(54);
  auto m = random_level(3, 3, rng);
  auto f = randn<double>({1, 3, 6, 7}, rng);
  auto lhs = directional_attention(flip(f, 3), m.m1, ScanOrder::M1, m.m2, ScanOrder::M2, m.wh_w, m.wh_b);
  // Mirrored input = swapped scan orders on the original with the kernel mirrored too.
  auto rhs = flip(directional_attention(f, m.m1, ScanOrder::M2, m.m2, ScanOrder::M1, flip(m.wh_w, 3), m.wh_b), 3);
  EXPECT_LT(max_abs_diff(lhs.vec(), rhs.vec()), 1e-12);
  auto lv = directional_attention(flip(f, 2), m.m3, ScanOrder::M3, m.m4, ScanOrder::M4, m.wv_w, m.wv_b);
  auto rv = flip(directional_attention(f, m.m3, ScanOrder::M4, m.m4, ScanOrder::M3, flip(m.wv_w, 2), m.wv_b), 2);
  EXPECT_LT(max_abs_diff(lv.vec(), rv.vec()), 1e-12);
}

TEST(Mmce, NeutralAndClosedGates) {
  Rng rng(55);
  auto m = random_level(3, 2, rng);
  auto feats = random_features(2, 3, rng);
  MmceGateOverride<double> open{1.0, 1.0};
  auto s = m.forward_state(feats, open);
  EXPECT_EQ(s.f_out.vec(), s.t.vec());
  MmceGateOverride<double> closed{std::nullopt, 0.0};
  const auto shut = m.forward_state(feats, closed);
  for (double v : shut.f_out.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Mmce, MatchesStraightLineComposition) {
  Rng rng(56);
  for (GateTarget gate : {GateTarget::kT, GateTarget::kF2}) {
    auto m = random_level(3, 3, rng, gate);
    auto feats = random_features(3, 3, rng);
    auto fc = concat(feats, 1);
    auto t = conv2d(fc, m.t_w, m.t_b, 1, 1);
    auto f1 = conv2d(fc, m.f1_w, m.f1_b, 1, 1);
    auto wh = sigmoid(conv2d(concat<double>({m.m1.forward(f1, ScanOrder::M1), m.m2.forward(f1, ScanOrder::M2)}, 1),
                             m.wh_w, m.wh_b, 1, 1));
    auto f2 = mul(wh, t);
    auto wv = sigmoid(conv2d(concat<double>({m.m3.forward(f2, ScanOrder::M3), m.m4.forward(f2, ScanOrder::M4)}, 1),
                             m.wv_w, m.wv_b, 1, 1));
    auto out = mul(wv, gate == GateTarget::kT ? t : f2);
    auto s = m.forward_state(feats);
    EXPECT_LT(max_abs_diff(s.f2.vec(), f2.vec()), 1e-12);
    EXPECT_LT(max_abs_diff(s.f_out.vec(), out.vec()), 1e-12);
  }
}

TEST(Mmce, ModeDualityOnlyChangesInputWidth) {
  Rng rng(57);
  auto img = MmceLevel<double>::init(4, 2, 2, rng);
  auto vid = MmceLevel<double>::init(4, 3, 2, rng);
  ParamList<double> pi, pv;
  img.collect("", pi);
  vid.collect("", pv);
  ASSERT_EQ(pi.size(), pv.size());
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (pi[i].name == "t.w" || pi[i].name == "f1.w") {
      EXPECT_EQ(pi[i].value.dim(1), 8u);
      EXPECT_EQ(pv[i].value.dim(1), 12u);
    } else {
      EXPECT_EQ(pi[i].value.shape(), pv[i].value.shape()) << pi[i].name;
    }
  }
  auto si = img.forward_state(random_features(2, 4, rng));
  auto sv = vid.forward_state(random_features(3, 4, rng));
  EXPECT_EQ(si.f_out.shape(), sv.f_out.shape());
}

TEST(Mmce, DisabledLevelPassesCompression) {
  Rng rng(58);
  auto m = MmceLevel<double>::init(3, 3, 2, rng, false);
  auto s = m.forward_state(random_features(3, 3, rng));
  EXPECT_EQ(s.f_out.vec(), s.t.vec());
  ParamList<double> ps;
  m.collect("", ps);
  EXPECT_EQ(ps.size(), 2u);
  EXPECT_THROW(m.forward_state(random_features(2, 3, rng)), ArgumentError);
}
