#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mirrormamba/metrics.hpp"
#include "mirrormamba/tensor.hpp"
#include "oracles.hpp"

using namespace mm;
using mmtest::brute_force;

namespace {

std::vector<float> grid(std::initializer_list<int> bits) {
  std::vector<float> v;
  for (int b : bits) v.push_back(float(b));
  return v;
}

}  // namespace

TEST(Metrics, WorkedExamples) {
  // gt holds 4 pixels; pred covers 2 of them and 2 others.
  auto gt = grid({1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  auto pr = grid({1, 0, 1, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  EXPECT_EQ(iou(pr, gt), 2.0 / 6.0);

  // precision 0.5, recall 1
  auto gt2 = grid({1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  auto pr2 = grid({1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  const double fb = f_beta(pr2, gt2);
  EXPECT_NEAR(fb, 1.3 * 0.5 / (0.15 + 1.0), 1e-15);
  EXPECT_EQ(std::round(fb * 1e4) / 1e4, 0.5652);

  // three wrong pixels
  auto pr3 = grid({1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  auto gt3 = grid({1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  EXPECT_EQ(accuracy(pr3, gt3), 13.0 / 16.0);
}

TEST(Metrics, Conventions) {
  std::vector<float> zeros(16, 0.0f), ones(16, 1.0f), half(16, 0.5f);
  EXPECT_EQ(iou(zeros, zeros), 1.0);
  EXPECT_EQ(iou(ones, ones), 1.0);
  EXPECT_EQ(f_beta(ones, ones), 1.0);
  EXPECT_EQ(f_beta(zeros, ones), 0.0);
  EXPECT_EQ(accuracy(zeros, ones), 0.0);
  EXPECT_EQ(accuracy(ones, ones), 1.0);
  EXPECT_EQ(mae(ones, ones), 0.0);
  auto half_gt = grid({1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0});
  EXPECT_EQ(mae(half, half_gt), 0.5);
  // the threshold itself binarizes to foreground
  EXPECT_EQ(iou(half, ones), 1.0);
  EXPECT_THROW(iou(zeros, std::vector<float>(15, 0.0f)), DimensionError);
}

TEST(Metrics, BruteForceOracle) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int k = 0; k < 1000; ++k) {
    std::vector<float> pred(256), gt(256);
    const float density = u(rng);
    for (std::size_t i = 0; i < 256; ++i) {
      pred[i] = u(rng);
      gt[i] = u(rng) < density ? 1.0f : 0.0f;
    }
    if (k % 10 == 0)  // some exact binary predictions as well
      for (auto& p : pred) p = p < 0.5f ? 0.0f : 1.0f;
    const auto o = brute_force(pred, gt);
    const auto m = evaluate_sample(pred, gt);
    ASSERT_EQ(m.iou, o.iou);
    ASSERT_EQ(m.f_beta, o.f_beta);
    ASSERT_EQ(m.mae, o.mae);
    ASSERT_EQ(m.accuracy, o.accuracy);
  }
}

TEST(Metrics, MaeEightByEight) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> pred(64), gt(64);
  double ref = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    pred[i] = u(rng);
    gt[i] = i % 3 == 0 ? 1.0f : 0.0f;
    ref += std::abs(double(pred[i]) - gt[i]);
  }
  EXPECT_DOUBLE_EQ(mae(pred, gt), ref / 64);
}

TEST(Metrics, RemovingFalsePositiveNeverHurts) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int k = 0; k < 200; ++k) {
    std::vector<float> pred(64), gt(64);
    for (std::size_t i = 0; i < 64; ++i) {
      pred[i] = u(rng);
      gt[i] = u(rng) < 0.3f ? 1.0f : 0.0f;
    }
    for (std::size_t i = 0; i < 64; ++i) {
      if (!(pred[i] >= 0.5f && gt[i] == 0.0f)) continue;
      auto fixed = pred;
      fixed[i] = 0.0f;
      EXPECT_GE(iou(fixed, gt), iou(pred, gt));
      EXPECT_GE(accuracy(fixed, gt), accuracy(pred, gt));
    }
  }
}

TEST(Metrics, AdaptiveThreshold) {
  std::vector<float> pred{0.02f, 0.02f, 0.02f, 0.3f};
  Binarize adaptive{0.5, true};
  EXPECT_NEAR(adaptive.resolve(pred), 0.18, 1e-7);
  std::vector<float> gt{0, 0, 0, 1};
  EXPECT_EQ(iou(pred, gt), 0.0);
  EXPECT_EQ(iou(pred, gt, adaptive), 1.0);
  std::vector<float> high{0.9f, 0.9f, 0.9f, 0.9f};
  EXPECT_EQ(adaptive.resolve(high), 1.0);
}

TEST(Metrics, AggregateIsUnweightedMean) {
  auto r = aggregate({{1.0, 0.5, 0.1, 0.9}, {0.0, 0.25, 0.3, 0.7}});
  EXPECT_EQ(r.iou, 0.5);
  EXPECT_EQ(r.f_beta, 0.375);
  EXPECT_DOUBLE_EQ(r.mae, 0.2);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.8);
  auto j = to_json(r);
  for (const char* k : {"iou", "f_beta", "mae", "accuracy"}) EXPECT_TRUE(j.contains(k)) << k;
  const auto table = format_table({{"model", r}});
  EXPECT_NE(table.find("IoU"), std::string::npos);
  EXPECT_NE(table.find("MAE"), std::string::npos);
  EXPECT_NE(table.find("0.500"), std::string::npos);
}
