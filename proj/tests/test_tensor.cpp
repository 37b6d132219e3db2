#include <gtest/gtest.h>

#include <cmath>

#include "mirrormamba/ops.hpp"
#include "mirrormamba/tensor.hpp"

using namespace mm;

TEST(Tensor, ZeroExtentIsRejected) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0, 3}), DimensionError);
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), DimensionError);
}

TEST(Tensor, CopiesShareStorageClonesDoNot) {
  Tensor<float> a(Shape{2, 2}, 1.0f);
  Tensor<float> b = a;
  Tensor<float> c = a.clone();
  a[0] = 5.0f;
  EXPECT_EQ(b[0], 5.0f);
  EXPECT_EQ(c[0], 1.0f);
}

TEST(Tensor, ItemNeedsOneElement) {
  EXPECT_EQ(Tensor<double>::scalar(2.5).item(), 2.5);
  EXPECT_THROW(Tensor<double>(Shape{2}).item(), DimensionError);
  EXPECT_THROW(Tensor<double>(Shape{2}).dim(1), DimensionError);
}

TEST(Tape, ReusedInputAccumulatesBothPaths) {
  Tensor<double> x(Shape{3}, std::vector<double>{1.0, -2.0, 0.5});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  // d/dx sum(x*x + 3x) = 2x + 3
  auto y = sum(add(mul(x, x), scale(x, 3.0)));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -1.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 4.0);
}

TEST(Tape, LeafGradientsAccumulateAcrossPasses) {
  Tensor<double> x(Shape{1}, 2.0);
  x.set_requires_grad(true);
  for (int pass = 0; pass < 2; ++pass) {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(mul(x, x));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Tape, NoGradScopeRecordsNothing) {
  Tensor<double> x(Shape{4}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  {
    NoGradScope<double> off;
    auto y = exp(x);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
  auto z = exp(x);
  EXPECT_TRUE(z.requires_grad());
  EXPECT_EQ(tape.size(), 1u);
}

TEST(Tape, BackwardNeedsScalar) {
  Tensor<double> x(Shape{2}, 1.0);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = exp(x);
  EXPECT_THROW(tape.backward(y), ArgumentError);
}

TEST(Tape, UnusedBranchGetsNoGradient) {
  Tensor<double> x(Shape{2}, 1.0), w(Shape{2}, 3.0);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto unused = mul(w, w);
  tape.backward(sum(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(w.grad()[0], 0.0);
}

TEST(Numeric, OverflowRaises) {
  Tensor<float> x(Shape{1}, 1000.0f);
  EXPECT_THROW(exp(x), NumericError);
  Tensor<float> nan(Shape{2}, std::nanf(""));
  EXPECT_THROW(scale(nan, 2.0f), NumericError);
}
