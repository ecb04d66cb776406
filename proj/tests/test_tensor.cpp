// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "bplm/grad_check.hpp"
#include "bplm/rng.hpp"
#include "bplm/tensor.hpp"

using namespace bplm;

namespace {

Tensor randn(Rng& rng, Shape shape, bool grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST(Tensor, FactoriesAndShape) {
  auto z = Tensor::zeros({2, 3});
  EXPECT_EQ(z.numel(), 6u);
  EXPECT_EQ(z.rank(), 2u);
  EXPECT_EQ(shape_str(z.shape()), "[2x3]");
  auto f = Tensor::full({4}, 2.5);
  EXPECT_DOUBLE_EQ(f.at(3), 2.5);
  EXPECT_DOUBLE_EQ(Tensor::scalar(7.0).item(), 7.0);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, CopiesShareStorageClonesDoNot) {
  auto a = Tensor::from({2}, {1, 2});
  auto b = a;
  b.mutable_data()[0] = 9;
  EXPECT_EQ(a.at(0), 9);
  auto c = a.clone();
  c.mutable_data()[0] = 1;
  EXPECT_EQ(a.at(0), 9);
  EXPECT_FALSE(c.same_storage(a));
}

TEST(Tensor, MatmulValues) {
  Tape tape;
  auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = matmul(tape, a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(c.at(0, 0), 58);
  EXPECT_EQ(c.at(0, 1), 64);
  EXPECT_EQ(c.at(1, 0), 139);
  EXPECT_EQ(c.at(1, 1), 154);
  EXPECT_THROW(matmul(tape, a, a), ShapeError);
}

TEST(Tensor, SoftmaxRowsSumToOneAndAreShiftInvariant) {
  Rng rng(1);
  Tape tape = Tape::inference();
  auto x = randn(rng, {5, 7}, false);
  auto shifted = Tensor::from({5, 7}, [&] {
    std::vector<double> v(x.data().begin(), x.data().end());
    for (auto& e : v) e += 1000.0;
    return v;
  }());
  auto p = softmax(tape, x, 1);
  auto q = softmax(tape, shifted, 1);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      s += p.at(r, c);
      EXPECT_NEAR(p.at(r, c), q.at(r, c), 1e-12);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Tensor, MaskedSoftmaxGivesExactZeros) {
  Tape tape;
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Mask allowed{1, 0, 1, 0, 0, 0};
  auto p = masked_softmax_rows(tape, x, allowed);
  EXPECT_EQ(p.at(0, 1), 0.0);
  EXPECT_NEAR(p.at(0, 0) + p.at(0, 2), 1.0, 1e-15);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(p.at(1, c), 0.0);
}

TEST(Tensor, CrossEntropyOfUniformLogitsIsLogV) {
  Tape tape;
  auto logits = Tensor::zeros({3, 10}, true);
  std::vector<std::int64_t> targets{1, kIgnoreIndex, 9};
  EXPECT_NEAR(cross_entropy_from_logits(tape, logits, targets).item(), std::log(10.0), 1e-14);
  std::vector<std::int64_t> none(3, kIgnoreIndex);
  Tape t2;
  EXPECT_ANY_THROW(cross_entropy_from_logits(t2, logits, none));
}

TEST(Tensor, RopeIsIdentityAtPositionZeroAndPreservesPairNorms) {
  Rng rng(3);
  Tape tape = Tape::inference();
  auto x = randn(rng, {4, 2, 8}, false);
  std::vector<std::int64_t> pos{0, 1, 5, 17};
  auto y = rope_apply(tape, x, pos, 10000.0);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y.at(i), x.at(i));
  for (std::size_t i = 0; i < x.numel(); i += 2) {
    const double nx = std::hypot(x.at(i), x.at(i + 1));
    const double ny = std::hypot(y.at(i), y.at(i + 1));
    EXPECT_NEAR(nx, ny, 1e-12);
  }
}

TEST(Tensor, RmsNormUnitGainGivesUnitRms) {
  Rng rng(4);
  Tape tape = Tape::inference();
  auto x = randn(rng, {3, 16}, false);
  auto w = Tensor::full({16}, 1.0);
  auto y = rms_norm(tape, x, w, 0.0);
  for (std::size_t r = 0; r < 3; ++r) {
    double ss = 0;
    for (std::size_t c = 0; c < 16; ++c) ss += y.at(r, c) * y.at(r, c);
    EXPECT_NEAR(ss / 16, 1.0, 1e-12);
  }
}

TEST(Tensor, InferenceTapeRecordsNothing) {
  Tape tape = Tape::inference();
  auto a = Tensor::from({2}, {1, 2}, true);
  auto b = mul(tape, a, a);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(tape.recording());
  (void)b;
}

TEST(Tensor, BackwardAccumulatesIntoSharedLeaves) {
  Tape tape;
  auto a = Tensor::from({1}, {3.0}, true);
  auto y = sum(tape, add(tape, mul(tape, a, a), a));  // a² + a
  tape.backward(y);
  EXPECT_DOUBLE_EQ(a.grad()[0], 7.0);
}

TEST(Tensor, TapeIsSingleUse) {
  Tape tape;
  auto a = Tensor::from({1}, {3.0}, true);
  auto y = sum(tape, mul(tape, a, a));
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), TapeError);
  tape.reset();
  a.zero_grad();
  auto z = sum(tape, mul(tape, a, a));
  tape.backward(z);
  EXPECT_DOUBLE_EQ(a.grad()[0], 6.0);
}

// Random compositions of ops: gradients agree with central differences.
class OpChainGrad : public ::testing::TestWithParam<int> {};

TEST_P(OpChainGrad, MatchesFiniteDifferences) {
  Rng rng(100 + GetParam());
  const std::size_t n = 2 + rng.below(3), m = 2 + 2 * rng.below(3);
  auto x = randn(rng, {n, m});
  auto w = randn(rng, {m, m});
  auto g = randn(rng, {m});
  auto r = randn(rng, {n, m}, false);
  auto f = [=](Tape& t) {
    auto h = rms_norm(t, x, g, 1e-5);
    h = matmul(t, h, w);
    h = swiglu(t, h, silu(t, h));
    h = softmax(t, h, 1);
    return sum(t, mul(t, l2_normalize_rows(t, add(t, h, x)), r));
  };
  // Deep chains put some coordinates near the central-difference roundoff
  // floor, so compare |analytic - numeric| against 1e-7 * max(1, |numeric|).
  const auto res = grad_check_detailed(f, {x, w, g}, 1e-5);
  EXPECT_LT(std::abs(res.analytic - res.numeric), 1e-7 * std::max(1.0, std::abs(res.numeric)));
  EXPECT_LT(res.max_rel_error, 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Random, OpChainGrad, ::testing::Range(0, 8));
