// Copyright 2026 The iptt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "iptt/numerics.hpp"
#include "iptt/rng.hpp"

namespace iptt {
namespace {

RealMatrix random_matrix(SeededRng& rng, std::size_t r, std::size_t c) {
  return rng.normal_matrix(r, c, 1.0);
}

// Triple loop with the same left-to-right order, written independently.
RealMatrix naive_matmul(const RealMatrix& a, const RealMatrix& b) {
  RealMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

TEST(Matmul, HandExample) {
  const auto c = matmul(RealMatrix::from_rows({{1, 2}, {3, 4}}), RealMatrix::from_rows({{5}, {6}}));
  EXPECT_TRUE(bitwise_equal(c, RealMatrix::from_rows({{17}, {39}})));
}

TEST(Matmul, IdentityAndZero) {
  SeededRng rng(3);
  const auto a = random_matrix(rng, 5, 7);
  EXPECT_TRUE(bitwise_equal(matmul(a, RealMatrix::identity(7)), a));
  EXPECT_TRUE(bitwise_equal(matmul(a, RealMatrix(7, 3)), RealMatrix(5, 3)));
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(RealMatrix(2, 3), RealMatrix(2, 3)), Error);
  EXPECT_THROW(matmul_nt(RealMatrix(2, 3), RealMatrix(2, 4)), Error);
  EXPECT_THROW(matmul_tn(RealMatrix(2, 3), RealMatrix(3, 3)), Error);
}

TEST(Matmul, MatchesNaiveOrderBitwise) {
  SeededRng rng(11);
  for (std::size_t n : {1u, 3u, 17u, 40u}) {
    const auto a = random_matrix(rng, n, 13);
    const auto b = random_matrix(rng, 13, n + 2);
    EXPECT_TRUE(bitwise_equal(matmul(a, b), naive_matmul(a, b)));
    EXPECT_TRUE(bitwise_equal(matmul_nt(a, transpose(b)), naive_matmul(a, b)));
    EXPECT_TRUE(bitwise_equal(matmul_tn(transpose(a), b), naive_matmul(a, b)));
  }
}

TEST(Matmul, WorkerCountDoesNotChangeBits) {
  SeededRng rng(5);
  const auto a = random_matrix(rng, 70, 33);
  const auto b = random_matrix(rng, 33, 21);
  const int saved = worker_count();
  set_worker_count(1);
  const auto one = matmul(a, b);
  set_worker_count(4);
  const auto four = matmul(a, b);
  set_worker_count(saved);
  EXPECT_TRUE(bitwise_equal(one, four));
}

TEST(Matmul, AssociativeWithinRoundoff) {
  SeededRng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_matrix(rng, 8, 8), b = random_matrix(rng, 8, 8),
               c = random_matrix(rng, 8, 8);
    const auto l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    EXPECT_LE(max_abs_diff(l, r) / std::max(1.0, frob_norm(l)), 1e-12);
  }
}

TEST(Silu, ScalarValues) {
  EXPECT_EQ(silu(0.0), 0.0);
  EXPECT_DOUBLE_EQ(silu(2.0), 2.0 / (1.0 + std::exp(-2.0)));
  EXPECT_NEAR(silu(2.0), 1.7615941559557649, 1e-15);
  EXPECT_LT(std::abs(silu(-30.0)), 1e-10);
  EXPECT_NEAR(silu(-30.0), -30.0 / (1.0 + std::exp(30.0)), 1e-25);
}

TEST(Silu, DerivativeMatchesCentralDifference) {
  for (double x : {-4.0, -0.5, 0.0, 0.3, 2.0, 7.0}) {
    const double h = 1e-6;
    EXPECT_NEAR(silu_derivative(x), (silu(x + h) - silu(x - h)) / (2 * h), 1e-8);
  }
}

TEST(Softmax, Examples) {
  const auto a = softmax_rows(RealMatrix::from_rows({{0, 0}, {1000, 1000}, {0, std::log(3.0)}}));
  EXPECT_EQ(a(0, 0), 0.5);
  EXPECT_EQ(a(0, 1), 0.5);
  EXPECT_EQ(a(1, 0), 0.5);
  EXPECT_EQ(a(1, 1), 0.5);
  EXPECT_NEAR(a(2, 0), 0.25, 1e-15);
  EXPECT_NEAR(a(2, 1), 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  SeededRng rng(2);
  const auto p = softmax_rows(rng.normal_matrix(10, 9, 5.0));
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0;
    for (double v : p.row(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

// The max-shift cancels any added constant exactly when the additions are
// exact, which holds for dyadic inputs shifted by integers.
TEST(Softmax, ShiftInvarianceIsBitwiseForExactShifts) {
  SeededRng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    RealMatrix x(1, 6);
    for (double& v : x.values()) v = static_cast<double>(rng.below(1 << 12)) / 256.0 - 8.0;
    const double c = static_cast<double>(rng.below(2001)) - 1000.0;
    RealMatrix y = x;
    for (double& v : y.values()) v += c;
    EXPECT_TRUE(bitwise_equal(softmax_rows(x), softmax_rows(y)));
  }
}

TEST(FrobNorm, Examples) {
  EXPECT_EQ(frob_norm(RealMatrix::from_rows({{3, 4}})), 5.0);
  EXPECT_EQ(frob_norm(RealMatrix(3, 3)), 0.0);
  EXPECT_EQ(frob_norm(RealMatrix::identity(2)), std::sqrt(2.0));
}

TEST(RmsNorm, UnitGainGivesUnitRms) {
  SeededRng rng(4);
  const auto x = rng.normal_matrix(5, 8, 3.0);
  const auto y = rms_norm(x, RealMatrix(1, 8, 1.0), 0.0);
  for (std::size_t r = 0; r < 5; ++r) {
    double ss = 0;
    for (double v : y.row(r)) ss += v * v;
    EXPECT_NEAR(ss / 8.0, 1.0, 1e-14);
  }
}

RealMatrix column(std::initializer_list<double> v) {
  RealMatrix m(v.size(), 1);
  std::size_t i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

TEST(Conv, NextTokenTap) {
  const auto x = column({1, 2, 3, 4});
  const auto y = lookahead_conv1d(x, RealMatrix::from_rows({{1}}), {1});
  EXPECT_TRUE(bitwise_equal(y, column({2, 3, 4, 0})));
}

TEST(Conv, ZeroKernelGivesZero) {
  SeededRng rng(1);
  const auto x = rng.normal_matrix(9, 4, 1.0);
  const auto y = lookahead_conv1d(x, ConvSpec::lookahead(5, 4));
  EXPECT_TRUE(bitwise_equal(y, RealMatrix(9, 4)));
}

TEST(Conv, TwoTapsWithBoundaryPad) {
  const double a = 0.5, b = -2.0;
  const auto x = column({1, 2, 3});
  const auto y = lookahead_conv1d(x, RealMatrix::from_rows({{a}, {b}}), {0, 1});
  EXPECT_TRUE(bitwise_equal(y, column({a * 1 + b * 2, a * 2 + b * 3, a * 3})));
}

TEST(Conv, SegmentsDoNotLeak) {
  const auto x = column({1, 2, 3, 4});
  const std::vector<std::int64_t> ids{0, 0, 1, 1};
  const auto y = lookahead_conv1d(x, RealMatrix::from_rows({{1}}), {1}, ids);
  EXPECT_TRUE(bitwise_equal(y, column({2, 0, 4, 0})));
}

TEST(Conv, RowOnlyDependsOnItsTaps) {
  SeededRng rng(6);
  ConvSpec spec{{0, 2, 3}, rng.normal_matrix(3, 5, 1.0)};
  const auto x = rng.normal_matrix(12, 5, 1.0);
  const auto y = lookahead_conv1d(x, spec);
  for (std::size_t t = 0; t < 12; ++t) {
    for (std::size_t r = 0; r < 12; ++r) {
      if (r == t || r == t + 2 || r == t + 3) continue;
      RealMatrix x2 = x;
      for (double& v : x2.row(r)) v += 100.0;
      const auto y2 = lookahead_conv1d(x2, spec);
      for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(y(t, c), y2(t, c));
    }
  }
}

TEST(Conv, InvalidSpecThrows) {
  ConvSpec dup{{0, 0}, RealMatrix(2, 3)};
  EXPECT_THROW(dup.validate(3), Error);
  ConvSpec bad_shape{{0, 1}, RealMatrix(2, 4)};
  EXPECT_THROW(bad_shape.validate(3), Error);
}

TEST(Conv, BackwardMatchesFiniteDifference) {
  SeededRng rng(9);
  ConvSpec spec{{0, 1, 3}, rng.normal_matrix(3, 2, 1.0)};
  const auto x = rng.normal_matrix(7, 2, 1.0);
  const auto g = rng.normal_matrix(7, 2, 1.0);
  const std::vector<std::int64_t> ids{0, 0, 0, 0, 1, 1, 1};
  RealMatrix dx, dk;
  lookahead_conv1d_backward(x, spec, ids, g, &dx, &dk);
  auto f = [&](const RealMatrix& xx, const ConvSpec& s) {
    return sum(hadamard(lookahead_conv1d(xx, s, ids), g));
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    RealMatrix p = x, m = x;
    p.values()[i] += h;
    m.values()[i] -= h;
    EXPECT_NEAR(dx.values()[i], (f(p, spec) - f(m, spec)) / (2 * h), 1e-8);
  }
  for (std::size_t i = 0; i < spec.kernel.size(); ++i) {
    ConvSpec p = spec, m = spec;
    p.kernel.values()[i] += h;
    m.kernel.values()[i] -= h;
    EXPECT_NEAR(dk.values()[i], (f(x, p) - f(x, m)) / (2 * h), 1e-8);
  }
}

TEST(Rng, SameSeedSameStream) {
  SeededRng a(42), b(42);
  bool same = true;
  for (int i = 0; i < 1000000; ++i) same = same && a.next_u64() == b.next_u64();
  EXPECT_TRUE(same);
  SeededRng c(7), d(7);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(c.normal(), d.normal());
}

TEST(Rng, DifferentSeedsDiffer) {
  SeededRng a(1), b(2);
  EXPECT_NE(a.next_u64(), b.next_u64());
  EXPECT_NE(SeededRng::derive(1, 0), SeededRng::derive(1, 1));
}

TEST(Rng, TruncatedNormalStaysInRange) {
  SeededRng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const double v = rng.truncated_normal(0.02);
    ASSERT_LE(std::abs(v), 0.04);
  }
}

TEST(Rng, UniformAndBelowRanges) {
  SeededRng rng(10);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(rng.below(7), 7u);
  }
}

TEST(Matrix, FiniteCheck) {
  RealMatrix m(2, 2, 1.0);
  EXPECT_TRUE(all_finite(m));
  m(1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(all_finite(m));
  EXPECT_THROW(RealMatrix(2, 2, std::vector<double>(3)), Error);
}

}  // namespace
}  // namespace iptt
