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

#include "iptt/rng.hpp"
#include "iptt/ttt_layer.hpp"

namespace iptt {
namespace {

TttLayerConfig small_config(std::size_t d, std::size_t f, std::size_t chunk) {
  TttLayerConfig c;
  c.d_model = d;
  c.d_ff = f;
  c.chunk_size = chunk;
  c.eta = 0.1;
  return c;
}

TttLayerParams random_params(SeededRng& rng, const TttLayerConfig& c, double s = 1.0) {
  const double in = s / std::sqrt(static_cast<double>(c.d_model));
  TttLayerParams p;
  p.w_up = rng.normal_matrix(c.d_ff, c.d_model, in);
  p.w_gate = rng.normal_matrix(c.d_ff, c.d_model, in);
  p.w_down0 = rng.normal_matrix(c.d_model, c.d_ff, s / std::sqrt(static_cast<double>(c.d_ff)));
  p.w_target = rng.normal_matrix(c.d_model, c.d_model, in);
  p.conv_kernel = rng.normal_matrix(c.conv_offsets.size(), c.d_model, 0.5);
  return p;
}

TttLayerParams scalar_params(double gate, double up, double down) {
  TttLayerParams p;
  p.w_gate = RealMatrix(1, 1, gate);
  p.w_up = RealMatrix(1, 1, up);
  p.w_down0 = RealMatrix(1, 1, down);
  p.w_target = RealMatrix(1, 1, 1.0);
  p.conv_kernel = RealMatrix(1, 1, 1.0);
  return p;
}

BoundaryMask docs_at(std::size_t n, std::initializer_list<std::size_t> starts) {
  BoundaryMask m{std::vector<std::int64_t>(n, 0)};
  for (std::size_t s : starts)
    for (std::size_t t = s; t < n; ++t) ++m.doc_ids[t];
  return m;
}

TEST(Preactivation, ScalarExample) {
  const auto p = scalar_params(2.0, 3.0, 1.0);
  const auto z = compute_preactivation(RealMatrix(1, 1, 1.0), p);
  EXPECT_DOUBLE_EQ(z(0, 0), silu(2.0) * 3.0);
  EXPECT_NEAR(z(0, 0), 5.284782467867295, 1e-14);
}

TEST(Preactivation, ZeroInputAndShape) {
  SeededRng rng(1);
  const auto c = small_config(4, 6, 3);
  const auto p = random_params(rng, c);
  EXPECT_TRUE(bitwise_equal(compute_preactivation(RealMatrix(5, 4), p), RealMatrix(5, 6)));
  EXPECT_EQ(compute_preactivation(rng.normal_matrix(7, 4, 1.0), p).cols(), 6u);
  EXPECT_THROW(compute_preactivation(RealMatrix(2, 3), p), Error);
}

TEST(Target, ZeroKernelGivesZero) {
  SeededRng rng(2);
  auto c = small_config(4, 6, 8);
  auto p = random_params(rng, c);
  p.conv_kernel.fill(0.0);
  EXPECT_TRUE(bitwise_equal(compute_target(rng.normal_matrix(8, 4, 1.0), p, c), RealMatrix(8, 4)));
}

TEST(Target, NextTokenKernelAndDiagonalProjection) {
  SeededRng rng(3);
  auto c = small_config(3, 2, 4);
  c.conv_offsets = {1};
  auto p = random_params(rng, c);
  p.conv_kernel = RealMatrix(1, 3, 1.0);
  p.w_target = RealMatrix::identity(3);
  const auto x = rng.normal_matrix(4, 3, 1.0);
  const auto v = compute_target(x, p, c);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(v(t, j), x(t + 1, j));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(v(3, j), 0.0);
  p.w_target = scale(RealMatrix::identity(3), 2.0);
  EXPECT_TRUE(bitwise_equal(compute_target(x, p, c), scale(v, 2.0)));
}

TEST(ChunkDelta, OuterProduct) {
  const auto dw = chunk_delta(RealMatrix(1, 1, 3.0), RealMatrix::from_rows({{1, 2}}));
  EXPECT_TRUE(bitwise_equal(dw, RealMatrix::from_rows({{3, 6}})));
  EXPECT_TRUE(bitwise_equal(chunk_delta(RealMatrix(4, 3), RealMatrix(4, 5, 1.0)), RealMatrix(3, 5)));
  EXPECT_THROW(chunk_delta(RealMatrix(2, 3), RealMatrix(3, 5)), Error);
}

TEST(Clip, Examples) {
  const auto big = RealMatrix::from_rows({{0, 4}});
  const auto c = clip_delta(big, 1.0);
  EXPECT_TRUE(bitwise_equal(c, RealMatrix::from_rows({{0, 1}})));
  const auto small = RealMatrix::from_rows({{0.3, 0.4}});
  EXPECT_TRUE(bitwise_equal(clip_delta(small, 1.0), small));
  EXPECT_TRUE(bitwise_equal(clip_delta(RealMatrix(2, 2), 1.0), RealMatrix(2, 2)));
  EXPECT_THROW(clip_delta(small, 0.0), Error);
}

TEST(Clip, NormNeverExceedsTau) {
  SeededRng rng(4);
  for (int i = 0; i < 500; ++i) {
    const auto d = rng.normal_matrix(3, 4, std::exp(rng.normal() * 3));
    for (double tau : {1e-5, 1.0, 10.0}) {
      const auto c = clip_delta(d, tau);
      EXPECT_LE(frob_norm(c), tau);
      if (frob_norm(d) > tau) EXPECT_NEAR(frob_norm(c), tau, 1e-12 * tau);
    }
  }
}

TEST(Sequential, TwoScalarChunks) {
  auto c = small_config(1, 1, 1);
  c.eta = 0.5;
  c.conv_offsets = {0};
  // Choose weights so that Z1 = 2, Z2 = 4 and Vhat1 = 3.
  TttLayerParams p;
  p.w_gate = RealMatrix(1, 1, 1.0);
  p.w_up = RealMatrix(1, 1, 1.0);
  p.w_down0 = RealMatrix(1, 1, 1.0);
  p.w_target = RealMatrix(1, 1, 1.0);
  p.conv_kernel = RealMatrix(1, 1, 1.0);
  // Solve silu(h) * h = z numerically by bisection, independent of the layer.
  auto solve = [](double z) {
    double lo = 0.0, hi = 10.0;
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      (silu(mid) * mid < z ? lo : hi) = mid;
    }
    return lo;
  };
  const RealMatrix h = RealMatrix::from_rows({{solve(2.0)}, {solve(4.0)}});
  const RealMatrix x0 = RealMatrix::from_rows({{3.0}, {0.0}});
  const auto out = forward_sequential(h, x0, p, c, {});
  const auto z = compute_preactivation(h, p);
  EXPECT_NEAR(z(0, 0), 2.0, 1e-12);
  EXPECT_NEAR(z(1, 0), 4.0, 1e-12);
  EXPECT_EQ(out.output(0, 0), z(0, 0) * 1.0);
  EXPECT_EQ(out.output(1, 0), z(1, 0) * (1.0 + 0.5 * (3.0 * z(0, 0))));
  EXPECT_NEAR(out.output(1, 0), 16.0, 1e-10);
}

TEST(Sequential, SingleChunkUsesSlowWeight) {
  SeededRng rng(5);
  const auto c = small_config(4, 6, 16);
  const auto p = random_params(rng, c);
  const auto h = rng.normal_matrix(10, 4, 1.0), x0 = rng.normal_matrix(10, 4, 1.0);
  EXPECT_TRUE(bitwise_equal(forward_sequential(h, x0, p, c, {}).output, frozen_mlp(h, p)));
}

TEST(Sequential, ZeroKernelOrZeroEtaEqualsFrozenMlp) {
  SeededRng rng(6);
  auto c = small_config(5, 7, 4);
  auto p = random_params(rng, c);
  const auto h = rng.normal_matrix(37, 5, 1.0), x0 = rng.normal_matrix(37, 5, 1.0);
  const auto mask = docs_at(37, {9, 20});
  auto zero_kernel = p;
  zero_kernel.conv_kernel.fill(0.0);
  EXPECT_TRUE(bitwise_equal(forward_sequential(h, x0, zero_kernel, c, mask).output, frozen_mlp(h, p)));
  c.eta = 0.0;
  EXPECT_TRUE(bitwise_equal(forward_sequential(h, x0, p, c, mask).output, frozen_mlp(h, p)));
}

TEST(Sequential, LengthMismatchThrows) {
  SeededRng rng(7);
  const auto c = small_config(4, 6, 4);
  const auto p = random_params(rng, c);
  EXPECT_THROW(forward_sequential(RealMatrix(5, 4), RealMatrix(6, 4), p, c, {}), Error);
  EXPECT_THROW(forward_sequential(RealMatrix(5, 4), RealMatrix(5, 4), p, c, docs_at(4, {})), Error);
}

TEST(Sequential, FinalStateIsSumOfChunkDeltas) {
  SeededRng rng(8);
  const auto c = small_config(4, 6, 5);
  const auto p = random_params(rng, c);
  const auto h = rng.normal_matrix(23, 4, 1.0), x0 = rng.normal_matrix(23, 4, 1.0);
  const auto out = forward_sequential(h, x0, p, c, {});
  const auto z = compute_preactivation(h, p);
  RealMatrix s;
  for (std::size_t b = 0; b < 23; b += 5) {
    const std::size_t e = std::min<std::size_t>(b + 5, 23);
    const auto dw = chunk_delta(compute_target(slice_rows(x0, b, e), p, c), slice_rows(z, b, e));
    s = s.empty() ? dw : add(s, dw);
  }
  EXPECT_EQ(out.state.chunks_seen, 5u);
  EXPECT_TRUE(bitwise_equal(out.state.delta, s));
  EXPECT_TRUE(bitwise_equal(out.state.effective, add(p.w_down0, scale(s, c.eta))));
}

struct ScanCase {
  std::size_t d, f, chunk, n;
};

TEST(Scan, SerialOrderIsBitwiseSequential) {
  SeededRng rng(9);
  for (const ScanCase sc : {ScanCase{32, 32, 64, 64 * 64}, ScanCase{6, 9, 7, 100}, ScanCase{4, 4, 1, 9}}) {
    const auto c = small_config(sc.d, sc.f, sc.chunk);
    const auto p = random_params(rng, c);
    const auto h = rng.normal_matrix(sc.n, sc.d, 1.0), x0 = rng.normal_matrix(sc.n, sc.d, 1.0);
    for (const auto& mask : {BoundaryMask{}, docs_at(sc.n, {sc.n / 3, sc.n / 3 + 1, sc.n / 2})}) {
      const auto seq = forward_sequential(h, x0, p, c, mask);
      for (int workers : {1, 3}) {
        const auto ser = forward_scan(h, x0, p, c, mask, ScanMode::SerialOrder, workers);
        EXPECT_TRUE(bitwise_equal(ser.output, seq.output));
        EXPECT_TRUE(bitwise_equal(ser.state.delta, seq.state.delta));
        const auto tree = forward_scan(h, x0, p, c, mask, ScanMode::Tree, workers);
        EXPECT_LE(max_abs_diff(tree.output, seq.output), 1e-10);
      }
    }
  }
}

TEST(Scan, DocumentSuffixMatchesFreshRun) {
  SeededRng rng(10);
  const auto c = small_config(5, 8, 8);
  const auto p = random_params(rng, c);
  const std::size_t n = 64, cut = 32;  // boundary at chunk 5 of 8 (1-based)
  const auto h = rng.normal_matrix(n, 5, 1.0), x0 = rng.normal_matrix(n, 5, 1.0);
  const auto full = forward_scan(h, x0, p, c, docs_at(n, {cut}), ScanMode::SerialOrder);
  const auto fresh = forward_sequential(slice_rows(h, cut, n), slice_rows(x0, cut, n), p, c, {});
  EXPECT_TRUE(bitwise_equal(slice_rows(full.output, cut, n), fresh.output));
}

TEST(Scan, SingleChunkIsFrozen) {
  SeededRng rng(11);
  const auto c = small_config(4, 4, 32);
  const auto p = random_params(rng, c);
  const auto h = rng.normal_matrix(20, 4, 1.0);
  EXPECT_TRUE(bitwise_equal(forward_scan(h, h, p, c, {}, ScanMode::Tree).output, frozen_mlp(h, p)));
}

TEST(Prefix, SerialAndTreeAgree) {
  SeededRng rng(12);
  std::vector<RealMatrix> d;
  for (int i = 0; i < 13; ++i) d.push_back(rng.normal_matrix(2, 3, 1.0));
  const auto s = exclusive_prefix_serial(d);
  const auto t = exclusive_prefix_tree(d, 2);
  ASSERT_EQ(s.size(), 13u);
  EXPECT_FALSE(s[0].has_value());
  EXPECT_FALSE(t[0].has_value());
  for (std::size_t i = 1; i < 13; ++i) EXPECT_LE(max_abs_diff(*s[i], *t[i]), 1e-13);
  EXPECT_TRUE(bitwise_equal(*s[1], d[0]));
}

TEST(Causality, TokenOnlyAffectsLaterRows) {
  SeededRng rng(13);
  const auto c = small_config(4, 6, 5);
  const auto p = random_params(rng, c);
  const std::size_t n = 23;
  const auto h = rng.normal_matrix(n, 4, 1.0), x0 = rng.normal_matrix(n, 4, 1.0);
  const auto base = forward_sequential(h, x0, p, c, {}).output;
  for (std::size_t q = 0; q < n; ++q) {
    RealMatrix h2 = h, x2 = x0;
    for (double& v : h2.row(q)) v += 1.0;
    for (double& v : x2.row(q)) v -= 2.0;
    const auto o = forward_sequential(h2, x2, p, c, {}).output;
    EXPECT_TRUE(bitwise_equal(slice_rows(o, 0, q), slice_rows(base, 0, q))) << "q=" << q;
  }
}

TEST(Causality, LookAheadOnlyReachesLaterChunks) {
  SeededRng rng(14);
  const auto c = small_config(4, 6, 5);
  const auto p = random_params(rng, c);
  const auto h = rng.normal_matrix(15, 4, 1.0), x0 = rng.normal_matrix(15, 4, 1.0);
  const auto base = forward_sequential(h, x0, p, c, {}).output;
  RealMatrix x2 = x0;
  for (double& v : x2.row(7)) v += 3.0;  // changes only the target of chunk 1
  const auto o = forward_sequential(h, x2, p, c, {}).output;
  EXPECT_TRUE(bitwise_equal(slice_rows(o, 0, 10), slice_rows(base, 0, 10)));
  EXPECT_GT(max_abs_diff(slice_rows(o, 10, 15), slice_rows(base, 10, 15)), 0.0);
}

TEST(Documents, AppendingDocumentsLeavesEarlierOnesAlone) {
  SeededRng rng(15);
  const auto c = small_config(4, 6, 4);
  const auto p = random_params(rng, c);
  const auto h = rng.normal_matrix(30, 4, 1.0), x0 = rng.normal_matrix(30, 4, 1.0);
  const auto alone = forward_sequential(slice_rows(h, 0, 11), slice_rows(x0, 0, 11), p, c, {});
  const auto joined = forward_sequential(h, x0, p, c, docs_at(30, {11, 17}));
  EXPECT_TRUE(bitwise_equal(slice_rows(joined.output, 0, 11), alone.output));
}

TEST(Stream, MatchesBatchBitwiseWithReset) {
  SeededRng rng(16);
  auto c = small_config(6, 10, 8);
  c.clip_tau = 5.0;
  const auto p = random_params(rng, c);
  const std::size_t n = 300, cut = 141;
  const auto h = rng.normal_matrix(n, 6, 1.0), x0 = rng.normal_matrix(n, 6, 1.0);
  const auto batch = forward_sequential(h, x0, p, c, docs_at(n, {cut})).output;
  FastWeightState st = FastWeightState::zero(6, 10);
  for (std::size_t t = 0; t < n; ++t) {
    const auto o = stream_step(h.row(t), x0.row(t), st, p, c, t == cut);
    for (std::size_t j = 0; j < 6; ++j) ASSERT_EQ(o(0, j), batch(t, j)) << "t=" << t;
  }
}

TEST(Stream, FirstTokenUsesSlowWeight) {
  SeededRng rng(17);
  const auto c = small_config(4, 6, 2);
  const auto p = random_params(rng, c);
  FastWeightState st = FastWeightState::zero(4, 6);
  const auto h = rng.normal_matrix(5, 4, 1.0);
  for (std::size_t t = 0; t < 5; ++t) stream_step(h.row(t), h.row(t), st, p, c, false);
  EXPECT_GT(st.chunks_seen, 0u);
  const auto o = stream_step(h.row(0), h.row(0), st, p, c, true);
  EXPECT_TRUE(bitwise_equal(o, frozen_mlp(slice_rows(h, 0, 1), p)));
  EXPECT_EQ(st.chunks_seen, 0u);
}

TEST(Config, Validation) {
  TttLayerConfig c;
  c.chunk_size = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.eta = -1.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.clip_tau = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.conv_offsets = {0, 0};
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(parse_activation("silu"), Activation::SiLU);
  EXPECT_EQ(parse_target_source(to_string(TargetSource::HiddenState)), TargetSource::HiddenState);
  EXPECT_THROW(parse_activation("relu6"), Error);
}

TEST(Segments, ChunksRestartAtDocuments) {
  const auto docs = document_segments(docs_at(10, {3}), 10);
  ASSERT_EQ(docs.size(), 2u);
  const auto ch = chunk_segments(docs, 4);
  ASSERT_EQ(ch.size(), 3u);
  EXPECT_EQ(ch[0].end, 3u);
  EXPECT_EQ(ch[1].begin, 3u);
  EXPECT_EQ(ch[1].end, 7u);
  EXPECT_EQ(ch[2].end, 10u);
  BoundaryMask bad{{0, 1, 0}};
  EXPECT_THROW(bad.validate(3), Error);
}

}  // namespace
}  // namespace iptt
