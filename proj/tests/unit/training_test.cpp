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

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "iptt/training.hpp"

namespace iptt {
namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.vocab_size = kByteVocab;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 24;
  c.ttt_every = 2;
  c.ttt.chunk_size = 8;
  c.ttt.eta = 0.1;
  return c;
}

TrainConfig small_train() {
  TrainConfig t;
  t.total_steps = 6;
  t.seq_len = 24;
  t.batch_tokens = 48;
  t.seed = 11;
  t.schedule = Schedule::Cosine;
  t.warmup_steps = 2;
  return t;
}

Corpus small_corpus() {
  const std::vector<std::string> docs{"the quick brown fox jumps over the lazy dog. ",
                                      "pack my box with five dozen liquor jugs!",
                                      "sphinx of black quartz, judge my vow; 0123456789"};
  return corpus_from_documents(docs);
}

bool same_params(const ModelParams& a, const ModelParams& b, const ModelConfig& cfg) {
  std::vector<const RealMatrix*> pa, pb;
  for_each_param(a, cfg, [&](const std::string&, const RealMatrix& m) { pa.push_back(&m); });
  for_each_param(b, cfg, [&](const std::string&, const RealMatrix& m) { pb.push_back(&m); });
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!bitwise_equal(*pa[i], *pb[i])) return false;
  }
  return true;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("iptt_training_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Tokenizer and corpus --------------------------------------------------------

TEST(Tokenizer, RoundTripsEveryByte) {
  std::string all;
  for (int b = 0; b < 256; ++b) all.push_back(static_cast<char>(b));
  const auto ids = tokenize(all);
  ASSERT_EQ(ids.size(), 256u);
  for (int b = 0; b < 256; ++b) EXPECT_EQ(ids[static_cast<std::size_t>(b)], b);
  EXPECT_EQ(detokenize(ids), all);
}

TEST(Tokenizer, RoundTripsRandomStrings) {
  SeededRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s(rng.below(100), '\0');
    for (char& c : s) c = static_cast<char>(rng.below(256));
    EXPECT_EQ(detokenize(tokenize(s)), s);
  }
}

TEST(Tokenizer, RejectsSeparatorAndOutOfRangeIds) {
  const std::vector<TokenId> sep{65, kSeparator};
  EXPECT_THROW(detokenize(sep), Error);
  const std::vector<TokenId> neg{-1};
  EXPECT_THROW(detokenize(neg), Error);
}

TEST(Corpus, SeparatorOpensEachLaterDocument) {
  const std::vector<std::string> docs{"ab", "c", "de"};
  const Corpus c = corpus_from_documents(docs);
  const std::vector<TokenId> expect{'a', 'b', kSeparator, 'c', kSeparator, 'd', 'e'};
  EXPECT_EQ(c.tokens, expect);
  EXPECT_EQ(c.doc_starts, (std::vector<std::size_t>{0, 2, 4}));
  const BoundaryMask m = mask_from_separators(c.tokens);
  EXPECT_EQ(m.doc_ids, (std::vector<std::int64_t>{0, 0, 1, 1, 2, 2, 2}));
}

TEST(Corpus, DirectoryIsReadInLexicographicOrder) {
  const auto dir = temp_dir("corpus");
  write_file(dir / "b.txt", "second");
  write_file(dir / "a.txt", "first");
  write_file(dir / "c.txt", "third");
  const Corpus c = load_corpus(dir);
  const std::vector<std::string> docs{"first", "second", "third"};
  EXPECT_EQ(c.tokens, corpus_from_documents(docs).tokens);
  const Corpus single = load_corpus(dir / "b.txt");
  EXPECT_EQ(single.tokens, tokenize("second"));
  EXPECT_THROW(load_corpus(dir / "missing"), Error);
  std::filesystem::remove_all(dir);
}

// Optimizer ------------------------------------------------------------------

TEST(AdamW, FirstStepMovesByLearningRateAgainstTheGradientSign) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  RealMatrix p = RealMatrix::from_rows({{1.0, -2.0, 0.5}});
  const std::vector<RealMatrix> g{RealMatrix::from_rows({{0.3, -4.0, 1e-3}})};
  RealMatrix* ptrs[] = {&p};
  AdamMoments mom;
  adamw_step(ptrs, g, mom, 1, 0.01, cfg);
  // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(p(0, 0), 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p(0, 1), -2.0 + 0.01, 1e-9);
  EXPECT_NEAR(p(0, 2), 0.5 - 0.01, 1e-7);
}

TEST(AdamW, ZeroGradientWithoutDecayLeavesParamsUnchanged) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  RealMatrix p = RealMatrix::from_rows({{1.5, -0.25}, {3.0, 7.0}});
  const RealMatrix before = p;
  const std::vector<RealMatrix> g{RealMatrix(2, 2)};
  RealMatrix* ptrs[] = {&p};
  AdamMoments mom;
  for (std::size_t step = 1; step <= 3; ++step) adamw_step(ptrs, g, mom, step, 0.1, cfg);
  EXPECT_TRUE(bitwise_equal(p, before));
}

TEST(AdamW, ZeroGradientWithDecayScalesExactly) {
  TrainConfig cfg;
  cfg.weight_decay = 0.1;
  const double lr = 0.01;
  RealMatrix p = RealMatrix::from_rows({{1.5, -0.25, 3.0}});
  const RealMatrix before = p;
  const std::vector<RealMatrix> g{RealMatrix(1, 3)};
  RealMatrix* ptrs[] = {&p};
  AdamMoments mom;
  adamw_step(ptrs, g, mom, 1, lr, cfg);
  const double shrink = 1.0 - lr * cfg.weight_decay;
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(p(0, k)), std::bit_cast<std::uint64_t>(before(0, k) * shrink));
  }
}

TEST(AdamW, MasksSkipDecayAndFreeze) {
  TrainConfig cfg;
  cfg.weight_decay = 0.5;
  RealMatrix a = RealMatrix::from_rows({{2.0}});
  RealMatrix b = RealMatrix::from_rows({{2.0}});
  RealMatrix c = RealMatrix::from_rows({{2.0}});
  const std::vector<RealMatrix> g{RealMatrix(1, 1), RealMatrix(1, 1), RealMatrix::from_rows({{1.0}})};
  RealMatrix* ptrs[] = {&a, &b, &c};
  AdamMoments mom;
  adamw_step(ptrs, g, mom, 1, 0.1, cfg, {true, false, true}, {false, false, true});
  EXPECT_EQ(a(0, 0), 2.0 * (1.0 - 0.1 * 0.5));
  EXPECT_EQ(b(0, 0), 2.0);
  EXPECT_EQ(c(0, 0), 2.0);
}

TEST(AdamW, RejectsShapeMismatchAndStepZero) {
  TrainConfig cfg;
  RealMatrix p(2, 2);
  RealMatrix* ptrs[] = {&p};
  AdamMoments mom;
  const std::vector<RealMatrix> bad{RealMatrix(2, 3)};
  EXPECT_THROW(adamw_step(ptrs, bad, mom, 1, 0.1, cfg), Error);
  const std::vector<RealMatrix> good{RealMatrix(2, 2)};
  AdamMoments fresh;
  EXPECT_THROW(adamw_step(ptrs, good, fresh, 0, 0.1, cfg), Error);
}

TEST(Schedule, LinearWarmupThenCosineToFloor) {
  TrainConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.total_steps = 110;
  cfg.warmup_steps = 10;
  cfg.schedule = Schedule::Cosine;
  cfg.min_lr_ratio = 0.1;
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 1), 0.1);
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 5), 0.5);
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 10), 1.0);
  EXPECT_NEAR(learning_rate_at(cfg, 60), 0.55, 1e-12);
  EXPECT_NEAR(learning_rate_at(cfg, 110), 0.1, 1e-12);
  for (std::size_t s = 11; s < 110; ++s) {
    EXPECT_GE(learning_rate_at(cfg, s), learning_rate_at(cfg, s + 1));
  }
  cfg.schedule = Schedule::Constant;
  EXPECT_DOUBLE_EQ(learning_rate_at(cfg, 60), 1.0);
}

TEST(Schedule, DefaultWarmupIsOnePercent) {
  TrainConfig cfg;
  cfg.total_steps = 1000;
  EXPECT_EQ(cfg.warmup(), 10u);
}

// Loop -----------------------------------------------------------------------

TEST(Train, SameSeedGivesIdenticalTraces) {
  const ModelConfig m = small_model();
  const TrainConfig t = small_train();
  const Corpus c = small_corpus();
  std::string csv_a, csv_b;
  TrainState a = init_train_state(m, t), b = init_train_state(m, t);
  train(a, m, t, c, t.total_steps, [&](const StepMetrics& s) { csv_a += metrics_csv_row(s); });
  train(b, m, t, c, t.total_steps, [&](const StepMetrics& s) { csv_b += metrics_csv_row(s); });
  EXPECT_EQ(csv_a, csv_b);
  EXPECT_TRUE(same_params(a.params, b.params, m));
}

TEST(Train, ResumeFromCheckpointMatchesUninterruptedRun) {
  const ModelConfig m = small_model();
  const TrainConfig t = small_train();
  const Corpus c = small_corpus();
  std::vector<std::string> full_rows, resumed_rows;
  TrainState full = init_train_state(m, t);
  train(full, m, t, c, 6, [&](const StepMetrics& s) { full_rows.push_back(metrics_csv_row(s)); });

  TrainState part = init_train_state(m, t);
  train(part, m, t, c, 3, [&](const StepMetrics& s) { resumed_rows.push_back(metrics_csv_row(s)); });
  const std::string bytes = encode_checkpoint(make_checkpoint(part, m, "{}"));
  TrainState resumed = restore_checkpoint(decode_checkpoint(bytes), m);
  EXPECT_EQ(resumed.step, 3u);
  train(resumed, m, t, c, 6,
        [&](const StepMetrics& s) { resumed_rows.push_back(metrics_csv_row(s)); });
  EXPECT_EQ(full_rows, resumed_rows);
  EXPECT_TRUE(same_params(full.params, resumed.params, m));
}

TEST(Train, FrozenTensorsKeepTheirValues) {
  const ModelConfig m = small_model();
  TrainConfig t = small_train();
  t.train_conv = false;
  t.train_target = false;
  TrainState s = init_train_state(m, t);
  const RealMatrix target = s.params.layers[1].mlp.w_target;
  const RealMatrix kernel = s.params.layers[1].mlp.conv_kernel;
  const RealMatrix wq = s.params.layers[1].wq;
  train(s, m, t, small_corpus(), 3);
  EXPECT_TRUE(bitwise_equal(s.params.layers[1].mlp.w_target, target));
  EXPECT_TRUE(bitwise_equal(s.params.layers[1].mlp.conv_kernel, kernel));
  EXPECT_FALSE(bitwise_equal(s.params.layers[1].wq, wq));
}

TEST(Train, BatchIsAPureFunctionOfSeedAndStep) {
  TrainConfig t = small_train();
  const Corpus c = small_corpus();
  EXPECT_EQ(sample_batch(c, t, 4), sample_batch(c, t, 4));
  EXPECT_NE(sample_batch(c, t, 4), sample_batch(c, t, 5));
  t.sample_mode = SampleMode::DocumentAligned;
  t.seq_len = 10;
  for (std::size_t step = 1; step < 20; ++step) {
    for (const auto& seq : sample_batch(c, t, step)) {
      EXPECT_NE(seq.front(), kSeparator);
      const bool at_start = seq.front() == 't' || seq.front() == 'p' || seq.front() == 's';
      EXPECT_TRUE(at_start);
    }
  }
}

TEST(Train, MemorizesARepeatedSequence) {
  ModelConfig m;
  m.vocab_size = kByteVocab;
  m.d_model = 64;
  m.n_layers = 2;
  m.n_heads = 4;
  m.d_ff = 128;
  m.ttt_every = 2;
  m.ttt.chunk_size = 16;
  TrainConfig t;
  t.learning_rate = 1e-2;
  t.total_steps = 500;
  t.seq_len = 32;
  t.batch_tokens = 64;
  t.seed = 5;
  t.weight_decay = 0.0;
  SeededRng rng(21);
  std::string unit;
  for (int i = 0; i < 32; ++i) unit.push_back(static_cast<char>(rng.below(256)));
  std::string text;
  for (int r = 0; r < 64; ++r) text += unit;
  const Corpus c = corpus_from_documents(std::vector<std::string>{text});

  TrainState s = init_train_state(m, t);
  std::size_t below = 0;
  double last = INFINITY;
  train(s, m, t, c, t.total_steps, [&](const StepMetrics& x) {
    last = x.loss;
    if (below == 0 && x.loss < 0.05) below = x.step;
  });
  EXPECT_GT(below, 0u) << "final loss " << last;
  EXPECT_LE(below, 500u);
}

// Checkpoints ------------------------------------------------------------------

TEST(Checkpoint, HandComputedByteLayout) {
  Checkpoint ck;
  ck.config_json = "{}";
  ck.tensors.push_back({"w", RealMatrix::from_rows({{1.0, 2.0}, {-0.5, 0.0}})});
  const std::string bytes = encode_checkpoint(ck);
  std::vector<unsigned char> expect = {'I', 'P', 'T', 'T', 1, 0, 0, 0,  // magic, version
                                       2, 0, 0, 0, '{', '}',            // config
                                       1, 0, 0, 0,                      // tensor count
                                       1, 0, 0, 0, 'w',                 // name
                                       0,                               // dtype f64
                                       2, 0, 0, 0,                      // rank
                                       2, 0, 0, 0, 0, 0, 0, 0,          // rows
                                       2, 0, 0, 0, 0, 0, 0, 0};         // cols
  for (double v : {1.0, 2.0, -0.5, 0.0}) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) expect.push_back(static_cast<unsigned char>(bits >> (8 * b)));
  }
  ASSERT_EQ(bytes.size(), expect.size());
  EXPECT_EQ(std::memcmp(bytes.data(), expect.data(), expect.size()), 0);
  // The header is 44 bytes; the top byte of 1.0 (0x3FF0...) ends the first value.
  EXPECT_EQ(static_cast<unsigned char>(bytes[51]), 0x3F);
}

TEST(Checkpoint, RoundTripIsByteIdenticalAndKeepsOrder) {
  const ModelConfig m = small_model();
  const TrainConfig t = small_train();
  TrainState s = init_train_state(m, t);
  train(s, m, t, small_corpus(), 2);
  const Checkpoint ck = make_checkpoint(s, m, R"({"model":{"d_model":16}})");
  const auto dir = temp_dir("ckpt");
  write_checkpoint(dir / "a.iptt", ck);
  const Checkpoint back = read_checkpoint(dir / "a.iptt");
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
    EXPECT_TRUE(bitwise_equal(back.tensors[i].value, ck.tensors[i].value));
  }
  write_checkpoint(dir / "b.iptt", back);
  EXPECT_EQ(read_file(dir / "a.iptt"), read_file(dir / "b.iptt"));
  std::string run;
  const TrainState restored = restore_checkpoint(back, m, &run);
  EXPECT_EQ(run, R"({"model":{"d_model":16}})");
  EXPECT_TRUE(same_params(restored.params, s.params, m));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, NonAsciiNamesRoundTrip) {
  Checkpoint ck;
  ck.config_json = "{\"note\":\"\xC3\xA9t\xC3\xA9\"}";
  ck.tensors.push_back({"\xCE\xB8.\xE6\x9D\x83\xE9\x87\x8D", RealMatrix(1, 1, 3.0)});
  ck.tensors.push_back({"plain", RealMatrix(2, 1, -1.0)});
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back.config_json, ck.config_json);
  EXPECT_EQ(back.tensors[0].name, ck.tensors[0].name);
  EXPECT_EQ(back.tensors[1].name, "plain");
}

TEST(Checkpoint, RejectsBadMagicVersionAndTruncation) {
  Checkpoint ck;
  ck.config_json = "{}";
  ck.tensors.push_back({"w", RealMatrix(2, 2, 1.0)});
  const std::string good = encode_checkpoint(ck);
  std::string magic = good;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), Error);
  std::string version = good;
  version[4] = 2;
  EXPECT_THROW(decode_checkpoint(version), Error);
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, std::size_t{20}, good.size() - 1}) {
    EXPECT_THROW(decode_checkpoint(std::string_view(good).substr(0, cut)), Error) << cut;
  }
  EXPECT_THROW(decode_checkpoint(good + "x"), Error);
}

TEST(Checkpoint, TruncationErrorNamesTheField) {
  Checkpoint ck;
  ck.config_json = "{}";
  ck.tensors.push_back({"w", RealMatrix(2, 2, 1.0)});
  const std::string good = encode_checkpoint(ck);
  try {
    decode_checkpoint(std::string_view(good).substr(0, good.size() - 4));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
  }
}

TEST(Metrics, CsvHeaderAndRow) {
  EXPECT_EQ(metrics_csv_header(), "step,loss,grad_norm,lr\n");
  EXPECT_EQ(metrics_csv_row({3, 0.5, 2.0, 0.001}), "3,0.5,2,0.001\n");
}

}  // namespace
}  // namespace iptt
