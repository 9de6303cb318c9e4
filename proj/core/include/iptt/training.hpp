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

#pragma once

// Byte-level corpus handling, AdamW, the training loop and the checkpoint
// file format.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "iptt/model.hpp"

namespace iptt {

// Tokenizer -----------------------------------------------------------------

inline constexpr TokenId kSeparator = 256;   // document separator id
inline constexpr std::size_t kByteVocab = 257;

/// One id per byte.
std::vector<TokenId> tokenize(std::string_view bytes);
/// Inverse of tokenize. Separator and out-of-range ids are rejected.
std::string detokenize(std::span<const TokenId> ids);

/// Document ids for a token stream: each separator opens a new document.
BoundaryMask mask_from_separators(std::span<const TokenId> tokens);

struct Corpus {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> doc_starts;  // index of each document's first token
};

/// Joins documents with a separator in front of every document but the first.
Corpus corpus_from_documents(std::span<const std::string> documents);
/// Reads one file, or every regular file of a directory in lexicographic
/// filename order, each file being one document.
Corpus load_corpus(const std::filesystem::path& path);

// Optimizer -----------------------------------------------------------------

enum class Schedule { Constant, Cosine };
enum class SampleMode {
  Random,           // windows start anywhere
  DocumentAligned,  // windows start at a document start
};

std::string_view to_string(Schedule s);
Schedule parse_schedule(std::string_view s);
std::string_view to_string(SampleMode m);
SampleMode parse_sample_mode(std::string_view s);

struct TrainConfig {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  std::optional<std::size_t> warmup_steps;  // default: 1% of total_steps
  std::size_t total_steps = 200;
  std::size_t batch_tokens = 512;
  std::size_t seq_len = 256;
  std::uint64_t seed = 0;
  Schedule schedule = Schedule::Constant;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of learning_rate
  SampleMode sample_mode = SampleMode::Random;
  bool train_conv = true;
  bool train_target = true;

  void validate() const;
  std::size_t warmup() const;
  std::size_t sequences_per_step() const;
};

/// Learning rate for a 1-based step.
double learning_rate_at(const TrainConfig& cfg, std::size_t step);

/// Whether a named parameter is updated under cfg.
bool is_trainable(const std::string& name, const TrainConfig& cfg);

struct AdamMoments {
  std::vector<RealMatrix> m;
  std::vector<RealMatrix> v;
};

/// One AdamW update at 1-based step. Decay multiplies theta by (1 - lr * wd)
/// before the moment update. Entries with decay[i] == false skip the decay and
/// entries with frozen[i] == true are left untouched; empty masks mean "decay
/// everything" and "freeze nothing".
void adamw_step(std::span<RealMatrix* const> params, std::span<const RealMatrix> grads,
                AdamMoments& moments, std::size_t step, double lr, const TrainConfig& cfg,
                const std::vector<bool>& decay = {}, const std::vector<bool>& frozen = {});

// Training loop -------------------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  double lr = 0.0;
};

struct TrainState {
  ModelParams params;
  AdamMoments moments;  // in for_each_param order
  std::size_t step = 0;  // completed steps
};

/// Fresh parameters drawn from the seed, zero moments.
TrainState init_train_state(const ModelConfig& model, const TrainConfig& cfg);

/// The token windows of one step, a pure function of (seed, step, corpus).
std::vector<std::vector<TokenId>> sample_batch(const Corpus& corpus, const TrainConfig& cfg,
                                               std::size_t step);

/// Mean NTP loss over the sequences and its gradient, in for_each_param order.
double loss_and_grads(const ModelParams& params, const ModelConfig& model,
                      std::span<const std::vector<TokenId>> batch,
                      std::vector<RealMatrix>* grads);

using StepCallback = std::function<void(const StepMetrics&)>;

/// Runs steps state.step + 1 .. until_step.
void train(TrainState& state, const ModelConfig& model, const TrainConfig& cfg,
           const Corpus& corpus, std::size_t until_step, const StepCallback& on_step = {});

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

// Checkpoints ---------------------------------------------------------------
//
// Layout, all integers little-endian:
//   "IPTT" | u32 version (1) | u32 n + n bytes of UTF-8 JSON config |
//   u32 tensor count | per tensor: u32 n + n bytes of UTF-8 name,
//   u8 dtype (0 = f64), u32 rank, rank x u64 dims, f64 row-major payload.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  RealMatrix value;
};

struct Checkpoint {
  std::string config_json;
  std::vector<NamedTensor> tensors;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Parameters under their names plus "adam.m.<name>" / "adam.v.<name>". The
/// config blob is {"run": run_json, "step": state.step}.
Checkpoint make_checkpoint(const TrainState& state, const ModelConfig& model,
                           const std::string& run_json);
/// Rebuilds a state from make_checkpoint output. run_json receives the run
/// config text when non-null.
TrainState restore_checkpoint(const Checkpoint& ckpt, const ModelConfig& model,
                              std::string* run_json = nullptr);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace iptt
