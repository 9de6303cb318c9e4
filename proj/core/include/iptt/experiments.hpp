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

// Verification experiments: the induction-head logit bench, the synthetic
// key-value recall corpus, sliding-window perplexity, ablations, the
// causality probe and the scan benchmark.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iptt/model.hpp"
#include "iptt/rng.hpp"
#include "iptt/training.hpp"
#include "iptt/ttt_layer.hpp"

namespace iptt {

// Induction-head logit bench ------------------------------------------------

enum class TargetKind { LmAligned, Reconstruction };
std::string_view to_string(TargetKind k);

/// How embeddings are built when vocab > d_model.
enum class EmbeddingMode {
  Auto,       // orthonormal when vocab <= d_model, else Random
  Orthonormal,
  Random,     // unit vectors, resampled until coherence <= epsilon_cap
  FitToCap,   // random directions scaled so the largest |E_i . E_j| equals epsilon_cap
};
std::string_view to_string(EmbeddingMode m);
EmbeddingMode parse_embedding_mode(std::string_view s);

struct InductionSettings {
  std::size_t vocab = 256;
  std::size_t d_model = 64;
  std::size_t d_ff = 64;
  double epsilon_cap = 0.05;
  double c_align = 1.0;
  double eta = 0.1;
  std::size_t prior_len = 32;  // query position n; prior positions are 0 .. n-1
  EmbeddingMode embedding = EmbeddingMode::Auto;
  std::size_t max_resample = 200;
  bool zero_unrelated = false;  // drop every prior term except t*

  void validate() const;
};

/// One instance of the setup: token x_{t*} = k*, x_{t*+1} = v*, x_n = k*.
/// Rows 0..n of z hold the MLP activations; prior rows t != t* carry a
/// Rademacher sign in signs[t].
struct InductionInstance {
  RealMatrix embedding;  // vocab x d_model
  std::size_t t_star = 0;
  std::size_t n = 0;
  TokenId k_star = 0;
  TokenId v_star = 0;
  std::vector<TokenId> tokens;  // n + 1 entries
  RealMatrix z;                 // (n + 1) x d_ff
  std::vector<double> signs;    // n entries, 1 at t*
  double epsilon = 0.0;         // max off-diagonal |E_i . E_j|
  double c_norm = 0.0;          // min ||E_w||
  double c_align = 0.0;         // z_{t*} . z_n
  double eta = 0.0;
  bool zero_unrelated = false;
};

/// Builds the fixed part of an instance (embeddings, z_n, z_{t*}) and draws
/// one realization of the unrelated positions.
InductionInstance build_induction_instance(SeededRng& rng, const InductionSettings& s);
/// Redraws the unrelated tokens, activations and signs in place.
void resample_unrelated(InductionInstance& inst, SeededRng& rng);

/// Exact logit change E_w^T dW z_n for every w, with dW = eta sum_t s_t V_t z_t^T.
std::vector<double> logit_delta(const InductionInstance& inst, TargetKind kind);

/// The same quantity split into the t* term and the remainder, which has
/// zero expectation over the signs.
struct LogitDecomposition {
  std::vector<double> t_star_term;
  std::vector<double> remainder;
};
LogitDecomposition decompose_logit_delta(const InductionInstance& inst, TargetKind kind);

struct BoundCheck {
  std::string name;
  double observed = 0.0;  // mean (or max |mean|) being compared
  double bound = 0.0;     // exact bound from the instance constants
  double se = 0.0;
  double tolerance = 0.0;  // 3 standard errors
  bool pass = false;
};

struct TheoremReport {
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  InductionSettings settings;
  double epsilon = 0.0, c_norm = 0.0, c_align = 0.0, eta = 0.0;
  double lm_mean = 0.0, lm_se = 0.0;        // LM-aligned, logit of v*
  double rec_mean = 0.0, rec_se = 0.0;      // reconstruction, logit of v*
  double lm_other_max_abs_mean = 0.0;       // max over w != v*
  TokenId lm_other_argmax = 0;
  double lm_t_star_term = 0.0;              // deterministic part of lm_mean
  double lm_remainder_mean = 0.0;
  double rec_t_star_term = 0.0;
  double rec_remainder_mean = 0.0;
  double bound_correct = 0.0;               // eta c_norm^2 c_align
  double bound_other = 0.0;                 // eta epsilon c_align
  std::vector<BoundCheck> checks;           // correct_logit, other_logits, reconstruction
  bool pass = false;

  std::string to_json() const;
};

TheoremReport theorem_bench(const InductionSettings& s, std::size_t trials, std::uint64_t seed);

// Synthetic key-value recall ------------------------------------------------

/// Each document lists key/value definitions "Kv ", a line break, filler
/// digits, a line break, then queries "Kv " of previously defined keys. Keys, values and filler use disjoint byte sets,
/// so a query value is predictable only by recalling its definition.
struct RecallSettings {
  std::size_t n_keys = 16;           // definitions per document
  std::size_t key_alphabet = 26;     // 'A'..
  std::size_t value_alphabet = 26;   // 'a'..
  std::size_t filler_alphabet = 10;  // '0'..
  std::size_t min_filler = 256;
  std::size_t max_filler = 768;
  std::size_t n_queries = 16;        // each query repeats one defined key
  /// When set, leading filler pads every document to exactly this length.
  std::optional<std::size_t> total_len;

  void validate() const;
  /// Length of the definitions, section breaks and queries.
  std::size_t base_len() const;
  /// Length of the final query section.
  std::size_t query_len() const { return 3 * n_queries; }
};

struct RecallDocument {
  std::string text;
  std::vector<std::size_t> value_positions;  // byte offsets of query values
};

RecallDocument make_recall_document(SeededRng& rng, const RecallSettings& s,
                                    std::size_t filler_len);
std::vector<RecallDocument> make_recall_documents(const RecallSettings& s, std::size_t count,
                                                  std::uint64_t seed);
Corpus recall_corpus(std::span<const RecallDocument> docs);
/// Held-out documents of an experiment (eval settings, seed derived from
/// the data seed).
struct RecallExperiment;
std::vector<RecallDocument> recall_eval_documents(const RecallExperiment& exp);

/// Fraction of query values whose argmax prediction is correct, pooled over
/// documents.
double recall_accuracy(const ModelParams& p, const ModelConfig& cfg,
                       std::span<const RecallDocument> docs);

// Sliding-window perplexity --------------------------------------------------

struct PplPoint {
  std::size_t prefix = 0;
  double nll = 0.0;  // mean over block tokens
  double ppl = 0.0;
  std::size_t tokens = 0;
};

/// For each prefix length L, the perplexity of the final `block` tokens of
/// every sequence given the L tokens before them, pooled over sequences.
/// `batch` sequences are packed into one forward pass with a document mask.
std::vector<PplPoint> sliding_window_ppl(const ModelParams& p, const ModelConfig& cfg,
                                         std::span<const std::vector<TokenId>> sequences,
                                         std::size_t block, std::span<const std::size_t> prefixes,
                                         std::size_t batch = 1);

// Ablations ------------------------------------------------------------------

/// Target-construction variant of the TTT layers.
enum class TargetVariant {
  Full,            // look-ahead conv on X0, trainable W_target
  NoConv,          // fixed identity tap at offset 0 on X0, trainable W_target
  NoProj,          // trainable look-ahead conv, W_target fixed to identity
  Reconstruction,  // fixed identity tap on the layer input H, trainable W_target
};
std::string_view to_string(TargetVariant v);
TargetVariant parse_target_variant(std::string_view s);

/// Applies a variant to the configs and to freshly initialized parameters.
void apply_variant(TargetVariant v, ModelConfig& model, TrainConfig& train);
void apply_variant_params(TargetVariant v, const ModelConfig& model, ModelParams& params);

struct AblationSpec {
  std::string name;  // e.g. "full", "chunk=64", "ttt_every=2"
  TargetVariant variant = TargetVariant::Full;
  std::optional<std::size_t> chunk_size;
  std::optional<std::size_t> ttt_every;
};

/// Expands names such as "full", "no-conv", "no-proj", "reconstruction",
/// "chunk=N", "ttt_every=N", "chunk-sweep" and "ttt_every-sweep".
std::vector<AblationSpec> expand_variants(std::span<const std::string> names,
                                          std::span<const std::size_t> chunk_sweep,
                                          std::span<const std::size_t> ttt_every_sweep);

struct RecallExperiment {
  RecallSettings train_docs;
  RecallSettings eval_docs;
  std::size_t n_train_docs = 512;
  std::size_t n_eval_docs = 8;
  std::uint64_t data_seed = 1;
};

struct AblationRow {
  std::string name;
  double final_train_loss = 0.0;  // mean over the last 10% of steps
  double eval_loss = 0.0;         // NTP loss on held-out documents
  double recall_accuracy = 0.0;
  std::size_t steps = 0;
};

struct TrainedModel {
  ModelConfig model;
  TrainConfig train;
  TrainState state;
  std::vector<StepMetrics> metrics;
};

/// Trains one configuration on the recall corpus.
TrainedModel train_on_recall(const ModelConfig& model, const TrainConfig& train,
                             const RecallExperiment& exp, TargetVariant variant,
                             const StepCallback& on_step = {});

AblationRow evaluate_recall(const TrainedModel& m, const RecallExperiment& exp,
                            const std::string& name);

std::vector<AblationRow> ablation_run(const ModelConfig& base, const TrainConfig& train,
                                      const RecallExperiment& exp,
                                      std::span<const AblationSpec> variants,
                                      const StepCallback& on_step = {});

std::string ablation_csv(std::span<const AblationRow> rows);
std::string ppl_csv(std::span<const PplPoint> rows);

// Causality probe ------------------------------------------------------------

struct CausalityReport {
  std::size_t flip_position = 0;
  std::optional<std::size_t> first_changed;  // empty when nothing changed
  bool pass = false;
};

/// Replaces token q with a different id and reports the first logit row
/// that differs bitwise.
CausalityReport causality_probe(const ModelParams& p, const ModelConfig& cfg,
                                std::span<const TokenId> tokens, std::size_t q,
                                const BoundaryMask& mask = {});

// Gradient check -------------------------------------------------------------

/// Parameters with every TTT path active: random conv kernels and W_target
/// plus perturbed norm gains, so no gradient is trivially zero.
ModelParams active_model_params(const ModelConfig& cfg, std::uint64_t seed);

/// Central-difference check of the full-model NTP loss gradient for every
/// parameter, on random tokens of length seq_len (0 means two TTT chunks).
ad::GradientReport model_grad_check(const ModelConfig& cfg, std::size_t seq_len,
                                    std::uint64_t seed, double h, double tolerance);
std::string grad_check_json(const ad::GradientReport& r, double h);

// Scan benchmark -------------------------------------------------------------

struct ScanBenchRow {
  std::string mode;  // "sequential", "scan_serial", "scan_tree"
  int workers = 1;
  double seconds = 0.0;
  double speedup = 1.0;       // sequential time / this time
  double max_abs_diff = 0.0;  // against sequential
  bool bitwise_equal = false;
};

std::vector<ScanBenchRow> scan_bench(const TttLayerConfig& cfg, std::size_t n_chunks,
                                     std::span<const int> workers, std::uint64_t seed,
                                     std::size_t repeats = 3);
std::string scan_bench_csv(std::span<const ScanBenchRow> rows);

}  // namespace iptt
