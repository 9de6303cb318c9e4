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

// Run configuration shared by the command-line tool and the acceptance
// suite. Every setting has a dotted key ("model.d_model", "ttt.eta", ...)
// that can be given in a JSON file, flat or nested, or as a flag override.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "iptt/experiments.hpp"
#include "iptt/model.hpp"
#include "iptt/training.hpp"

namespace iptt {

struct InductionRun {
  InductionSettings settings;
  std::size_t trials = 1000;
  std::uint64_t seed = 1;
};

struct EvalSettings {
  std::optional<std::size_t> block;  // default: the recall query section length
  std::vector<std::size_t> prefixes{256, 512, 1024, 2048};
  std::size_t batch = 1;
};

struct AblationSettings {
  std::vector<std::string> variants{"full", "no-conv", "no-proj", "reconstruction"};
  std::vector<std::size_t> chunk_sweep{64, 256, 512, 1024};
  std::vector<std::size_t> ttt_every_sweep{1, 2, 4};
};

struct BenchSettings {
  std::size_t chunks = 64;
  std::vector<int> workers{1, 2, 4};
  std::size_t repeats = 3;
  std::size_t d_model = 64;
  std::size_t d_ff = 512;
  std::size_t chunk_size = 64;
  std::uint64_t seed = 1;
};

struct CausalitySettings {
  std::size_t length = 512;
  std::vector<std::size_t> positions;  // empty: 0, 1, C-1, C, C+1, n-1
  std::uint64_t seed = 1;
};

/// Model shape for the gradient check; the remaining model.* and ttt.*
/// settings are taken from the main config.
struct GradCheckSettings {
  double h = 1e-5;
  double tolerance = 1e-5;
  std::size_t vocab_size = 32;
  std::size_t d_model = 16;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_ff = 24;
  std::size_t ttt_every = 2;
  std::size_t chunk_size = 8;
  double eta = 0.3;
  double init_std = 0.3;  // small weights leave gradients below finite-difference noise
  std::size_t seq_len = 0;  // 0: two TTT chunks
  std::uint64_t seed = 1;
};

struct RunConfig {
  ModelConfig model;  // includes the ttt.* section
  TrainConfig train;
  InductionRun induction;
  RecallExperiment recall;
  EvalSettings eval;
  AblationSettings ablation;
  BenchSettings bench;
  CausalitySettings causality;
  GradCheckSettings gradcheck;

  /// Cross-field validation; errors name every field involved.
  void validate() const;
  /// Block length used by sliding-window evaluation.
  std::size_t eval_block() const;
  /// Eval documents padded to the longest prefix plus the block.
  RecallExperiment recall_for_eval() const;
  /// The model used by the gradient check.
  ModelConfig gradcheck_model() const;
  /// The layer used by the scan benchmark.
  TttLayerConfig bench_layer() const;
  /// Nested JSON of every effective value.
  std::string to_json() const;
};

/// One settable key with its help text and current value rendered for display.
struct ConfigKeyInfo {
  std::string key;
  std::string help;
  std::string value;
};

/// Every key, in documentation order, with values taken from cfg.
std::vector<ConfigKeyInfo> config_keys(const RunConfig& cfg = {});

/// Parses JSON text (flat dotted keys, nested sections or a mix), then applies
/// key/value overrides given as flag text, then validates. Unknown keys and
/// keys set twice are errors naming the key.
RunConfig parse_config(std::string_view json_text,
                       const std::vector<std::pair<std::string, std::string>>& overrides = {});

/// Sets one key from flag text, e.g. ("ttt.eta", "0.5") or ("eval.prefixes", "256,2048").
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& text);

}  // namespace iptt
