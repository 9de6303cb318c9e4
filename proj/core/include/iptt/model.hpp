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

// Toy decoder-only transformer: pre-norm residual blocks with RoPE multi-head
// causal attention and a gated MLP, every ttt_every-th of which is an in-place
// TTT layer.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iptt/autodiff.hpp"
#include "iptt/numerics.hpp"
#include "iptt/rng.hpp"
#include "iptt/ttt_layer.hpp"

namespace iptt {

using TokenId = std::int32_t;

struct ModelConfig {
  std::size_t vocab_size = 257;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::optional<std::size_t> window;  // sliding-window width; empty = full attention
  double rope_base = 1e6;
  std::size_t ttt_every = 6;          // 0 = no TTT layers
  bool tie_embeddings = false;
  double norm_eps = 1e-6;
  double init_std = 0.02;
  TttLayerConfig ttt;                 // d_model / d_ff are taken from this struct

  void validate() const;
  bool is_ttt_layer(std::size_t layer) const;
  /// The layer config with d_model and d_ff filled in from the model.
  TttLayerConfig layer_config() const;
};

template <class T>
struct BasicBlockParams {
  T attn_norm;  // 1 x d_model
  T wq, wk, wv, wo;  // d_model x d_model each
  T mlp_norm;   // 1 x d_model
  BasicTttParams<T> mlp;  // w_target / conv_kernel are unset on frozen layers
};

template <class T>
struct BasicModelParams {
  T embedding;  // vocab x d_model
  std::vector<BasicBlockParams<T>> layers;
  T final_norm;  // 1 x d_model
  T unembed;     // vocab x d_model; unset when tied
};

using BlockParams = BasicBlockParams<RealMatrix>;
using ModelParams = BasicModelParams<RealMatrix>;

/// Visits every tensor in a fixed order with its checkpoint name. Unset
/// tensors (frozen-layer TTT weights, tied unembedding) are skipped.
void for_each_param(ModelParams& p, const ModelConfig& cfg,
                    const std::function<void(const std::string&, RealMatrix&)>& fn);
void for_each_param(const ModelParams& p, const ModelConfig& cfg,
                    const std::function<void(const std::string&, const RealMatrix&)>& fn);

/// Truncated-normal(init_std) weights, unit norm gains, zero conv kernels and
/// a W_target that is diagonal with Normal(0, init_std^2) entries.
ModelParams init_model(const ModelConfig& cfg, SeededRng& rng);
void validate_params(const ModelParams& p, const ModelConfig& cfg);

// Attention ----------------------------------------------------------------

struct AttentionSpec {
  std::size_t n_heads = 1;
  std::optional<std::size_t> window;
  std::vector<std::int64_t> doc_ids;  // empty = one document
};

/// Per-head softmax(q k^T / sqrt(d_head)) v restricted to keys j with
/// max(doc_start, t - window + 1) <= j <= t. q, k, v are n x d_model.
/// When probs is non-null the attention weights are stored for backward.
RealMatrix attention_core(const RealMatrix& q, const RealMatrix& k, const RealMatrix& v,
                          const AttentionSpec& spec, std::vector<double>* probs = nullptr);

/// Rotary embedding applied per head to consecutive channel pairs.
RealMatrix rope(const RealMatrix& x, std::span<const std::int64_t> positions, std::size_t n_heads,
                double base);

/// Position of each token inside its document.
std::vector<std::int64_t> document_positions(const BoundaryMask& mask, std::size_t n);

/// Full attention sublayer on X (already normalized): projections, RoPE,
/// masked attention, output projection.
RealMatrix causal_attention(const RealMatrix& x, const BlockParams& p, std::size_t n_heads,
                            std::optional<std::size_t> window, const BoundaryMask& mask,
                            double rope_base);

RealMatrix embed(const RealMatrix& table, std::span<const TokenId> tokens);

enum class TttPath { Sequential, ScanSerial, ScanTree };

/// One pre-norm residual block. x0 is the raw token embedding.
RealMatrix block_forward(const RealMatrix& x, const RealMatrix& x0, const BlockParams& p,
                         const ModelConfig& cfg, std::size_t layer, const BoundaryMask& mask,
                         TttPath path = TttPath::Sequential);

/// tokens -> logits (n x vocab). An empty mask means a single document.
RealMatrix model_forward(std::span<const TokenId> tokens, const ModelParams& p,
                         const ModelConfig& cfg, const BoundaryMask& mask = {},
                         TttPath path = TttPath::Sequential);

/// Loss weights for next-token prediction: position t predicts t + 1 and is
/// dropped when it is the last position of its document.
std::vector<double> ntp_weights(const BoundaryMask& mask, std::size_t n);

/// Mean cross-entropy of logits[t] against tokens[t + 1] over positions that
/// stay inside a document.
double ntp_loss(const RealMatrix& logits, std::span<const TokenId> tokens,
                const BoundaryMask& mask = {});

/// Weighted mean of -log softmax(logits[t])[targets[t]].
double cross_entropy(const RealMatrix& logits, std::span<const TokenId> targets,
                     std::span<const double> weights);

// Differentiable forms ------------------------------------------------------

namespace ad {
Var attention_core(Var q, Var k, Var v, const AttentionSpec& spec);
Var rope(Var x, std::span<const std::int64_t> positions, std::size_t n_heads, double base);
Var embed(Var table, std::span<const TokenId> tokens);
Var cross_entropy(Var logits, std::span<const TokenId> targets, std::span<const double> weights);
}  // namespace ad

using ModelVars = BasicModelParams<ad::Var>;

/// Puts every parameter on the tape. Tensors for which trainable(name) is
/// false become constants; an empty predicate makes everything trainable.
ModelVars to_vars(ad::Tape& tape, const ModelParams& p, const ModelConfig& cfg,
                  const std::function<bool(const std::string&)>& trainable = {});

/// Gradients of a backward pass, in for_each_param order and naming.
std::vector<std::pair<std::string, RealMatrix>> collect_grads(const ad::Tape& tape,
                                                              const ModelVars& vars,
                                                              const ModelConfig& cfg);

/// Parameters as a flat named list, in for_each_param order.
std::vector<ad::NamedMatrix> named_params(const ModelParams& p, const ModelConfig& cfg);
/// Inverse of named_params for tape leaves: rebuilds the structure from a flat
/// list in for_each_param order.
ModelVars vars_from(std::span<const ad::Var> flat, const ModelConfig& cfg);

ad::Var model_forward(ad::Tape& tape, std::span<const TokenId> tokens, const ModelVars& p,
                      const ModelConfig& cfg, const BoundaryMask& mask = {});
ad::Var ntp_loss(ad::Var logits, std::span<const TokenId> tokens, const BoundaryMask& mask = {});

}  // namespace iptt
