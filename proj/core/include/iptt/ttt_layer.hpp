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

// In-place test-time-training MLP.
//
// A gated MLP O = Z W_down^T with Z = act(H W_gate^T) * (H W_up^T), where
// W_down doubles as a fast weight. Tokens are processed in chunks of C rows.
// Each chunk is first projected with the current effective weight
// W_down0 + eta * S and then contributes dW = Vhat^T Z to S, where
// Vhat = Conv1D(X0) W_target is built from look-ahead token embeddings. S
// restarts from zero at every document boundary.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "iptt/autodiff.hpp"
#include "iptt/numerics.hpp"

namespace iptt {

enum class Activation { SiLU, GeLU };

/// Where the update target is read from before the convolution.
enum class TargetSource {
  TokenEmbedding,  // X0, the raw token embeddings
  HiddenState,     // H, the layer's own normalized input
};

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view s);
std::string_view to_string(TargetSource s);
TargetSource parse_target_source(std::string_view s);

double activate(double x, Activation a);
double activate_derivative(double x, Activation a);
RealMatrix activate(const RealMatrix& x, Activation a);

struct TttLayerConfig {
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t chunk_size = 64;
  std::vector<int> conv_offsets{0, 1, 2, 3, 4};
  double eta = 1e-3;
  std::optional<double> clip_tau;
  Activation activation = Activation::SiLU;
  TargetSource target_source = TargetSource::TokenEmbedding;

  void validate() const;
};

/// Slow weights of one layer. W_down0 is d_model x d_ff so that Vhat^T Z lands
/// in its shape; the conv kernel is |offsets| x d_model.
template <class T>
struct BasicTttParams {
  T w_up;
  T w_gate;
  T w_down0;
  T w_target;
  T conv_kernel;
};

using TttLayerParams = BasicTttParams<RealMatrix>;

void validate_params(const TttLayerParams& p, const TttLayerConfig& cfg);

/// Per-position document ids; equal ids form one document.
struct BoundaryMask {
  std::vector<std::int64_t> doc_ids;

  static BoundaryMask single(std::size_t n) { return {std::vector<std::int64_t>(n, 0)}; }
  std::size_t size() const { return doc_ids.size(); }
  void validate(std::size_t n) const;
};

/// Half-open row range [begin, end).
struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

/// Contiguous runs of equal id. An empty mask means one segment of n rows.
std::vector<Segment> document_segments(const BoundaryMask& mask, std::size_t n);
/// Chunk partition restarting at each segment start; the last chunk of a
/// segment may be short.
std::vector<Segment> chunk_segments(std::span<const Segment> docs, std::size_t chunk_size);

/// Mutable fast-weight state: the accumulated raw delta S and the partial
/// chunk buffered during streaming.
struct FastWeightState {
  RealMatrix delta;               // d_model x d_ff
  std::size_t chunks_seen = 0;    // chunks folded since the last reset
  std::vector<double> pending_target;  // row-major, target-source rows
  std::vector<double> pending_z;       // row-major, Z rows
  std::size_t pending_rows = 0;
  RealMatrix effective;           // cached W_down0 + eta * S, valid when chunks_seen > 0

  static FastWeightState zero(std::size_t d_model, std::size_t d_ff);
  void reset();
};

// Eager operations ---------------------------------------------------------

RealMatrix compute_preactivation(const RealMatrix& h, const TttLayerParams& p,
                                 Activation act = Activation::SiLU);
RealMatrix compute_target(const RealMatrix& source_chunk, const TttLayerParams& p,
                          const TttLayerConfig& cfg, std::span<const std::int64_t> doc_ids = {});
RealMatrix clip_delta(const RealMatrix& delta, double tau);
RealMatrix chunk_delta(const RealMatrix& vhat, const RealMatrix& z,
                       std::optional<double> clip_tau = std::nullopt);
/// The plain gated MLP with W_down0 and no fast-weight state.
RealMatrix frozen_mlp(const RealMatrix& h, const TttLayerParams& p,
                      Activation act = Activation::SiLU);

struct LayerOutput {
  RealMatrix output;
  FastWeightState state;  // state after the final document's last chunk
};

/// Chunk-by-chunk apply-then-update.
LayerOutput forward_sequential(const RealMatrix& h, const RealMatrix& x0, const TttLayerParams& p,
                               const TttLayerConfig& cfg, const BoundaryMask& mask);

enum class ScanMode {
  SerialOrder,  // left-to-right prefix sum; bitwise equal to forward_sequential
  Tree,         // work-efficient up/down sweep; equal up to rounding
};

/// Three-stage context-parallel form: per-chunk deltas, a prefix sum segmented
/// by document, then per-chunk outputs. workers <= 0 uses worker_count().
LayerOutput forward_scan(const RealMatrix& h, const RealMatrix& x0, const TttLayerParams& p,
                         const TttLayerConfig& cfg, const BoundaryMask& mask, ScanMode mode,
                         int workers = 0);

/// Single-token decode. Buffers the token and folds a delta each time C rows
/// have accumulated. new_document resets the state first.
RealMatrix stream_step(std::span<const double> h_t, std::span<const double> x0_t,
                       FastWeightState& state, const TttLayerParams& p,
                       const TttLayerConfig& cfg, bool new_document);

/// Exclusive prefix sums of deltas; entry i is the sum of deltas[0..i). An
/// empty optional stands for "no delta yet".
std::vector<std::optional<RealMatrix>> exclusive_prefix_serial(std::span<const RealMatrix> deltas);
std::vector<std::optional<RealMatrix>> exclusive_prefix_tree(std::span<const RealMatrix> deltas,
                                                             int workers = 1);

/// W_down0 when nothing has been folded, else W_down0 + eta * S.
RealMatrix effective_down(const RealMatrix& w_down0, const std::optional<RealMatrix>& s,
                          double eta);

namespace ad {
Var activate(Var x, Activation a);
Var clip_delta(Var delta, double tau);
}  // namespace ad

// Shared recurrence ---------------------------------------------------------

namespace detail {

template <class T>
T preactivation(const T& h, const BasicTttParams<T>& p, Activation act) {
  return hadamard(activate(matmul_nt(h, p.w_gate), act), matmul_nt(h, p.w_up));
}

template <class T>
T target(const T& source_chunk, const BasicTttParams<T>& p, const std::vector<int>& offsets) {
  return matmul(lookahead_conv1d(source_chunk, p.conv_kernel, offsets), p.w_target);
}

template <class T>
T effective(const T& w_down0, const std::optional<T>& s, double eta) {
  return s ? add(w_down0, scale(*s, eta)) : w_down0;
}

/// Runs the recurrence over every document. When final_delta is non-null the
/// last document's state is returned through it.
template <class T>
T sequential(const T& h, const T& x0, const BasicTttParams<T>& p, const TttLayerConfig& cfg,
             std::span<const Segment> docs, std::optional<T>* final_delta,
             std::size_t* final_chunks) {
  const T z = preactivation(h, p, cfg.activation);
  const T& source = cfg.target_source == TargetSource::TokenEmbedding ? x0 : h;
  std::vector<T> outs;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    const bool last_doc = d + 1 == docs.size();
    std::optional<T> s;
    std::size_t chunks = 0;
    for (std::size_t c0 = docs[d].begin; c0 < docs[d].end; c0 += cfg.chunk_size) {
      const std::size_t c1 = std::min(c0 + cfg.chunk_size, docs[d].end);
      const T zc = slice_rows(z, c0, c1);
      outs.push_back(matmul_nt(zc, effective(p.w_down0, s, cfg.eta)));
      const bool needed = c1 < docs[d].end || (last_doc && final_delta != nullptr);
      if (!needed) continue;
      const T vhat = target(slice_rows(source, c0, c1), p, cfg.conv_offsets);
      T dw = matmul_tn(vhat, zc);
      if (cfg.clip_tau) dw = clip_delta(dw, *cfg.clip_tau);
      s = s ? add(*s, dw) : dw;
      ++chunks;
    }
    if (last_doc && final_delta != nullptr) {
      *final_delta = s;
      if (final_chunks != nullptr) *final_chunks = chunks;
    }
  }
  return concat_rows(std::span<const T>(outs));
}

}  // namespace detail

/// Differentiable layer forward on a tape. Same arithmetic as forward_sequential.
ad::Var forward_sequential(ad::Var h, ad::Var x0, const BasicTttParams<ad::Var>& p,
                           const TttLayerConfig& cfg, const BoundaryMask& mask);
ad::Var frozen_mlp(ad::Var h, const BasicTttParams<ad::Var>& p, Activation act);

}  // namespace iptt
