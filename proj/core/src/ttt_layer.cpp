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

#include "iptt/ttt_layer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace iptt {
namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

void require_shape(const RealMatrix& m, std::size_t r, std::size_t c, const char* name) {
  if (m.rows() != r || m.cols() != c) {
    throw Error(std::string("TttLayerParams: ") + name + " must be " + std::to_string(r) + "x" +
                std::to_string(c) + ", got " + shape_string(m));
  }
}

void check_inputs(const RealMatrix& h, const RealMatrix& x0, const TttLayerConfig& cfg,
                  const BoundaryMask& mask) {
  if (h.cols() != cfg.d_model || x0.cols() != cfg.d_model) {
    throw Error("ttt layer: H and X0 must have d_model columns");
  }
  if (h.rows() != x0.rows()) {
    throw Error("ttt layer: length mismatch, H has " + std::to_string(h.rows()) +
                " rows and X0 has " + std::to_string(x0.rows()));
  }
  mask.validate(h.rows());
}

const RealMatrix& target_source(const RealMatrix& h, const RealMatrix& x0,
                                const TttLayerConfig& cfg) {
  return cfg.target_source == TargetSource::TokenEmbedding ? x0 : h;
}

std::optional<RealMatrix> combine(const std::optional<RealMatrix>& a,
                                  const std::optional<RealMatrix>& b) {
  if (!a) return b;
  if (!b) return a;
  return add(*a, *b);
}

}  // namespace

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::SiLU: return "silu";
    case Activation::GeLU: return "gelu";
  }
  return "silu";
}

Activation parse_activation(std::string_view s) {
  if (s == "silu") return Activation::SiLU;
  if (s == "gelu") return Activation::GeLU;
  throw Error("unknown activation '" + std::string(s) + "'");
}

std::string_view to_string(TargetSource s) {
  return s == TargetSource::TokenEmbedding ? "token_embedding" : "hidden_state";
}

TargetSource parse_target_source(std::string_view s) {
  if (s == "token_embedding") return TargetSource::TokenEmbedding;
  if (s == "hidden_state") return TargetSource::HiddenState;
  throw Error("unknown target source '" + std::string(s) + "'");
}

double activate(double x, Activation a) {
  if (a == Activation::SiLU) return silu(x);
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double activate_derivative(double x, Activation a) {
  if (a == Activation::SiLU) return silu_derivative(x);
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

RealMatrix activate(const RealMatrix& x, Activation a) {
  if (a == Activation::SiLU) return silu(x);
  RealMatrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = activate(x.data()[i], a);
  return y;
}

void TttLayerConfig::validate() const {
  if (d_model == 0 || d_ff == 0) throw Error("ttt: d_model and d_ff must be positive");
  if (chunk_size < 1) throw Error("ttt.chunk_size must be >= 1");
  if (!(eta >= 0.0)) throw Error("ttt.eta must be >= 0");
  if (clip_tau && !(*clip_tau > 0.0)) throw Error("ttt.clip_tau must be > 0 when set");
  if (conv_offsets.empty()) throw Error("ttt.conv_offsets must not be empty");
  std::vector<int> sorted = conv_offsets;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw Error("ttt.conv_offsets must be distinct");
  }
}

void validate_params(const TttLayerParams& p, const TttLayerConfig& cfg) {
  require_shape(p.w_up, cfg.d_ff, cfg.d_model, "w_up");
  require_shape(p.w_gate, cfg.d_ff, cfg.d_model, "w_gate");
  require_shape(p.w_down0, cfg.d_model, cfg.d_ff, "w_down0");
  require_shape(p.w_target, cfg.d_model, cfg.d_model, "w_target");
  require_shape(p.conv_kernel, cfg.conv_offsets.size(), cfg.d_model, "conv_kernel");
}

void BoundaryMask::validate(std::size_t n) const {
  if (doc_ids.empty()) return;
  if (doc_ids.size() != n) {
    throw Error("BoundaryMask: " + std::to_string(doc_ids.size()) + " ids for " +
                std::to_string(n) + " positions");
  }
  for (std::size_t i = 1; i < doc_ids.size(); ++i) {
    if (doc_ids[i] < doc_ids[i - 1]) throw Error("BoundaryMask: document ids must be nondecreasing");
  }
}

std::vector<Segment> document_segments(const BoundaryMask& mask, std::size_t n) {
  mask.validate(n);
  std::vector<Segment> out;
  if (n == 0) return out;
  if (mask.doc_ids.empty()) return {Segment{0, n}};
  std::size_t start = 0;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i == n || mask.doc_ids[i] != mask.doc_ids[i - 1]) {
      out.push_back({start, i});
      start = i;
    }
  }
  return out;
}

std::vector<Segment> chunk_segments(std::span<const Segment> docs, std::size_t chunk_size) {
  std::vector<Segment> out;
  for (const Segment& d : docs) {
    for (std::size_t c0 = d.begin; c0 < d.end; c0 += chunk_size) {
      out.push_back({c0, std::min(c0 + chunk_size, d.end)});
    }
  }
  return out;
}

FastWeightState FastWeightState::zero(std::size_t d_model, std::size_t d_ff) {
  FastWeightState s;
  s.delta = RealMatrix(d_model, d_ff);
  return s;
}

void FastWeightState::reset() {
  delta.fill(0.0);
  chunks_seen = 0;
  pending_target.clear();
  pending_z.clear();
  pending_rows = 0;
  effective = RealMatrix();
}

RealMatrix compute_preactivation(const RealMatrix& h, const TttLayerParams& p, Activation act) {
  if (h.cols() != p.w_gate.cols() || h.cols() != p.w_up.cols()) {
    throw Error("compute_preactivation: H is " + shape_string(h) + ", W_gate is " +
                shape_string(p.w_gate) + ", W_up is " + shape_string(p.w_up));
  }
  return detail::preactivation(h, p, act);
}

RealMatrix compute_target(const RealMatrix& source_chunk, const TttLayerParams& p,
                          const TttLayerConfig& cfg, std::span<const std::int64_t> doc_ids) {
  return matmul(lookahead_conv1d(source_chunk, p.conv_kernel, cfg.conv_offsets, doc_ids),
                p.w_target);
}

RealMatrix clip_delta(const RealMatrix& delta, double tau) {
  if (!(tau > 0.0)) throw Error("clip_delta: tau must be positive");
  const double norm = frob_norm(delta);
  if (!(norm > tau)) return delta;
  // tau / norm can round so that the rescaled norm lands an ulp above tau.
  double f = tau / norm;
  RealMatrix out = scale(delta, f);
  while (frob_norm(out) > tau) {
    f = std::nextafter(f, 0.0);
    out = scale(delta, f);
  }
  return out;
}

RealMatrix chunk_delta(const RealMatrix& vhat, const RealMatrix& z,
                       std::optional<double> clip_tau) {
  if (vhat.rows() != z.rows()) {
    throw Error("chunk_delta: Vhat has " + std::to_string(vhat.rows()) + " rows, Z has " +
                std::to_string(z.rows()));
  }
  RealMatrix dw = matmul_tn(vhat, z);
  if (clip_tau) dw = clip_delta(dw, *clip_tau);
  return dw;
}

RealMatrix frozen_mlp(const RealMatrix& h, const TttLayerParams& p, Activation act) {
  return matmul_nt(compute_preactivation(h, p, act), p.w_down0);
}

RealMatrix effective_down(const RealMatrix& w_down0, const std::optional<RealMatrix>& s,
                          double eta) {
  return detail::effective(w_down0, s, eta);
}

LayerOutput forward_sequential(const RealMatrix& h, const RealMatrix& x0, const TttLayerParams& p,
                               const TttLayerConfig& cfg, const BoundaryMask& mask) {
  cfg.validate();
  validate_params(p, cfg);
  check_inputs(h, x0, cfg, mask);
  const auto docs = document_segments(mask, h.rows());
  LayerOutput out;
  out.state = FastWeightState::zero(cfg.d_model, cfg.d_ff);
  if (docs.empty()) {
    out.output = RealMatrix(0, cfg.d_model);
    return out;
  }
  std::optional<RealMatrix> final_delta;
  std::size_t chunks = 0;
  out.output = detail::sequential<RealMatrix>(h, x0, p, cfg, docs, &final_delta, &chunks);
  if (final_delta) {
    out.state.delta = *final_delta;
    out.state.chunks_seen = chunks;
    out.state.effective = effective_down(p.w_down0, final_delta, cfg.eta);
  }
  return out;
}

std::vector<std::optional<RealMatrix>> exclusive_prefix_serial(std::span<const RealMatrix> deltas) {
  std::vector<std::optional<RealMatrix>> out(deltas.size());
  std::optional<RealMatrix> running;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    out[i] = running;
    running = running ? add(*running, deltas[i]) : deltas[i];
  }
  return out;
}

std::vector<std::optional<RealMatrix>> exclusive_prefix_tree(std::span<const RealMatrix> deltas,
                                                             int workers) {
  const std::size_t n = deltas.size();
  std::size_t size = 1;
  while (size < n) size *= 2;
  std::vector<std::optional<RealMatrix>> a(size);
  for (std::size_t i = 0; i < n; ++i) a[i] = deltas[i];
  // Up-sweep: a[i + 2d - 1] holds the sum of its 2d-wide block.
  for (std::size_t d = 1; d < size; d *= 2) {
    const auto pairs = static_cast<std::ptrdiff_t>(size / (2 * d));
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(std::max(1, workers)) if (workers > 1)
#endif
    for (std::ptrdiff_t k = 0; k < pairs; ++k) {
      const std::size_t i = static_cast<std::size_t>(k) * 2 * d;
      a[i + 2 * d - 1] = combine(a[i + d - 1], a[i + 2 * d - 1]);
    }
  }
  // Down-sweep turns block sums into exclusive prefixes.
  a[size - 1].reset();
  for (std::size_t d = size / 2; d >= 1; d /= 2) {
    const auto pairs = static_cast<std::ptrdiff_t>(size / (2 * d));
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(std::max(1, workers)) if (workers > 1)
#endif
    for (std::ptrdiff_t k = 0; k < pairs; ++k) {
      const std::size_t i = static_cast<std::size_t>(k) * 2 * d;
      std::optional<RealMatrix> left = std::move(a[i + d - 1]);
      a[i + d - 1] = a[i + 2 * d - 1];
      a[i + 2 * d - 1] = combine(a[i + 2 * d - 1], left);
    }
    if (d == 1) break;
  }
  a.resize(n);
  return a;
}

LayerOutput forward_scan(const RealMatrix& h, const RealMatrix& x0, const TttLayerParams& p,
                         const TttLayerConfig& cfg, const BoundaryMask& mask, ScanMode mode,
                         int workers) {
  cfg.validate();
  validate_params(p, cfg);
  check_inputs(h, x0, cfg, mask);
  if (workers <= 0) workers = worker_count();
  const auto docs = document_segments(mask, h.rows());
  const auto chunks = chunk_segments(docs, cfg.chunk_size);
  const RealMatrix& source = target_source(h, x0, cfg);
  const auto n_chunks = static_cast<std::ptrdiff_t>(chunks.size());

  // Stage 1: per-chunk activations and deltas, independent across chunks.
  std::vector<RealMatrix> z(chunks.size());
  std::vector<RealMatrix> deltas(chunks.size());
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(workers) if (workers > 1)
#endif
  for (std::ptrdiff_t i = 0; i < n_chunks; ++i) {
    const Segment c = chunks[static_cast<std::size_t>(i)];
    z[i] = detail::preactivation(slice_rows(h, c.begin, c.end), p, cfg.activation);
    const RealMatrix vhat = detail::target(slice_rows(source, c.begin, c.end), p, cfg.conv_offsets);
    deltas[i] = chunk_delta(vhat, z[i], cfg.clip_tau);
  }

  // Stage 2: exclusive prefix sums restarting at each document.
  std::vector<std::optional<RealMatrix>> prefix(chunks.size());
  LayerOutput out;
  out.state = FastWeightState::zero(cfg.d_model, cfg.d_ff);
  std::size_t first = 0;
  for (const Segment& d : docs) {
    std::size_t last = first;
    while (last < chunks.size() && chunks[last].begin < d.end) ++last;
    const std::span<const RealMatrix> seg(deltas.data() + first, last - first);
    auto part = mode == ScanMode::SerialOrder ? exclusive_prefix_serial(seg)
                                              : exclusive_prefix_tree(seg, workers);
    for (std::size_t i = 0; i < part.size(); ++i) prefix[first + i] = std::move(part[i]);
    if (last == chunks.size() && last > first) {
      // Inclusive total of the final document, in the same association as its prefixes.
      out.state.delta = prefix[last - 1] ? add(*prefix[last - 1], deltas[last - 1])
                                         : deltas[last - 1];
      out.state.chunks_seen = last - first;
      out.state.effective = effective_down(p.w_down0, out.state.delta, cfg.eta);
    }
    first = last;
  }

  // Stage 3: outputs from the effective weight of each chunk.
  std::vector<RealMatrix> outs(chunks.size());
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(workers) if (workers > 1)
#endif
  for (std::ptrdiff_t i = 0; i < n_chunks; ++i) {
    outs[i] = matmul_nt(z[i], effective_down(p.w_down0, prefix[i], cfg.eta));
  }
  out.output = outs.empty() ? RealMatrix(0, cfg.d_model) : concat_rows(outs);
  return out;
}

RealMatrix stream_step(std::span<const double> h_t, std::span<const double> x0_t,
                       FastWeightState& state, const TttLayerParams& p,
                       const TttLayerConfig& cfg, bool new_document) {
  if (h_t.size() != cfg.d_model || x0_t.size() != cfg.d_model) {
    throw Error("stream_step: rows must have d_model entries");
  }
  if (state.delta.rows() != cfg.d_model || state.delta.cols() != cfg.d_ff) {
    state = FastWeightState::zero(cfg.d_model, cfg.d_ff);
  }
  if (new_document) state.reset();

  const RealMatrix h = RealMatrix::row_vector(h_t);
  const RealMatrix z = detail::preactivation(h, p, cfg.activation);
  const RealMatrix& w = state.chunks_seen == 0 ? p.w_down0 : state.effective;
  RealMatrix o = matmul_nt(z, w);

  const auto src = cfg.target_source == TargetSource::TokenEmbedding ? x0_t : h_t;
  state.pending_target.insert(state.pending_target.end(), src.begin(), src.end());
  state.pending_z.insert(state.pending_z.end(), z.values().begin(), z.values().end());
  ++state.pending_rows;

  if (state.pending_rows == cfg.chunk_size) {
    const RealMatrix src_chunk(state.pending_rows, cfg.d_model, std::move(state.pending_target));
    const RealMatrix z_chunk(state.pending_rows, cfg.d_ff, std::move(state.pending_z));
    const RealMatrix vhat = detail::target(src_chunk, p, cfg.conv_offsets);
    const RealMatrix dw = chunk_delta(vhat, z_chunk, cfg.clip_tau);
    state.delta = state.chunks_seen == 0 ? dw : add(state.delta, dw);
    ++state.chunks_seen;
    state.effective = add(p.w_down0, scale(state.delta, cfg.eta));
    state.pending_target.clear();
    state.pending_z.clear();
    state.pending_rows = 0;
  }
  return o;
}

namespace ad {

Var activate(Var x, Activation a) {
  if (a == Activation::SiLU) return silu(x);
  return x.tape().record(iptt::activate(x.value(), a), {x},
                         [x, a](Tape& tp, const RealMatrix& g) {
                           const RealMatrix& xv = x.value();
                           RealMatrix dx(xv.rows(), xv.cols());
                           for (std::size_t i = 0; i < xv.size(); ++i) {
                             dx.data()[i] = g.data()[i] * activate_derivative(xv.data()[i], a);
                           }
                           tp.accumulate(x, dx);
                         });
}

Var clip_delta(Var delta, double tau) {
  RealMatrix y = iptt::clip_delta(delta.value(), tau);
  return delta.tape().record(std::move(y), {delta}, [delta, tau](Tape& tp, const RealMatrix& g) {
    const RealMatrix& x = delta.value();
    const double norm = frob_norm(x);
    if (!(norm > tau)) {
      tp.accumulate(delta, g);
      return;
    }
    // y = tau x / |x|  =>  dx = tau / |x| (g - (x.g) x / |x|^2)
    double dot = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) dot += x.data()[i] * g.data()[i];
    const double c = tau / norm;
    const double k = dot / (norm * norm);
    RealMatrix dx(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) dx.data()[i] = c * (g.data()[i] - k * x.data()[i]);
    tp.accumulate(delta, dx);
  });
}

}  // namespace ad

ad::Var forward_sequential(ad::Var h, ad::Var x0, const BasicTttParams<ad::Var>& p,
                           const TttLayerConfig& cfg, const BoundaryMask& mask) {
  cfg.validate();
  const auto docs = document_segments(mask, h.rows());
  if (h.rows() != x0.rows()) throw Error("ttt layer: length mismatch between H and X0");
  return detail::sequential<ad::Var>(h, x0, p, cfg, docs, nullptr, nullptr);
}

ad::Var frozen_mlp(ad::Var h, const BasicTttParams<ad::Var>& p, Activation act) {
  return matmul_nt(detail::preactivation(h, p, act), p.w_down0);
}

}  // namespace iptt
