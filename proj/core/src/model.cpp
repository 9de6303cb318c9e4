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

#include "iptt/model.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>

namespace iptt {
namespace {

template <class P, class F>
void visit_params(P& p, const ModelConfig& cfg, F&& fn) {
  fn(std::string("embed"), p.embedding);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    fn(pre + "attn_norm", l.attn_norm);
    fn(pre + "wq", l.wq);
    fn(pre + "wk", l.wk);
    fn(pre + "wv", l.wv);
    fn(pre + "wo", l.wo);
    fn(pre + "mlp_norm", l.mlp_norm);
    fn(pre + "mlp.w_up", l.mlp.w_up);
    fn(pre + "mlp.w_gate", l.mlp.w_gate);
    fn(pre + "mlp.w_down", l.mlp.w_down0);
    if (cfg.is_ttt_layer(i)) {
      fn(pre + "mlp.w_target", l.mlp.w_target);
      fn(pre + "mlp.conv_kernel", l.mlp.conv_kernel);
    }
  }
  fn(std::string("final_norm"), p.final_norm);
  if (!cfg.tie_embeddings) fn(std::string("unembed"), p.unembed);
}

struct HeadLayout {
  std::size_t n = 0, d = 0, heads = 0, dh = 0;
  std::vector<std::size_t> lo;      // first visible key per query
  std::vector<std::size_t> offset;  // start of each query's weights within a head
  std::size_t per_head = 0;
};

HeadLayout make_layout(std::size_t n, std::size_t d, const AttentionSpec& spec) {
  if (spec.n_heads == 0 || d % spec.n_heads != 0) {
    throw Error("attention: d_model " + std::to_string(d) + " not divisible by n_heads " +
                std::to_string(spec.n_heads));
  }
  if (!spec.doc_ids.empty() && spec.doc_ids.size() != n) {
    throw Error("attention: doc id count mismatch");
  }
  if (spec.window && *spec.window == 0) throw Error("attention: window must be positive");
  HeadLayout L;
  L.n = n;
  L.d = d;
  L.heads = spec.n_heads;
  L.dh = d / spec.n_heads;
  L.lo.resize(n);
  L.offset.resize(n);
  std::size_t doc_start = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0 && !spec.doc_ids.empty() && spec.doc_ids[t] != spec.doc_ids[t - 1]) doc_start = t;
    std::size_t lo = doc_start;
    if (spec.window && t + 1 > *spec.window) lo = std::max(lo, t + 1 - *spec.window);
    L.lo[t] = lo;
    L.offset[t] = L.per_head;
    L.per_head += t - lo + 1;
  }
  return L;
}

// Copies head h of x (n x d) into a contiguous n x dh block.
std::vector<double> head_rows(const RealMatrix& x, const HeadLayout& L, std::size_t h) {
  std::vector<double> out(L.n * L.dh);
  for (std::size_t t = 0; t < L.n; ++t) {
    const double* src = x.data() + t * L.d + h * L.dh;
    std::copy(src, src + L.dh, out.data() + t * L.dh);
  }
  return out;
}

// Head h of x transposed into a dh x n block.
std::vector<double> head_cols(const RealMatrix& x, const HeadLayout& L, std::size_t h) {
  std::vector<double> out(L.dh * L.n);
  for (std::size_t t = 0; t < L.n; ++t)
    for (std::size_t c = 0; c < L.dh; ++c) out[c * L.n + t] = x(t, h * L.dh + c);
  return out;
}

template <class T>
T attention_sublayer(const T& a, const BasicBlockParams<T>& p, const ModelConfig& cfg,
                     const AttentionSpec& spec, std::span<const std::int64_t> pos) {
  const T q = rope(matmul_nt(a, p.wq), pos, cfg.n_heads, cfg.rope_base);
  const T k = rope(matmul_nt(a, p.wk), pos, cfg.n_heads, cfg.rope_base);
  const T v = matmul_nt(a, p.wv);
  return matmul_nt(attention_core(q, k, v, spec), p.wo);
}

RealMatrix ttt_mlp(const RealMatrix& m, const RealMatrix& x0, const TttLayerParams& p,
                   const TttLayerConfig& cfg, const BoundaryMask& mask, TttPath path) {
  switch (path) {
    case TttPath::Sequential: return forward_sequential(m, x0, p, cfg, mask).output;
    case TttPath::ScanSerial:
      return forward_scan(m, x0, p, cfg, mask, ScanMode::SerialOrder).output;
    case TttPath::ScanTree: return forward_scan(m, x0, p, cfg, mask, ScanMode::Tree).output;
  }
  return {};
}

ad::Var ttt_mlp(ad::Var m, ad::Var x0, const BasicTttParams<ad::Var>& p,
                const TttLayerConfig& cfg, const BoundaryMask& mask, TttPath) {
  return forward_sequential(m, x0, p, cfg, mask);
}

template <class T>
T block(const T& x, const T& x0, const BasicBlockParams<T>& p, const ModelConfig& cfg,
        std::size_t layer, const AttentionSpec& spec, std::span<const std::int64_t> pos,
        const BoundaryMask& mask, TttPath path) {
  const T h = add(x, attention_sublayer(rms_norm(x, p.attn_norm, cfg.norm_eps), p, cfg, spec, pos));
  const T m = rms_norm(h, p.mlp_norm, cfg.norm_eps);
  const T o = cfg.is_ttt_layer(layer) ? ttt_mlp(m, x0, p.mlp, cfg.layer_config(), mask, path)
                                      : frozen_mlp(m, p.mlp, cfg.ttt.activation);
  return add(h, o);
}

template <class T>
T run_model(const T& x0, const BasicModelParams<T>& p, const ModelConfig& cfg,
            const BoundaryMask& mask, TttPath path) {
  const std::size_t n = x0.rows();
  AttentionSpec spec{cfg.n_heads, cfg.window, mask.doc_ids};
  const auto pos = document_positions(mask, n);
  T x = x0;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    x = block(x, x0, p.layers[l], cfg, l, spec, pos, mask, path);
  }
  const T f = rms_norm(x, p.final_norm, cfg.norm_eps);
  return matmul_nt(f, cfg.tie_embeddings ? p.embedding : p.unembed);
}

void check_tokens(std::span<const TokenId> tokens, const ModelConfig& cfg) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab_size) {
      throw Error("token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                  " is outside vocab of " + std::to_string(cfg.vocab_size));
    }
  }
}

void require(const RealMatrix& m, std::size_t r, std::size_t c, const std::string& name) {
  if (m.rows() != r || m.cols() != c) {
    throw Error("ModelParams: " + name + " must be " + std::to_string(r) + "x" +
                std::to_string(c) + ", got " + shape_string(m));
  }
}

double row_logsumexp(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || d_ff == 0) {
    throw Error("model: vocab_size, d_model, n_layers and d_ff must be positive");
  }
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw Error("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.n_heads (" +
                std::to_string(n_heads) + ")");
  }
  if ((d_model / n_heads) % 2 != 0) {
    throw Error("model.d_model / model.n_heads must be even for rotary embeddings");
  }
  if (window && *window == 0) throw Error("model.window must be positive when set");
  if (!(rope_base > 1.0)) throw Error("model.rope_base must be > 1");
  layer_config().validate();
}

bool ModelConfig::is_ttt_layer(std::size_t layer) const {
  return ttt_every > 0 && (layer + 1) % ttt_every == 0;
}

TttLayerConfig ModelConfig::layer_config() const {
  TttLayerConfig c = ttt;
  c.d_model = d_model;
  c.d_ff = d_ff;
  return c;
}

void for_each_param(ModelParams& p, const ModelConfig& cfg,
                    const std::function<void(const std::string&, RealMatrix&)>& fn) {
  visit_params(p, cfg, fn);
}

void for_each_param(const ModelParams& p, const ModelConfig& cfg,
                    const std::function<void(const std::string&, const RealMatrix&)>& fn) {
  visit_params(p, cfg, fn);
}

ModelParams init_model(const ModelConfig& cfg, SeededRng& rng) {
  cfg.validate();
  const double s = cfg.init_std;
  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  ModelParams p;
  p.embedding = rng.truncated_normal_matrix(cfg.vocab_size, d, s);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    BlockParams b;
    b.attn_norm = RealMatrix(1, d, 1.0);
    b.wq = rng.truncated_normal_matrix(d, d, s);
    b.wk = rng.truncated_normal_matrix(d, d, s);
    b.wv = rng.truncated_normal_matrix(d, d, s);
    b.wo = rng.truncated_normal_matrix(d, d, s);
    b.mlp_norm = RealMatrix(1, d, 1.0);
    b.mlp.w_up = rng.truncated_normal_matrix(f, d, s);
    b.mlp.w_gate = rng.truncated_normal_matrix(f, d, s);
    b.mlp.w_down0 = rng.truncated_normal_matrix(d, f, s);
    if (cfg.is_ttt_layer(l)) {
      b.mlp.w_target = RealMatrix(d, d);
      for (std::size_t i = 0; i < d; ++i) b.mlp.w_target(i, i) = rng.normal() * s;
      b.mlp.conv_kernel = RealMatrix(cfg.ttt.conv_offsets.size(), d);
    }
    p.layers.push_back(std::move(b));
  }
  p.final_norm = RealMatrix(1, d, 1.0);
  if (!cfg.tie_embeddings) p.unembed = rng.truncated_normal_matrix(cfg.vocab_size, d, s);
  return p;
}

void validate_params(const ModelParams& p, const ModelConfig& cfg) {
  if (p.layers.size() != cfg.n_layers) {
    throw Error("ModelParams: expected " + std::to_string(cfg.n_layers) + " layers, got " +
                std::to_string(p.layers.size()));
  }
  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  require(p.embedding, cfg.vocab_size, d, "embed");
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& b = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    require(b.attn_norm, 1, d, pre + "attn_norm");
    require(b.wq, d, d, pre + "wq");
    require(b.wk, d, d, pre + "wk");
    require(b.wv, d, d, pre + "wv");
    require(b.wo, d, d, pre + "wo");
    require(b.mlp_norm, 1, d, pre + "mlp_norm");
    require(b.mlp.w_up, f, d, pre + "mlp.w_up");
    require(b.mlp.w_gate, f, d, pre + "mlp.w_gate");
    require(b.mlp.w_down0, d, f, pre + "mlp.w_down");
    if (cfg.is_ttt_layer(l)) {
      require(b.mlp.w_target, d, d, pre + "mlp.w_target");
      require(b.mlp.conv_kernel, cfg.ttt.conv_offsets.size(), d, pre + "mlp.conv_kernel");
    }
  }
  require(p.final_norm, 1, d, "final_norm");
  if (!cfg.tie_embeddings) require(p.unembed, cfg.vocab_size, d, "unembed");
}

RealMatrix attention_core(const RealMatrix& q, const RealMatrix& k, const RealMatrix& v,
                          const AttentionSpec& spec, std::vector<double>* probs) {
  if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols() ||
      q.cols() != v.cols()) {
    throw Error("attention: q, k, v shape mismatch " + shape_string(q) + ", " + shape_string(k) +
                ", " + shape_string(v));
  }
  const HeadLayout L = make_layout(q.rows(), q.cols(), spec);
  RealMatrix out(L.n, L.d);
  if (probs != nullptr) probs->assign(L.per_head * L.heads, 0.0);
  const double sc = 1.0 / std::sqrt(static_cast<double>(L.dh));
  std::vector<double> scores(L.n);
  for (std::size_t h = 0; h < L.heads; ++h) {
    const auto qh = head_rows(q, L, h);
    const auto kt = head_cols(k, L, h);
    const auto vh = head_rows(v, L, h);
    for (std::size_t t = 0; t < L.n; ++t) {
      const std::size_t lo = L.lo[t], cnt = t - lo + 1;
      double* s = scores.data();
      std::fill(s, s + cnt, 0.0);
      for (std::size_t c = 0; c < L.dh; ++c) {
        const double qc = qh[t * L.dh + c];
        const double* kc = kt.data() + c * L.n + lo;
        for (std::size_t j = 0; j < cnt; ++j) s[j] += qc * kc[j];
      }
      double m = s[0] * sc;
      for (std::size_t j = 0; j < cnt; ++j) {
        s[j] *= sc;
        m = std::max(m, s[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < cnt; ++j) {
        s[j] = std::exp(s[j] - m);
        z += s[j];
      }
      double* o = out.data() + t * L.d + h * L.dh;
      for (std::size_t j = 0; j < cnt; ++j) {
        const double pj = s[j] / z;
        if (probs != nullptr) (*probs)[h * L.per_head + L.offset[t] + j] = pj;
        const double* vj = vh.data() + (lo + j) * L.dh;
        for (std::size_t c = 0; c < L.dh; ++c) o[c] += pj * vj[c];
      }
    }
  }
  return out;
}

std::vector<std::int64_t> document_positions(const BoundaryMask& mask, std::size_t n) {
  mask.validate(n);
  std::vector<std::int64_t> pos(n);
  std::int64_t p = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0 && !mask.doc_ids.empty() && mask.doc_ids[t] != mask.doc_ids[t - 1]) p = 0;
    pos[t] = p++;
  }
  return pos;
}

namespace {

// cos/sin of pos * base^(-2i/dh) for each position and pair index i.
void rope_tables(std::span<const std::int64_t> positions, std::size_t dh, double base,
                 std::vector<double>& cs, std::vector<double>& sn) {
  const std::size_t half = dh / 2;
  cs.resize(positions.size() * half);
  sn.resize(positions.size() * half);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
    for (std::size_t t = 0; t < positions.size(); ++t) {
      const double a = static_cast<double>(positions[t]) * freq;
      cs[t * half + i] = std::cos(a);
      sn[t * half + i] = std::sin(a);
    }
  }
}

RealMatrix rope_apply(const RealMatrix& x, std::span<const std::int64_t> positions,
                      std::size_t n_heads, double base, bool inverse) {
  if (positions.size() != x.rows()) throw Error("rope: position count mismatch");
  if (n_heads == 0 || x.cols() % n_heads != 0 || (x.cols() / n_heads) % 2 != 0) {
    throw Error("rope: head dimension must be even");
  }
  const std::size_t dh = x.cols() / n_heads, half = dh / 2;
  std::vector<double> cs, sn;
  rope_tables(positions, dh, base, cs, sn);
  const double sign = inverse ? -1.0 : 1.0;
  RealMatrix y(x.rows(), x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t c = h * dh + 2 * i;
        const double c0 = cs[t * half + i], s0 = sign * sn[t * half + i];
        const double a = x(t, c), b = x(t, c + 1);
        y(t, c) = a * c0 - b * s0;
        y(t, c + 1) = a * s0 + b * c0;
      }
    }
  }
  return y;
}

}  // namespace

RealMatrix rope(const RealMatrix& x, std::span<const std::int64_t> positions, std::size_t n_heads,
                double base) {
  return rope_apply(x, positions, n_heads, base, false);
}

RealMatrix causal_attention(const RealMatrix& x, const BlockParams& p, std::size_t n_heads,
                            std::optional<std::size_t> window, const BoundaryMask& mask,
                            double rope_base) {
  ModelConfig cfg;
  cfg.n_heads = n_heads;
  cfg.rope_base = rope_base;
  AttentionSpec spec{n_heads, window, mask.doc_ids};
  const auto pos = document_positions(mask, x.rows());
  return attention_sublayer(x, p, cfg, spec, pos);
}

RealMatrix embed(const RealMatrix& table, std::span<const TokenId> tokens) {
  RealMatrix x(tokens.size(), table.cols());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= table.rows()) {
      throw Error("embed: token " + std::to_string(tokens[t]) + " out of range");
    }
    const auto src = table.row(static_cast<std::size_t>(tokens[t]));
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }
  return x;
}

RealMatrix block_forward(const RealMatrix& x, const RealMatrix& x0, const BlockParams& p,
                         const ModelConfig& cfg, std::size_t layer, const BoundaryMask& mask,
                         TttPath path) {
  AttentionSpec spec{cfg.n_heads, cfg.window, mask.doc_ids};
  const auto pos = document_positions(mask, x.rows());
  return block(x, x0, p, cfg, layer, spec, pos, mask, path);
}

RealMatrix model_forward(std::span<const TokenId> tokens, const ModelParams& p,
                         const ModelConfig& cfg, const BoundaryMask& mask, TttPath path) {
  check_tokens(tokens, cfg);
  mask.validate(tokens.size());
  const RealMatrix x0 = embed(p.embedding, tokens);
  return run_model(x0, p, cfg, mask, path);
}

std::vector<double> ntp_weights(const BoundaryMask& mask, std::size_t n) {
  mask.validate(n);
  std::vector<double> w(n, 0.0);
  for (std::size_t t = 0; t + 1 < n; ++t) {
    const bool same_doc = mask.doc_ids.empty() || mask.doc_ids[t] == mask.doc_ids[t + 1];
    w[t] = same_doc ? 1.0 : 0.0;
  }
  return w;
}

namespace {

std::vector<TokenId> shifted_targets(std::span<const TokenId> tokens) {
  std::vector<TokenId> targets(tokens.size(), 0);
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) targets[t] = tokens[t + 1];
  return targets;
}

}  // namespace

double cross_entropy(const RealMatrix& logits, std::span<const TokenId> targets,
                     std::span<const double> weights) {
  if (targets.size() != logits.rows() || weights.size() != logits.rows()) {
    throw Error("cross_entropy: targets/weights must have one entry per logits row");
  }
  double total = 0.0, wsum = 0.0;
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    if (weights[t] == 0.0) continue;
    const auto row = logits.row(t);
    total += weights[t] * (row_logsumexp(row) - row[static_cast<std::size_t>(targets[t])]);
    wsum += weights[t];
  }
  return wsum > 0.0 ? total / wsum : 0.0;
}

double ntp_loss(const RealMatrix& logits, std::span<const TokenId> tokens,
                const BoundaryMask& mask) {
  if (tokens.size() != logits.rows()) throw Error("ntp_loss: token count mismatch");
  const auto targets = shifted_targets(tokens);
  const auto w = ntp_weights(mask, tokens.size());
  return cross_entropy(logits, targets, w);
}

namespace ad {

Var attention_core(Var q, Var k, Var v, const AttentionSpec& spec) {
  auto probs = std::make_shared<std::vector<double>>();
  RealMatrix out = iptt::attention_core(q.value(), k.value(), v.value(), spec, probs.get());
  return q.tape().record(std::move(out), {q, k, v}, [q, k, v, spec, probs](Tape& tp,
                                                                          const RealMatrix& g) {
    const RealMatrix& qv = q.value();
    const HeadLayout L = make_layout(qv.rows(), qv.cols(), spec);
    const double sc = 1.0 / std::sqrt(static_cast<double>(L.dh));
    RealMatrix dq(L.n, L.d), dk(L.n, L.d), dv(L.n, L.d);
    std::vector<double> dp(L.n);
    for (std::size_t h = 0; h < L.heads; ++h) {
      const auto qh = head_rows(qv, L, h);
      const auto kh = head_rows(k.value(), L, h);
      const auto vt = head_cols(v.value(), L, h);
      const auto gh = head_rows(g, L, h);
      std::vector<double> dqh(L.n * L.dh, 0.0), dkh(L.n * L.dh, 0.0), dvh(L.n * L.dh, 0.0);
      for (std::size_t t = 0; t < L.n; ++t) {
        const std::size_t lo = L.lo[t], cnt = t - lo + 1;
        const double* p = probs->data() + h * L.per_head + L.offset[t];
        const double* gt = gh.data() + t * L.dh;
        std::fill(dp.begin(), dp.begin() + static_cast<std::ptrdiff_t>(cnt), 0.0);
        for (std::size_t c = 0; c < L.dh; ++c) {
          const double gc = gt[c];
          const double* vc = vt.data() + c * L.n + lo;
          for (std::size_t j = 0; j < cnt; ++j) dp[j] += gc * vc[j];
        }
        double pdp = 0.0;
        for (std::size_t j = 0; j < cnt; ++j) pdp += p[j] * dp[j];
        const double* qt = qh.data() + t * L.dh;
        double* dqt = dqh.data() + t * L.dh;
        for (std::size_t j = 0; j < cnt; ++j) {
          const double ds = p[j] * (dp[j] - pdp) * sc;
          const double* kj = kh.data() + (lo + j) * L.dh;
          double* dkj = dkh.data() + (lo + j) * L.dh;
          double* dvj = dvh.data() + (lo + j) * L.dh;
          for (std::size_t c = 0; c < L.dh; ++c) {
            dqt[c] += ds * kj[c];
            dkj[c] += ds * qt[c];
            dvj[c] += p[j] * gt[c];
          }
        }
      }
      for (std::size_t t = 0; t < L.n; ++t) {
        for (std::size_t c = 0; c < L.dh; ++c) {
          dq(t, h * L.dh + c) = dqh[t * L.dh + c];
          dk(t, h * L.dh + c) = dkh[t * L.dh + c];
          dv(t, h * L.dh + c) = dvh[t * L.dh + c];
        }
      }
    }
    tp.accumulate(q, dq);
    tp.accumulate(k, dk);
    tp.accumulate(v, dv);
  });
}

Var rope(Var x, std::span<const std::int64_t> positions, std::size_t n_heads, double base) {
  std::vector<std::int64_t> pos(positions.begin(), positions.end());
  RealMatrix y = rope_apply(x.value(), pos, n_heads, base, false);
  return x.tape().record(std::move(y), {x}, [x, pos = std::move(pos), n_heads, base](
                                                 Tape& tp, const RealMatrix& g) {
    tp.accumulate(x, rope_apply(g, pos, n_heads, base, true));
  });
}

Var embed(Var table, std::span<const TokenId> tokens) {
  std::vector<TokenId> ids(tokens.begin(), tokens.end());
  RealMatrix x = iptt::embed(table.value(), ids);
  return table.tape().record(std::move(x), {table}, [table, ids = std::move(ids)](
                                                        Tape& tp, const RealMatrix& g) {
    RealMatrix& buf = tp.grad_buffer(table);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      auto dst = buf.row(static_cast<std::size_t>(ids[t]));
      const auto src = g.row(t);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  });
}

Var cross_entropy(Var logits, std::span<const TokenId> targets, std::span<const double> weights) {
  const double loss = iptt::cross_entropy(logits.value(), targets, weights);
  std::vector<TokenId> tg(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  return logits.tape().record(RealMatrix(1, 1, loss), {logits},
                              [logits, tg = std::move(tg), w = std::move(w)](Tape& tp,
                                                                             const RealMatrix& g) {
                                const RealMatrix& lv = logits.value();
                                double wsum = 0.0;
                                for (double x : w) wsum += x;
                                if (wsum == 0.0) return;
                                RealMatrix& buf = tp.grad_buffer(logits);
                                for (std::size_t t = 0; t < lv.rows(); ++t) {
                                  if (w[t] == 0.0) continue;
                                  const auto row = lv.row(t);
                                  const double lse = row_logsumexp(row);
                                  const double c = g(0, 0) * w[t] / wsum;
                                  auto dst = buf.row(t);
                                  for (std::size_t j = 0; j < row.size(); ++j) {
                                    dst[j] += c * std::exp(row[j] - lse);
                                  }
                                  dst[static_cast<std::size_t>(tg[t])] -= c;
                                }
                              });
}

}  // namespace ad

ModelVars to_vars(ad::Tape& tape, const ModelParams& p, const ModelConfig& cfg,
                  const std::function<bool(const std::string&)>& trainable) {
  ModelVars v;
  v.layers.resize(p.layers.size());
  // Walk both structures in lockstep through the shared visitor order.
  std::vector<const RealMatrix*> src;
  std::vector<std::string> names;
  visit_params(p, cfg, [&](const std::string& name, const RealMatrix& m) {
    names.push_back(name);
    src.push_back(&m);
  });
  std::size_t i = 0;
  visit_params(v, cfg, [&](const std::string&, ad::Var& var) {
    const bool train = !trainable || trainable(names[i]);
    var = train ? tape.parameter(*src[i]) : tape.constant(*src[i]);
    ++i;
  });
  return v;
}

std::vector<std::pair<std::string, RealMatrix>> collect_grads(const ad::Tape& tape,
                                                              const ModelVars& vars,
                                                              const ModelConfig& cfg) {
  std::vector<std::pair<std::string, RealMatrix>> out;
  visit_params(vars, cfg, [&](const std::string& name, const ad::Var& var) {
    out.emplace_back(name, tape.grad(var));
  });
  return out;
}

std::vector<ad::NamedMatrix> named_params(const ModelParams& p, const ModelConfig& cfg) {
  std::vector<ad::NamedMatrix> out;
  visit_params(p, cfg, [&](const std::string& name, const RealMatrix& m) {
    out.push_back({name, m});
  });
  return out;
}

ModelVars vars_from(std::span<const ad::Var> flat, const ModelConfig& cfg) {
  ModelVars v;
  v.layers.resize(cfg.n_layers);
  std::size_t i = 0;
  visit_params(v, cfg, [&](const std::string& name, ad::Var& var) {
    if (i >= flat.size()) throw Error("vars_from: missing tensor " + name);
    var = flat[i++];
  });
  if (i != flat.size()) throw Error("vars_from: " + std::to_string(flat.size() - i) + " extra tensors");
  return v;
}

ad::Var model_forward(ad::Tape& tape, std::span<const TokenId> tokens, const ModelVars& p,
                      const ModelConfig& cfg, const BoundaryMask& mask) {
  (void)tape;
  check_tokens(tokens, cfg);
  mask.validate(tokens.size());
  const ad::Var x0 = ad::embed(p.embedding, tokens);
  return run_model(x0, p, cfg, mask, TttPath::Sequential);
}

ad::Var ntp_loss(ad::Var logits, std::span<const TokenId> tokens, const BoundaryMask& mask) {
  if (tokens.size() != logits.rows()) throw Error("ntp_loss: token count mismatch");
  const auto targets = shifted_targets(tokens);
  const auto w = ntp_weights(mask, tokens.size());
  return ad::cross_entropy(logits, targets, w);
}

}  // namespace iptt
