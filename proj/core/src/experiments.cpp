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

#include "iptt/experiments.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "json.hpp"

namespace iptt {

namespace {

using json = nlohmann::ordered_json;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Running mean and variance.
struct Welford {
  std::size_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;
  void push(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  double se() const {
    if (n < 2) return 0.0;
    return std::sqrt(m2 / static_cast<double>(n - 1) / static_cast<double>(n));
  }
};

// Largest off-diagonal |E_i . E_j| and smallest row norm.
std::pair<double, double> coherence(const RealMatrix& e) {
  double eps = 0.0, min_norm = INFINITY;
  for (std::size_t i = 0; i < e.rows(); ++i) {
    min_norm = std::min(min_norm, std::sqrt(dot(e.row(i), e.row(i))));
    for (std::size_t j = i + 1; j < e.rows(); ++j) {
      eps = std::max(eps, std::abs(dot(e.row(i), e.row(j))));
    }
  }
  return {eps, min_norm};
}

RealMatrix random_unit_rows(SeededRng& rng, std::size_t rows, std::size_t cols) {
  RealMatrix e = rng.normal_matrix(rows, cols, 1.0);
  for (std::size_t i = 0; i < rows; ++i) {
    auto r = e.row(i);
    const double norm = std::sqrt(dot(r, r));
    for (double& x : r) x /= norm;
  }
  return e;
}

TokenId random_token(SeededRng& rng, std::size_t vocab) {
  return static_cast<TokenId>(rng.below(vocab));
}

}  // namespace

// Induction bench -----------------------------------------------------------

std::string_view to_string(TargetKind k) {
  return k == TargetKind::LmAligned ? "lm_aligned" : "reconstruction";
}

std::string_view to_string(EmbeddingMode m) {
  switch (m) {
    case EmbeddingMode::Auto: return "auto";
    case EmbeddingMode::Orthonormal: return "orthonormal";
    case EmbeddingMode::Random: return "random";
    case EmbeddingMode::FitToCap: return "fit_to_cap";
  }
  return "?";
}

EmbeddingMode parse_embedding_mode(std::string_view s) {
  for (auto m : {EmbeddingMode::Auto, EmbeddingMode::Orthonormal, EmbeddingMode::Random,
                 EmbeddingMode::FitToCap}) {
    if (s == to_string(m)) return m;
  }
  throw Error("unknown embedding mode '" + std::string(s) +
              "' (expected auto, orthonormal, random or fit_to_cap)");
}

void InductionSettings::validate() const {
  if (vocab < 2) throw Error("induction.vocab must be at least 2");
  if (d_model == 0 || d_ff == 0) throw Error("induction.d_model and induction.d_ff must be positive");
  if (prior_len < 2) throw Error("induction.prior_len must be at least 2");
  if (!(epsilon_cap >= 0.0)) throw Error("induction.epsilon_cap must be non-negative");
  if (!std::isfinite(c_align) || !std::isfinite(eta)) {
    throw Error("induction.c_align and induction.eta must be finite");
  }
  if (eta < 0.0) throw Error("induction.eta must be non-negative");
  if (embedding == EmbeddingMode::Orthonormal && vocab > d_model) {
    throw Error("induction.embedding=orthonormal needs induction.vocab (" + std::to_string(vocab) +
                ") <= induction.d_model (" + std::to_string(d_model) + ")");
  }
}

InductionInstance build_induction_instance(SeededRng& rng, const InductionSettings& s) {
  s.validate();
  InductionInstance inst;
  EmbeddingMode mode = s.embedding;
  if (mode == EmbeddingMode::Auto) {
    mode = s.vocab <= s.d_model ? EmbeddingMode::Orthonormal : EmbeddingMode::FitToCap;
  }
  switch (mode) {
    case EmbeddingMode::Orthonormal:
      inst.embedding = RealMatrix(s.vocab, s.d_model);
      for (std::size_t i = 0; i < s.vocab; ++i) inst.embedding(i, i) = 1.0;
      break;
    case EmbeddingMode::Random: {
      bool ok = false;
      for (std::size_t attempt = 0; attempt < std::max<std::size_t>(s.max_resample, 1); ++attempt) {
        inst.embedding = random_unit_rows(rng, s.vocab, s.d_model);
        if (coherence(inst.embedding).first <= s.epsilon_cap) {
          ok = true;
          break;
        }
      }
      if (!ok) {
        throw Error("epsilon_cap " + format_double(s.epsilon_cap) + " not reached by " +
                    std::to_string(s.vocab) + " random unit embeddings in dimension " +
                    std::to_string(s.d_model) + " after " + std::to_string(s.max_resample) +
                    " draws");
      }
      break;
    }
    case EmbeddingMode::FitToCap: {
      if (!(s.epsilon_cap > 0.0)) throw Error("induction.embedding=fit_to_cap needs epsilon_cap > 0");
      RealMatrix unit = random_unit_rows(rng, s.vocab, s.d_model);
      const double mu = coherence(unit).first;
      double r = mu > 0.0 ? std::sqrt(s.epsilon_cap / mu) : 1.0;
      for (;;) {
        inst.embedding = scale(unit, r);
        if (coherence(inst.embedding).first <= s.epsilon_cap) break;
        r = std::nextafter(r, 0.0);
      }
      break;
    }
    case EmbeddingMode::Auto: break;
  }
  std::tie(inst.epsilon, inst.c_norm) = coherence(inst.embedding);

  const std::size_t n = s.prior_len;
  inst.n = n;
  inst.eta = s.eta;
  inst.zero_unrelated = s.zero_unrelated;
  inst.t_star = static_cast<std::size_t>(rng.below(n - 1));
  inst.k_star = random_token(rng, s.vocab);
  do {
    inst.v_star = random_token(rng, s.vocab);
  } while (inst.v_star == inst.k_star);

  // z_n is a unit vector; z_{t*} adds noise orthogonal to it.
  inst.z = RealMatrix(n + 1, s.d_ff);
  const RealMatrix zn = random_unit_rows(rng, 1, s.d_ff);
  std::copy(zn.values().begin(), zn.values().end(), inst.z.row(n).begin());
  const double zn2 = dot(zn.values(), zn.values());
  RealMatrix g = rng.normal_matrix(1, s.d_ff, 1.0 / std::sqrt(static_cast<double>(s.d_ff)));
  const double proj = dot(g.values(), zn.values()) / zn2;
  auto zt = inst.z.row(inst.t_star);
  for (std::size_t j = 0; j < s.d_ff; ++j) {
    zt[j] = (g(0, j) - proj * zn(0, j)) + (s.c_align / zn2) * zn(0, j);
  }
  inst.c_align = dot(zt, inst.z.row(n));

  inst.tokens.assign(n + 1, 0);
  inst.tokens[inst.t_star] = inst.k_star;
  inst.tokens[inst.t_star + 1] = inst.v_star;
  inst.tokens[n] = inst.k_star;
  inst.signs.assign(n, 1.0);
  resample_unrelated(inst, rng);
  return inst;
}

void resample_unrelated(InductionInstance& inst, SeededRng& rng) {
  const std::size_t n = inst.n, vocab = inst.embedding.rows(), d_ff = inst.z.cols();
  const double std = 1.0 / std::sqrt(static_cast<double>(d_ff));
  for (std::size_t t = 0; t < n; ++t) {
    if (t == inst.t_star) continue;
    if (t != inst.t_star + 1) inst.tokens[t] = random_token(rng, vocab);
    for (double& x : inst.z.row(t)) x = rng.normal() * std;
    inst.signs[t] = rng.rademacher();
  }
}

namespace {

// Row index of V_t in the embedding table.
TokenId value_token(const InductionInstance& inst, std::size_t t, TargetKind kind) {
  return kind == TargetKind::LmAligned ? inst.tokens[t + 1] : inst.tokens[t];
}

// eta * E u, with u = sum over the selected t of s_t (z_t . z_n) V_t.
std::vector<double> readout(const InductionInstance& inst, TargetKind kind, bool with_t_star,
                            bool with_rest) {
  const std::size_t d = inst.embedding.cols();
  std::vector<double> u(d, 0.0);
  const auto zn = inst.z.row(inst.n);
  for (std::size_t t = 0; t < inst.n; ++t) {
    const bool is_star = t == inst.t_star;
    if (is_star ? !with_t_star : (!with_rest || inst.zero_unrelated)) continue;
    const double c = inst.signs[t] * dot(inst.z.row(t), zn);
    const auto v = inst.embedding.row(static_cast<std::size_t>(value_token(inst, t, kind)));
    for (std::size_t i = 0; i < d; ++i) u[i] += c * v[i];
  }
  std::vector<double> out(inst.embedding.rows());
  for (std::size_t w = 0; w < out.size(); ++w) out[w] = inst.eta * dot(inst.embedding.row(w), u);
  return out;
}

}  // namespace

std::vector<double> logit_delta(const InductionInstance& inst, TargetKind kind) {
  return readout(inst, kind, true, true);
}

LogitDecomposition decompose_logit_delta(const InductionInstance& inst, TargetKind kind) {
  return {readout(inst, kind, true, false), readout(inst, kind, false, true)};
}

std::string TheoremReport::to_json() const {
  json j;
  j["trials"] = trials;
  j["seed"] = seed;
  j["settings"] = {{"vocab", settings.vocab},
                   {"d_model", settings.d_model},
                   {"d_ff", settings.d_ff},
                   {"epsilon_cap", settings.epsilon_cap},
                   {"c_align", settings.c_align},
                   {"eta", settings.eta},
                   {"prior_len", settings.prior_len},
                   {"embedding", std::string(to_string(settings.embedding))},
                   {"zero_unrelated", settings.zero_unrelated}};
  j["constants"] = {{"epsilon", epsilon}, {"c_norm", c_norm}, {"c_align", c_align}, {"eta", eta}};
  j["lm_aligned"] = {{"mean", lm_mean},
                     {"se", lm_se},
                     {"t_star_term", lm_t_star_term},
                     {"remainder_mean", lm_remainder_mean},
                     {"other_max_abs_mean", lm_other_max_abs_mean},
                     {"other_argmax", lm_other_argmax}};
  j["reconstruction"] = {{"mean", rec_mean},
                         {"se", rec_se},
                         {"t_star_term", rec_t_star_term},
                         {"remainder_mean", rec_remainder_mean}};
  j["bounds"] = {{"correct_logit", bound_correct}, {"other_logits", bound_other}};
  json checks_json = json::array();
  for (const auto& c : checks) {
    checks_json.push_back({{"name", c.name},
                           {"observed", c.observed},
                           {"bound", c.bound},
                           {"se", c.se},
                           {"tolerance", c.tolerance},
                           {"confidence_se", 3},
                           {"pass", c.pass}});
  }
  j["checks"] = checks_json;
  j["pass"] = pass;
  return j.dump(2) + "\n";
}

TheoremReport theorem_bench(const InductionSettings& s, std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw Error("theorem_bench: trials must be at least 1");
  SeededRng rng(seed);
  InductionInstance inst = build_induction_instance(rng, s);
  const std::size_t vocab = s.vocab;
  const auto v = static_cast<std::size_t>(inst.v_star);

  std::vector<Welford> lm(vocab);
  Welford rec;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    if (trial > 0) resample_unrelated(inst, rng);
    const auto dl = logit_delta(inst, TargetKind::LmAligned);
    for (std::size_t w = 0; w < vocab; ++w) lm[w].push(dl[w]);
    rec.push(logit_delta(inst, TargetKind::Reconstruction)[v]);
  }

  TheoremReport r;
  r.trials = trials;
  r.seed = seed;
  r.settings = s;
  r.epsilon = inst.epsilon;
  r.c_norm = inst.c_norm;
  r.c_align = inst.c_align;
  r.eta = inst.eta;
  r.lm_mean = lm[v].mean;
  r.lm_se = lm[v].se();
  r.rec_mean = rec.mean;
  r.rec_se = rec.se();
  r.lm_t_star_term = decompose_logit_delta(inst, TargetKind::LmAligned).t_star_term[v];
  r.rec_t_star_term = decompose_logit_delta(inst, TargetKind::Reconstruction).t_star_term[v];
  // The t* term does not change across trials.
  r.lm_remainder_mean = r.lm_mean - r.lm_t_star_term;
  r.rec_remainder_mean = r.rec_mean - r.rec_t_star_term;
  r.bound_correct = s.eta * inst.c_norm * inst.c_norm * inst.c_align;
  r.bound_other = std::abs(s.eta * inst.epsilon * inst.c_align);

  BoundCheck a{"correct_logit", r.lm_mean, r.bound_correct, r.lm_se, 3.0 * r.lm_se};
  a.pass = a.observed >= a.bound - a.tolerance;

  // Each w != v* is held to its own 3-SE band; the reported row is the one
  // with the largest |mean|.
  BoundCheck b{"other_logits", 0.0, r.bound_other, 0.0, 0.0, true};
  for (std::size_t w = 0; w < vocab; ++w) {
    if (w == v) continue;
    const double m = std::abs(lm[w].mean), tol = 3.0 * lm[w].se();
    if (m > r.bound_other + tol) b.pass = false;
    if (m >= b.observed) {
      b.observed = m;
      b.se = lm[w].se();
      b.tolerance = tol;
      r.lm_other_argmax = static_cast<TokenId>(w);
    }
  }
  r.lm_other_max_abs_mean = b.observed;

  BoundCheck c{"reconstruction", std::abs(r.rec_mean), r.bound_other, r.rec_se, 3.0 * r.rec_se};
  c.pass = c.observed <= c.bound + c.tolerance;

  r.checks = {a, b, c};
  r.pass = a.pass && b.pass && c.pass;
  return r;
}

// Recall corpus --------------------------------------------------------------

void RecallSettings::validate() const {
  if (n_keys == 0) throw Error("recall.n_keys must be positive");
  if (key_alphabet > 26 || value_alphabet > 26 || filler_alphabet > 10) {
    throw Error("recall alphabets are limited to 26 keys, 26 values and 10 filler symbols");
  }
  if (value_alphabet < 2 || filler_alphabet < 1) {
    throw Error("recall.value_alphabet must be at least 2 and recall.filler_alphabet at least 1");
  }
  if (n_keys > key_alphabet) {
    throw Error("recall.n_keys (" + std::to_string(n_keys) + ") exceeds recall.key_alphabet (" +
                std::to_string(key_alphabet) + ")");
  }
  if (n_queries > n_keys) {
    throw Error("recall.n_queries (" + std::to_string(n_queries) + ") exceeds recall.n_keys (" +
                std::to_string(n_keys) + ")");
  }
  if (min_filler > max_filler) {
    throw Error("recall.min_filler (" + std::to_string(min_filler) +
                ") exceeds recall.max_filler (" + std::to_string(max_filler) + ")");
  }
  if (total_len && *total_len < base_len() + max_filler) {
    throw Error("recall.total_len (" + std::to_string(*total_len) +
                ") is shorter than the definitions, recall.max_filler and queries (" +
                std::to_string(base_len() + max_filler) + ")");
  }
}

std::size_t RecallSettings::base_len() const {
  return 3 * n_keys + 2 + 3 * n_queries;
}

RecallDocument make_recall_document(SeededRng& rng, const RecallSettings& s,
                                    std::size_t filler_len) {
  s.validate();
  std::vector<char> keys(s.key_alphabet);
  std::iota(keys.begin(), keys.end(), 'A');
  // Partial Fisher-Yates for n_keys distinct keys.
  for (std::size_t i = 0; i < s.n_keys; ++i) {
    std::swap(keys[i], keys[i + rng.below(s.key_alphabet - i)]);
  }
  keys.resize(s.n_keys);
  std::vector<char> values(s.n_keys);
  for (char& v : values) v = static_cast<char>('a' + rng.below(s.value_alphabet));
  auto filler = [&](std::string& out, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) {
      out.push_back(static_cast<char>('0' + rng.below(s.filler_alphabet)));
    }
  };

  RecallDocument doc;
  const std::size_t body = s.base_len() + filler_len;
  if (s.total_len) filler(doc.text, *s.total_len - body);
  for (std::size_t i = 0; i < s.n_keys; ++i) {
    doc.text += keys[i];
    doc.text += values[i];
    doc.text += ' ';
  }
  doc.text += '\n';
  filler(doc.text, filler_len);
  doc.text += '\n';
  std::vector<std::size_t> order(s.n_keys);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < s.n_queries; ++i) std::swap(order[i], order[i + rng.below(s.n_keys - i)]);
  for (std::size_t i = 0; i < s.n_queries; ++i) {
    doc.text += keys[order[i]];
    doc.value_positions.push_back(doc.text.size());
    doc.text += values[order[i]];
    doc.text += ' ';
  }
  return doc;
}

std::vector<RecallDocument> make_recall_documents(const RecallSettings& s, std::size_t count,
                                                  std::uint64_t seed) {
  s.validate();
  SeededRng rng(seed);
  std::vector<RecallDocument> docs;
  docs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t filler = s.min_filler + rng.below(s.max_filler - s.min_filler + 1);
    docs.push_back(make_recall_document(rng, s, filler));
  }
  return docs;
}

Corpus recall_corpus(std::span<const RecallDocument> docs) {
  std::vector<std::string> texts;
  texts.reserve(docs.size());
  for (const auto& d : docs) texts.push_back(d.text);
  return corpus_from_documents(texts);
}

namespace {

std::size_t argmax_row(const RealMatrix& m, std::size_t r) {
  const auto row = m.row(r);
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

double recall_accuracy(const ModelParams& p, const ModelConfig& cfg,
                       std::span<const RecallDocument> docs) {
  std::size_t hits = 0, total = 0;
  for (const auto& doc : docs) {
    const auto tokens = tokenize(doc.text);
    const RealMatrix logits = model_forward(tokens, p, cfg);
    for (std::size_t pos : doc.value_positions) {
      if (pos == 0) continue;
      ++total;
      if (argmax_row(logits, pos - 1) == static_cast<std::size_t>(tokens[pos])) ++hits;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

// Sliding-window perplexity --------------------------------------------------

std::vector<PplPoint> sliding_window_ppl(const ModelParams& p, const ModelConfig& cfg,
                                         std::span<const std::vector<TokenId>> sequences,
                                         std::size_t block, std::span<const std::size_t> prefixes,
                                         std::size_t batch) {
  if (block == 0) throw Error("sliding_window_ppl: block length must be positive");
  if (batch == 0) throw Error("sliding_window_ppl: batch must be positive");
  if (sequences.empty()) throw Error("sliding_window_ppl: no sequences");
  std::vector<PplPoint> out;
  for (std::size_t len : prefixes) {
    if (len == 0) throw Error("sliding_window_ppl: prefix length must be at least 1");
    for (const auto& s : sequences) {
      if (len + block > s.size()) {
        throw Error("sliding_window_ppl: prefix " + std::to_string(len) + " + block " +
                    std::to_string(block) + " exceeds sequence length " + std::to_string(s.size()));
      }
    }
    // Per-sequence block NLL, summed in sequence order afterwards so the
    // result does not depend on the batch split.
    std::vector<double> nll(sequences.size(), 0.0);
    for (std::size_t b0 = 0; b0 < sequences.size(); b0 += batch) {
      const std::size_t b1 = std::min(b0 + batch, sequences.size());
      const std::size_t w = len + block;
      std::vector<TokenId> packed;
      BoundaryMask mask;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& s = sequences[i];
        packed.insert(packed.end(), s.end() - static_cast<std::ptrdiff_t>(w), s.end());
        mask.doc_ids.insert(mask.doc_ids.end(), w, static_cast<std::int64_t>(i - b0));
      }
      const RealMatrix logits = model_forward(packed, p, cfg, mask);
      for (std::size_t i = b0; i < b1; ++i) {
        const std::size_t base = (i - b0) * w;
        double acc = 0.0;
        for (std::size_t t = len - 1; t + 1 < w; ++t) {
          const auto row = logits.row(base + t);
          const double mx = *std::max_element(row.begin(), row.end());
          double z = 0.0;
          for (double x : row) z += std::exp(x - mx);
          acc += (std::log(z) + mx) - row[static_cast<std::size_t>(packed[base + t + 1])];
        }
        nll[i] = acc;
      }
    }
    PplPoint pt;
    pt.prefix = len;
    pt.tokens = block * sequences.size();
    double total = 0.0;
    for (double x : nll) total += x;
    pt.nll = total / static_cast<double>(pt.tokens);
    pt.ppl = std::exp(pt.nll);
    out.push_back(pt);
  }
  return out;
}

std::string ppl_csv(std::span<const PplPoint> rows) {
  std::string s = "prefix,nll,ppl,tokens\n";
  for (const auto& r : rows) {
    s += std::to_string(r.prefix) + "," + format_double(r.nll) + "," + format_double(r.ppl) + "," +
         std::to_string(r.tokens) + "\n";
  }
  return s;
}

// Ablations ------------------------------------------------------------------

std::string_view to_string(TargetVariant v) {
  switch (v) {
    case TargetVariant::Full: return "full";
    case TargetVariant::NoConv: return "no-conv";
    case TargetVariant::NoProj: return "no-proj";
    case TargetVariant::Reconstruction: return "reconstruction";
  }
  return "?";
}

TargetVariant parse_target_variant(std::string_view s) {
  for (auto v : {TargetVariant::Full, TargetVariant::NoConv, TargetVariant::NoProj,
                 TargetVariant::Reconstruction}) {
    if (s == to_string(v)) return v;
  }
  throw Error("unknown variant '" + std::string(s) +
              "' (expected full, no-conv, no-proj, reconstruction, chunk=N, ttt_every=N, "
              "chunk-sweep or ttt_every-sweep)");
}

void apply_variant(TargetVariant v, ModelConfig& model, TrainConfig& train) {
  switch (v) {
    case TargetVariant::Full: break;
    case TargetVariant::NoConv:
    case TargetVariant::Reconstruction:
      model.ttt.conv_offsets = {0};
      model.ttt.target_source = v == TargetVariant::NoConv ? TargetSource::TokenEmbedding
                                                           : TargetSource::HiddenState;
      train.train_conv = false;
      break;
    case TargetVariant::NoProj: train.train_target = false; break;
  }
}

void apply_variant_params(TargetVariant v, const ModelConfig& model, ModelParams& params) {
  for (std::size_t l = 0; l < model.n_layers; ++l) {
    if (!model.is_ttt_layer(l)) continue;
    auto& mlp = params.layers[l].mlp;
    if (v == TargetVariant::NoConv || v == TargetVariant::Reconstruction) {
      mlp.conv_kernel = RealMatrix(1, model.d_model, 1.0);
    } else if (v == TargetVariant::NoProj) {
      mlp.w_target = RealMatrix::identity(model.d_model);
    }
  }
}

std::vector<AblationSpec> expand_variants(std::span<const std::string> names,
                                          std::span<const std::size_t> chunk_sweep,
                                          std::span<const std::size_t> ttt_every_sweep) {
  auto number = [](const std::string& name, std::size_t prefix) {
    const std::string digits = name.substr(prefix);
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) {
      throw Error("variant '" + name + "' needs a non-negative integer after '='");
    }
    return static_cast<std::size_t>(std::stoull(digits));
  };
  std::vector<AblationSpec> out;
  auto add_chunk = [&](std::size_t c) {
    AblationSpec a;
    a.name = "chunk=" + std::to_string(c);
    a.chunk_size = c;
    out.push_back(a);
  };
  auto add_every = [&](std::size_t e) {
    AblationSpec a;
    a.name = "ttt_every=" + std::to_string(e);
    a.ttt_every = e;
    out.push_back(a);
  };
  for (const auto& name : names) {
    if (name == "chunk-sweep") {
      if (chunk_sweep.empty()) throw Error("variant 'chunk-sweep' needs a non-empty chunk list");
      for (std::size_t c : chunk_sweep) add_chunk(c);
    } else if (name == "ttt_every-sweep") {
      if (ttt_every_sweep.empty()) {
        throw Error("variant 'ttt_every-sweep' needs a non-empty ttt_every list");
      }
      for (std::size_t e : ttt_every_sweep) add_every(e);
    } else if (name.rfind("chunk=", 0) == 0) {
      add_chunk(number(name, 6));
    } else if (name.rfind("ttt_every=", 0) == 0) {
      add_every(number(name, 10));
    } else {
      AblationSpec a;
      a.variant = parse_target_variant(name);
      a.name = name;
      out.push_back(a);
    }
  }
  return out;
}

TrainedModel train_on_recall(const ModelConfig& model, const TrainConfig& train,
                             const RecallExperiment& exp, TargetVariant variant,
                             const StepCallback& on_step) {
  TrainedModel m;
  m.model = model;
  m.train = train;
  apply_variant(variant, m.model, m.train);
  m.model.validate();
  m.train.validate();
  const auto docs = make_recall_documents(exp.train_docs, exp.n_train_docs, exp.data_seed);
  const Corpus corpus = recall_corpus(docs);
  m.state = init_train_state(m.model, m.train);
  apply_variant_params(variant, m.model, m.state.params);
  iptt::train(m.state, m.model, m.train, corpus, m.train.total_steps, [&](const StepMetrics& s) {
    m.metrics.push_back(s);
    if (on_step) on_step(s);
  });
  return m;
}

std::vector<RecallDocument> recall_eval_documents(const RecallExperiment& exp) {
  return make_recall_documents(exp.eval_docs, exp.n_eval_docs,
                               SeededRng::derive(exp.data_seed, 0x6576616c));
}

AblationRow evaluate_recall(const TrainedModel& m, const RecallExperiment& exp,
                            const std::string& name) {
  AblationRow row;
  row.name = name;
  row.steps = m.metrics.size();
  if (!m.metrics.empty()) {
    const std::size_t tail = std::max<std::size_t>(1, m.metrics.size() / 10);
    double s = 0.0;
    for (std::size_t i = m.metrics.size() - tail; i < m.metrics.size(); ++i) s += m.metrics[i].loss;
    row.final_train_loss = s / static_cast<double>(tail);
  }
  const auto docs = recall_eval_documents(exp);
  double loss = 0.0;
  for (const auto& d : docs) {
    const auto tokens = tokenize(d.text);
    loss += ntp_loss(model_forward(tokens, m.state.params, m.model), tokens);
  }
  row.eval_loss = docs.empty() ? 0.0 : loss / static_cast<double>(docs.size());
  row.recall_accuracy = recall_accuracy(m.state.params, m.model, docs);
  return row;
}

std::vector<AblationRow> ablation_run(const ModelConfig& base, const TrainConfig& train,
                                      const RecallExperiment& exp,
                                      std::span<const AblationSpec> variants,
                                      const StepCallback& on_step) {
  std::vector<AblationRow> rows;
  for (const auto& spec : variants) {
    ModelConfig model = base;
    if (spec.chunk_size) model.ttt.chunk_size = *spec.chunk_size;
    if (spec.ttt_every) model.ttt_every = *spec.ttt_every;
    const TrainedModel m = train_on_recall(model, train, exp, spec.variant, on_step);
    rows.push_back(evaluate_recall(m, exp, spec.name));
  }
  return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::string s = "variant,steps,final_train_loss,eval_loss,recall_accuracy\n";
  for (const auto& r : rows) {
    s += r.name + "," + std::to_string(r.steps) + "," + format_double(r.final_train_loss) + "," +
         format_double(r.eval_loss) + "," + format_double(r.recall_accuracy) + "\n";
  }
  return s;
}

// Causality probe ------------------------------------------------------------

CausalityReport causality_probe(const ModelParams& p, const ModelConfig& cfg,
                                std::span<const TokenId> tokens, std::size_t q,
                                const BoundaryMask& mask) {
  if (q >= tokens.size()) {
    throw Error("causality_probe: position " + std::to_string(q) + " is outside a sequence of " +
                std::to_string(tokens.size()) + " tokens");
  }
  std::vector<TokenId> flipped(tokens.begin(), tokens.end());
  flipped[q] = static_cast<TokenId>((static_cast<std::size_t>(flipped[q]) + 1) % cfg.vocab_size);
  const RealMatrix a = model_forward(tokens, p, cfg, mask);
  const RealMatrix b = model_forward(flipped, p, cfg, mask);
  CausalityReport r;
  r.flip_position = q;
  for (std::size_t t = 0; t < a.rows() && !r.first_changed; ++t) {
    const auto ra = a.row(t), rb = b.row(t);
    for (std::size_t c = 0; c < ra.size(); ++c) {
      if (std::bit_cast<std::uint64_t>(ra[c]) != std::bit_cast<std::uint64_t>(rb[c])) {
        r.first_changed = t;
        break;
      }
    }
  }
  r.pass = !r.first_changed || *r.first_changed >= q;
  return r;
}

// Gradient check -------------------------------------------------------------

ModelParams active_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  SeededRng rng(seed);
  ModelParams p = init_model(cfg, rng);
  const double s = 0.5;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& b = p.layers[l];
    b.attn_norm = add(b.attn_norm, rng.normal_matrix(1, cfg.d_model, 0.1));
    b.mlp_norm = add(b.mlp_norm, rng.normal_matrix(1, cfg.d_model, 0.1));
    if (!cfg.is_ttt_layer(l)) continue;
    b.mlp.conv_kernel = rng.normal_matrix(cfg.ttt.conv_offsets.size(), cfg.d_model, s);
    b.mlp.w_target = rng.normal_matrix(cfg.d_model, cfg.d_model, s);
  }
  p.final_norm = add(p.final_norm, rng.normal_matrix(1, cfg.d_model, 0.1));
  return p;
}

ad::GradientReport model_grad_check(const ModelConfig& cfg, std::size_t seq_len,
                                    std::uint64_t seed, double h, double tolerance) {
  cfg.validate();
  const std::size_t n = seq_len > 0 ? seq_len : 2 * cfg.ttt.chunk_size;
  const ModelParams p = active_model_params(cfg, seed);
  SeededRng rng(SeededRng::derive(seed, 1));
  std::vector<TokenId> tokens(n);
  for (auto& t : tokens) t = random_token(rng, cfg.vocab_size);
  const ad::ScalarObjective f = [&](ad::Tape& tape, std::span<const ad::Var> flat) {
    const ModelVars vars = vars_from(flat, cfg);
    return ntp_loss(model_forward(tape, tokens, vars, cfg), tokens);
  };
  return ad::grad_check(f, named_params(p, cfg), h, tolerance);
}

std::string grad_check_json(const ad::GradientReport& r, double h) {
  json j;
  j["h"] = h;
  j["tolerance"] = r.tolerance;
  j["eps_abs"] = r.eps_abs;
  j["max_relative_error"] = r.max_relative_error;
  json params = json::array();
  for (const auto& g : r.params) {
    params.push_back({{"name", g.name}, {"max_relative_error", g.max_relative_error}});
  }
  j["params"] = params;
  j["pass"] = r.passed;
  return j.dump(2) + "\n";
}

// Scan benchmark -------------------------------------------------------------

std::vector<ScanBenchRow> scan_bench(const TttLayerConfig& cfg, std::size_t n_chunks,
                                     std::span<const int> workers, std::uint64_t seed,
                                     std::size_t repeats) {
  if (n_chunks == 0) throw Error("scan_bench: n_chunks must be at least 1");
  if (repeats == 0) repeats = 1;
  cfg.validate();
  SeededRng rng(seed);
  const std::size_t n = n_chunks * cfg.chunk_size, d = cfg.d_model, f = cfg.d_ff;
  const double s = 0.1;
  TttLayerParams p;
  p.w_up = rng.normal_matrix(f, d, s);
  p.w_gate = rng.normal_matrix(f, d, s);
  p.w_down0 = rng.normal_matrix(d, f, s);
  p.w_target = rng.normal_matrix(d, d, s);
  p.conv_kernel = rng.normal_matrix(cfg.conv_offsets.size(), d, s);
  const RealMatrix h = rng.normal_matrix(n, d, 1.0);
  const RealMatrix x0 = rng.normal_matrix(n, d, 1.0);
  const BoundaryMask mask = BoundaryMask::single(n);

  using clock = std::chrono::steady_clock;
  auto best_of = [&](auto&& fn) {
    double best = INFINITY;
    RealMatrix out;
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto t0 = clock::now();
      out = fn();
      best = std::min(best, std::chrono::duration<double>(clock::now() - t0).count());
    }
    return std::pair{best, out};
  };

  const auto [t_seq, ref] = best_of([&] { return forward_sequential(h, x0, p, cfg, mask).output; });
  std::vector<ScanBenchRow> rows;
  rows.push_back({"sequential", 1, t_seq, 1.0, 0.0, true});
  for (int w : workers) {
    if (w < 1) throw Error("scan_bench: worker counts must be positive");
    for (ScanMode mode : {ScanMode::SerialOrder, ScanMode::Tree}) {
      const auto [t, out] =
          best_of([&] { return forward_scan(h, x0, p, cfg, mask, mode, w).output; });
      ScanBenchRow row;
      row.mode = mode == ScanMode::SerialOrder ? "scan_serial" : "scan_tree";
      row.workers = w;
      row.seconds = t;
      row.speedup = t > 0.0 ? t_seq / t : 0.0;
      row.max_abs_diff = max_abs_diff(ref, out);
      row.bitwise_equal = bitwise_equal(ref, out);
      const bool agrees = mode == ScanMode::SerialOrder ? row.bitwise_equal : row.max_abs_diff <= 1e-10;
      if (!agrees) {
        throw Error("scan_bench: " + row.mode + " with " + std::to_string(w) +
                    " workers disagrees with the sequential forward (max abs diff " +
                    format_double(row.max_abs_diff) + ")");
      }
      rows.push_back(row);
    }
  }
  return rows;
}

std::string scan_bench_csv(std::span<const ScanBenchRow> rows) {
  std::string s = "mode,workers,seconds,speedup,max_abs_diff,bitwise_equal\n";
  for (const auto& r : rows) {
    s += r.mode + "," + std::to_string(r.workers) + "," + format_double(r.seconds) + "," +
         format_double(r.speedup) + "," + format_double(r.max_abs_diff) + "," +
         (r.bitwise_equal ? "true" : "false") + "\n";
  }
  return s;
}

}  // namespace iptt
