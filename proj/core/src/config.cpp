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

#include "iptt/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <set>

#include "json.hpp"

namespace iptt {

namespace {

using json = nlohmann::ordered_json;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string t = trim(text);
  if (t.size() >= 2 && t.front() == '[' && t.back() == ']') t = t.substr(1, t.size() - 2);
  if (trim(t).empty()) return out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = t.find(',', start);
    out.push_back(trim(std::string_view(t).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& what, const std::string& got) {
  throw Error("config key '" + key + "' expects " + what + ", got " + got);
}

template <class Int>
Int parse_int(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  Int v{};
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty()) {
    bad_value(key, std::is_signed_v<Int> ? "an integer" : "a non-negative integer", "'" + text + "'");
  }
  return v;
}

double parse_real(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || t.empty()) {
    bad_value(key, "a number", "'" + text + "'");
  }
  return v;
}

bool is_null_text(const std::string& text) {
  const std::string t = trim(text);
  return t == "none" || t == "null" || t.empty();
}

template <class T>
struct Codec;

template <class T>
  requires std::is_unsigned_v<T> && (!std::is_same_v<T, bool>)
struct Codec<T> {
  static json to(T v) { return v; }
  static T from_json(const std::string& key, const json& j) {
    if (!j.is_number_unsigned()) bad_value(key, "a non-negative integer", j.dump());
    return j.get<T>();
  }
  static T from_text(const std::string& key, const std::string& t) { return parse_int<T>(key, t); }
};

template <>
struct Codec<int> {
  static json to(int v) { return v; }
  static int from_json(const std::string& key, const json& j) {
    if (!j.is_number_integer()) bad_value(key, "an integer", j.dump());
    return j.get<int>();
  }
  static int from_text(const std::string& key, const std::string& t) { return parse_int<int>(key, t); }
};

template <>
struct Codec<double> {
  static json to(double v) { return v; }
  static double from_json(const std::string& key, const json& j) {
    if (!j.is_number()) bad_value(key, "a number", j.dump());
    return j.get<double>();
  }
  static double from_text(const std::string& key, const std::string& t) { return parse_real(key, t); }
};

template <>
struct Codec<bool> {
  static json to(bool v) { return v; }
  static bool from_json(const std::string& key, const json& j) {
    if (!j.is_boolean()) bad_value(key, "true or false", j.dump());
    return j.get<bool>();
  }
  static bool from_text(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    if (t == "true" || t == "1") return true;
    if (t == "false" || t == "0") return false;
    bad_value(key, "true or false", "'" + text + "'");
  }
};

template <>
struct Codec<std::string> {
  static json to(const std::string& v) { return v; }
  static std::string from_json(const std::string& key, const json& j) {
    if (!j.is_string()) bad_value(key, "a string", j.dump());
    return j.get<std::string>();
  }
  static std::string from_text(const std::string&, const std::string& t) { return trim(t); }
};

template <class T>
struct Codec<std::optional<T>> {
  static json to(const std::optional<T>& v) { return v ? Codec<T>::to(*v) : json(nullptr); }
  static std::optional<T> from_json(const std::string& key, const json& j) {
    if (j.is_null()) return std::nullopt;
    return Codec<T>::from_json(key, j);
  }
  static std::optional<T> from_text(const std::string& key, const std::string& t) {
    if (is_null_text(t)) return std::nullopt;
    return Codec<T>::from_text(key, t);
  }
};

template <class T>
struct Codec<std::vector<T>> {
  static json to(const std::vector<T>& v) {
    json a = json::array();
    for (const auto& x : v) a.push_back(Codec<T>::to(x));
    return a;
  }
  static std::vector<T> from_json(const std::string& key, const json& j) {
    if (!j.is_array()) bad_value(key, "a list", j.dump());
    std::vector<T> out;
    for (const auto& x : j) out.push_back(Codec<T>::from_json(key, x));
    return out;
  }
  static std::vector<T> from_text(const std::string& key, const std::string& t) {
    std::vector<T> out;
    for (const auto& item : split_list(t)) out.push_back(Codec<T>::from_text(key, item));
    return out;
  }
};

// Enumerations go through their string names.
template <class E, auto ToString, auto Parse>
struct EnumCodec {
  static json to(E v) { return std::string(ToString(v)); }
  static E from_json(const std::string& key, const json& j) {
    if (!j.is_string()) bad_value(key, "a string", j.dump());
    return from_text(key, j.get<std::string>());
  }
  static E from_text(const std::string& key, const std::string& t) {
    try {
      return Parse(trim(t));
    } catch (const Error& e) {
      throw Error("config key '" + key + "': " + e.what());
    }
  }
};

template <>
struct Codec<Activation>
    : EnumCodec<Activation, static_cast<std::string_view (*)(Activation)>(&to_string),
                &parse_activation> {};
template <>
struct Codec<TargetSource>
    : EnumCodec<TargetSource, static_cast<std::string_view (*)(TargetSource)>(&to_string),
                &parse_target_source> {};
template <>
struct Codec<Schedule>
    : EnumCodec<Schedule, static_cast<std::string_view (*)(Schedule)>(&to_string),
                &parse_schedule> {};
template <>
struct Codec<SampleMode>
    : EnumCodec<SampleMode, static_cast<std::string_view (*)(SampleMode)>(&to_string),
                &parse_sample_mode> {};
template <>
struct Codec<EmbeddingMode>
    : EnumCodec<EmbeddingMode, static_cast<std::string_view (*)(EmbeddingMode)>(&to_string),
                &parse_embedding_mode> {};

struct Entry {
  std::string key;
  std::string help;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set_json;
  std::function<void(RunConfig&, const std::string&)> set_text;
};

template <class Access>
Entry make_entry(std::string key, std::string help, Access access) {
  using T = std::remove_cvref_t<decltype(access(std::declval<RunConfig&>()))>;
  Entry e;
  e.key = key;
  e.help = std::move(help);
  e.get = [access](const RunConfig& c) { return Codec<T>::to(access(const_cast<RunConfig&>(c))); };
  e.set_json = [access, key](RunConfig& c, const json& j) { access(c) = Codec<T>::from_json(key, j); };
  e.set_text = [access, key](RunConfig& c, const std::string& t) {
    access(c) = Codec<T>::from_text(key, t);
  };
  return e;
}

#define IPTT_KEY(name, help, field) \
  make_entry(name, help, [](RunConfig& c) -> auto& { return c.field; })

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      IPTT_KEY("model.vocab_size", "vocabulary size (byte tokenizer needs 257)", model.vocab_size),
      IPTT_KEY("model.d_model", "residual width", model.d_model),
      IPTT_KEY("model.n_layers", "number of blocks", model.n_layers),
      IPTT_KEY("model.n_heads", "attention heads", model.n_heads),
      IPTT_KEY("model.d_ff", "MLP hidden width", model.d_ff),
      IPTT_KEY("model.window", "sliding attention window, none = full attention", model.window),
      IPTT_KEY("model.rope_base", "rotary embedding base", model.rope_base),
      IPTT_KEY("model.ttt_every", "every k-th block has a TTT MLP, 0 = none", model.ttt_every),
      IPTT_KEY("model.tie_embeddings", "share the embedding and unembedding", model.tie_embeddings),
      IPTT_KEY("model.norm_eps", "RMSNorm epsilon", model.norm_eps),
      IPTT_KEY("model.init_std", "initializer standard deviation", model.init_std),
      IPTT_KEY("ttt.chunk_size", "tokens per fast-weight update", model.ttt.chunk_size),
      IPTT_KEY("ttt.conv_offsets", "token offsets of the target convolution", model.ttt.conv_offsets),
      IPTT_KEY("ttt.eta", "fast-weight learning rate", model.ttt.eta),
      IPTT_KEY("ttt.clip_tau", "per-chunk update norm clip, none = off", model.ttt.clip_tau),
      IPTT_KEY("ttt.activation", "silu or gelu", model.ttt.activation),
      IPTT_KEY("ttt.target_source", "token_embedding or hidden_state", model.ttt.target_source),
      IPTT_KEY("train.learning_rate", "peak AdamW learning rate", train.learning_rate),
      IPTT_KEY("train.beta1", "AdamW beta1", train.beta1),
      IPTT_KEY("train.beta2", "AdamW beta2", train.beta2),
      IPTT_KEY("train.adam_eps", "AdamW epsilon", train.adam_eps),
      IPTT_KEY("train.weight_decay", "decoupled weight decay", train.weight_decay),
      IPTT_KEY("train.grad_clip", "global gradient norm clip", train.grad_clip),
      IPTT_KEY("train.warmup_steps", "linear warmup steps, none = 1% of total", train.warmup_steps),
      IPTT_KEY("train.total_steps", "optimizer steps", train.total_steps),
      IPTT_KEY("train.batch_tokens", "tokens per step", train.batch_tokens),
      IPTT_KEY("train.seq_len", "tokens per sequence", train.seq_len),
      IPTT_KEY("train.seed", "seed for initialization and batching", train.seed),
      IPTT_KEY("train.schedule", "constant or cosine", train.schedule),
      IPTT_KEY("train.min_lr_ratio", "cosine floor as a fraction of the peak", train.min_lr_ratio),
      IPTT_KEY("train.sample_mode", "random or document_aligned", train.sample_mode),
      IPTT_KEY("train.train_conv", "update the target convolution", train.train_conv),
      IPTT_KEY("train.train_target", "update W_target", train.train_target),
      IPTT_KEY("induction.vocab", "vocabulary size", induction.settings.vocab),
      IPTT_KEY("induction.d_model", "embedding width", induction.settings.d_model),
      IPTT_KEY("induction.d_ff", "activation width", induction.settings.d_ff),
      IPTT_KEY("induction.epsilon_cap", "largest allowed |E_i . E_j|", induction.settings.epsilon_cap),
      IPTT_KEY("induction.c_align", "z_{t*} . z_n", induction.settings.c_align),
      IPTT_KEY("induction.eta", "update learning rate", induction.settings.eta),
      IPTT_KEY("induction.prior_len", "query position n", induction.settings.prior_len),
      IPTT_KEY("induction.embedding", "auto, orthonormal, random or fit_to_cap",
               induction.settings.embedding),
      IPTT_KEY("induction.max_resample", "draws allowed in random mode", induction.settings.max_resample),
      IPTT_KEY("induction.zero_unrelated", "keep only the t* term", induction.settings.zero_unrelated),
      IPTT_KEY("induction.trials", "Monte Carlo trials", induction.trials),
      IPTT_KEY("induction.seed", "bench seed", induction.seed),
      IPTT_KEY("recall.n_keys", "definitions per document", recall.train_docs.n_keys),
      IPTT_KEY("recall.n_queries", "queries per document", recall.train_docs.n_queries),
      IPTT_KEY("recall.key_alphabet", "distinct key symbols", recall.train_docs.key_alphabet),
      IPTT_KEY("recall.value_alphabet", "distinct value symbols", recall.train_docs.value_alphabet),
      IPTT_KEY("recall.filler_alphabet", "distinct filler symbols", recall.train_docs.filler_alphabet),
      IPTT_KEY("recall.min_filler", "shortest training filler", recall.train_docs.min_filler),
      IPTT_KEY("recall.max_filler", "longest training filler", recall.train_docs.max_filler),
      IPTT_KEY("recall.eval_min_filler", "shortest evaluation filler", recall.eval_docs.min_filler),
      IPTT_KEY("recall.eval_max_filler", "longest evaluation filler", recall.eval_docs.max_filler),
      IPTT_KEY("recall.n_train_docs", "training documents", recall.n_train_docs),
      IPTT_KEY("recall.n_eval_docs", "held-out documents", recall.n_eval_docs),
      IPTT_KEY("recall.data_seed", "corpus seed", recall.data_seed),
      IPTT_KEY("eval.block", "final block length, none = recall query section", eval.block),
      IPTT_KEY("eval.prefixes", "prefix lengths", eval.prefixes),
      IPTT_KEY("eval.batch", "sequences per forward pass", eval.batch),
      IPTT_KEY("ablation.variants", "variant names", ablation.variants),
      IPTT_KEY("ablation.chunk_sweep", "chunk sizes for chunk-sweep", ablation.chunk_sweep),
      IPTT_KEY("ablation.ttt_every_sweep", "placements for ttt_every-sweep", ablation.ttt_every_sweep),
      IPTT_KEY("bench.chunks", "chunks per sequence", bench.chunks),
      IPTT_KEY("bench.workers", "worker counts", bench.workers),
      IPTT_KEY("bench.repeats", "timing repeats (best is kept)", bench.repeats),
      IPTT_KEY("bench.d_model", "layer width", bench.d_model),
      IPTT_KEY("bench.d_ff", "layer hidden width", bench.d_ff),
      IPTT_KEY("bench.chunk_size", "tokens per chunk", bench.chunk_size),
      IPTT_KEY("bench.seed", "weight seed", bench.seed),
      IPTT_KEY("causality.length", "sequence length", causality.length),
      IPTT_KEY("causality.positions", "flip positions, empty = 0,1,C-1,C,C+1,n-1", causality.positions),
      IPTT_KEY("causality.seed", "token and weight seed", causality.seed),
      IPTT_KEY("gradcheck.h", "central difference step", gradcheck.h),
      IPTT_KEY("gradcheck.tolerance", "largest allowed relative error", gradcheck.tolerance),
      IPTT_KEY("gradcheck.vocab_size", "vocabulary size", gradcheck.vocab_size),
      IPTT_KEY("gradcheck.d_model", "residual width", gradcheck.d_model),
      IPTT_KEY("gradcheck.n_layers", "number of blocks", gradcheck.n_layers),
      IPTT_KEY("gradcheck.n_heads", "attention heads", gradcheck.n_heads),
      IPTT_KEY("gradcheck.d_ff", "MLP hidden width", gradcheck.d_ff),
      IPTT_KEY("gradcheck.ttt_every", "TTT placement", gradcheck.ttt_every),
      IPTT_KEY("gradcheck.chunk_size", "tokens per chunk", gradcheck.chunk_size),
      IPTT_KEY("gradcheck.eta", "fast-weight learning rate", gradcheck.eta),
      IPTT_KEY("gradcheck.init_std", "weight init scale", gradcheck.init_std),
      IPTT_KEY("gradcheck.seq_len", "tokens, 0 = two chunks", gradcheck.seq_len),
      IPTT_KEY("gradcheck.seed", "weight and token seed", gradcheck.seed),
  };
  return entries;
}

#undef IPTT_KEY

const Entry& find_entry(const std::string& key) {
  for (const auto& e : registry()) {
    if (e.key == key) return e;
  }
  throw Error("unknown config key '" + key + "'");
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      flatten(*it, key, out);
    } else {
      out.emplace_back(key, *it);
    }
  }
}

std::string render(const json& j) {
  if (j.is_null()) return "none";
  if (j.is_string()) return j.get<std::string>();
  if (j.is_array()) {
    std::string s;
    for (const auto& x : j) s += (s.empty() ? "" : ",") + render(x);
    return s;
  }
  return j.dump();
}

std::string num(std::size_t v) { return std::to_string(v); }

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& text) {
  find_entry(key).set_text(cfg, text);
}

std::vector<ConfigKeyInfo> config_keys(const RunConfig& cfg) {
  std::vector<ConfigKeyInfo> out;
  for (const auto& e : registry()) out.push_back({e.key, e.help, render(e.get(cfg))});
  return out;
}

RunConfig parse_config(std::string_view json_text,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg;
  // The eval documents inherit the shared recall fields.
  json j;
  const std::string text = trim(json_text);
  if (!text.empty()) {
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw Error(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw Error("config must be a JSON object");
  }
  std::vector<std::pair<std::string, json>> flat;
  if (j.is_object()) flatten(j, "", flat);
  std::set<std::string> seen;
  for (const auto& [key, value] : flat) {
    if (!seen.insert(key).second) throw Error("config key '" + key + "' is set twice");
    find_entry(key).set_json(cfg, value);
  }
  for (const auto& [key, value] : overrides) set_config_value(cfg, key, value);
  cfg.validate();
  return cfg;
}

std::size_t RunConfig::eval_block() const {
  return eval.block ? *eval.block : recall.train_docs.query_len();
}

RecallExperiment RunConfig::recall_for_eval() const {
  RecallExperiment e = recall;
  const RecallSettings& t = recall.train_docs;
  RecallSettings& v = e.eval_docs;
  v.n_keys = t.n_keys;
  v.n_queries = t.n_queries;
  v.key_alphabet = t.key_alphabet;
  v.value_alphabet = t.value_alphabet;
  v.filler_alphabet = t.filler_alphabet;
  std::size_t longest = 0;
  for (std::size_t p : eval.prefixes) longest = std::max(longest, p);
  v.total_len = longest + eval_block();
  const std::size_t need = v.base_len() + v.max_filler;
  if (*v.total_len < need) {
    throw Error("recall.eval_max_filler (" + num(v.max_filler) +
                ") does not fit in the longest of eval.prefixes plus the block (" +
                num(*v.total_len) + " tokens; needs " + num(need) + ")");
  }
  return e;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (model.vocab_size < kByteVocab) {
    throw Error("model.vocab_size (" + num(model.vocab_size) +
                ") must be at least 257 to hold the byte tokenizer ids");
  }
  if (train.seq_len > train.batch_tokens) {
    throw Error("train.seq_len (" + num(train.seq_len) + ") exceeds train.batch_tokens (" +
                num(train.batch_tokens) + ")");
  }
  if (induction.trials == 0) throw Error("induction.trials must be at least 1");
  induction.settings.validate();
  recall.train_docs.validate();
  if (recall.n_train_docs == 0) throw Error("recall.n_train_docs must be at least 1");
  if (eval.prefixes.empty()) throw Error("eval.prefixes must not be empty");
  for (std::size_t p : eval.prefixes) {
    if (p == 0) throw Error("eval.prefixes entries must be at least 1");
  }
  if (eval.batch == 0) throw Error("eval.batch must be at least 1");
  if (eval.block && *eval.block == 0) throw Error("eval.block must be positive when set");
  if (recall.eval_docs.min_filler > recall.eval_docs.max_filler) {
    throw Error("recall.eval_min_filler (" + num(recall.eval_docs.min_filler) +
                ") exceeds recall.eval_max_filler (" + num(recall.eval_docs.max_filler) + ")");
  }
  if (bench.chunks == 0) throw Error("bench.chunks must be at least 1");
  if (bench.workers.empty()) throw Error("bench.workers must not be empty");
  for (int w : bench.workers) {
    if (w < 1) throw Error("bench.workers entries must be at least 1");
  }
  if (bench.d_model == 0 || bench.d_ff == 0 || bench.chunk_size == 0) {
    throw Error("bench.d_model, bench.d_ff and bench.chunk_size must be positive");
  }
  if (causality.length == 0) throw Error("causality.length must be positive");
  for (std::size_t q : causality.positions) {
    if (q >= causality.length) {
      throw Error("causality.positions entry " + num(q) + " is not below causality.length (" +
                  num(causality.length) + ")");
    }
  }
  if (!(gradcheck.h > 0.0) || !(gradcheck.tolerance > 0.0)) {
    throw Error("gradcheck.h and gradcheck.tolerance must be positive");
  }
  try {
    gradcheck_model().validate();
  } catch (const Error& e) {
    throw Error(std::string("gradcheck model: ") + e.what() +
                " (gradcheck.* overrides the model.* shape keys)");
  }
  bench_layer().validate();
}

ModelConfig RunConfig::gradcheck_model() const {
  ModelConfig m = model;
  m.vocab_size = gradcheck.vocab_size;
  m.d_model = gradcheck.d_model;
  m.n_layers = gradcheck.n_layers;
  m.n_heads = gradcheck.n_heads;
  m.d_ff = gradcheck.d_ff;
  m.ttt_every = gradcheck.ttt_every;
  m.ttt.chunk_size = gradcheck.chunk_size;
  m.ttt.eta = gradcheck.eta;
  m.init_std = gradcheck.init_std;
  return m;
}

TttLayerConfig RunConfig::bench_layer() const {
  TttLayerConfig c = model.ttt;
  c.d_model = bench.d_model;
  c.d_ff = bench.d_ff;
  c.chunk_size = bench.chunk_size;
  return c;
}

std::string RunConfig::to_json() const {
  json out = json::object();
  for (const auto& e : registry()) {
    const auto dot = e.key.find('.');
    out[e.key.substr(0, dot)][e.key.substr(dot + 1)] = e.get(*this);
  }
  return out.dump(2) + "\n";
}

}  // namespace iptt
