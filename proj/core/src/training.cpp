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

#include "iptt/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace iptt {

using nlohmann::json;

std::vector<TokenId> tokenize(std::string_view bytes) {
  std::vector<TokenId> ids(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) ids[i] = static_cast<unsigned char>(bytes[i]);
  return ids;
}

std::string detokenize(std::span<const TokenId> ids) {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] > 255) {
      throw Error("detokenize: id " + std::to_string(ids[i]) + " at " + std::to_string(i) +
                  " is not a byte");
    }
    out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
  }
  return out;
}

BoundaryMask mask_from_separators(std::span<const TokenId> tokens) {
  BoundaryMask m{std::vector<std::int64_t>(tokens.size())};
  std::int64_t doc = 0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] == kSeparator && t > 0) ++doc;
    m.doc_ids[t] = doc;
  }
  return m;
}

Corpus corpus_from_documents(std::span<const std::string> documents) {
  Corpus c;
  for (std::size_t d = 0; d < documents.size(); ++d) {
    c.doc_starts.push_back(c.tokens.size());
    if (d > 0) c.tokens.push_back(kSeparator);
    const auto ids = tokenize(documents[d]);
    c.tokens.insert(c.tokens.end(), ids.begin(), ids.end());
  }
  return c;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::vector<std::string> docs;
  if (std::filesystem::is_directory(path)) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end(),
              [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
    for (const auto& f : files) docs.push_back(read_file(f));
  } else {
    docs.push_back(read_file(path));
  }
  Corpus c = corpus_from_documents(docs);
  if (c.tokens.empty()) throw Error("corpus " + path.string() + " is empty");
  return c;
}

// Config ----------------------------------------------------------------------

std::string_view to_string(Schedule s) { return s == Schedule::Constant ? "constant" : "cosine"; }

Schedule parse_schedule(std::string_view s) {
  if (s == "constant") return Schedule::Constant;
  if (s == "cosine") return Schedule::Cosine;
  throw Error("unknown schedule '" + std::string(s) + "' (expected constant or cosine)");
}

std::string_view to_string(SampleMode m) {
  return m == SampleMode::Random ? "random" : "document_aligned";
}

SampleMode parse_sample_mode(std::string_view s) {
  if (s == "random") return SampleMode::Random;
  if (s == "document_aligned") return SampleMode::DocumentAligned;
  throw Error("unknown sample mode '" + std::string(s) + "' (expected random or document_aligned)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error("train.learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw Error("train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw Error("train.adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw Error("train.weight_decay must be nonnegative");
  if (!(grad_clip > 0.0)) throw Error("train.grad_clip must be positive");
  if (total_steps == 0) throw Error("train.total_steps must be positive");
  if (seq_len == 0) throw Error("train.seq_len must be positive");
  if (batch_tokens < seq_len) {
    throw Error("train.batch_tokens (" + std::to_string(batch_tokens) +
                ") must be at least train.seq_len (" + std::to_string(seq_len) + ")");
  }
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) {
    throw Error("train.min_lr_ratio must lie in [0, 1]");
  }
  if (warmup_steps && *warmup_steps > total_steps) {
    throw Error("train.warmup_steps exceeds train.total_steps");
  }
}

std::size_t TrainConfig::warmup() const { return warmup_steps ? *warmup_steps : total_steps / 100; }

std::size_t TrainConfig::sequences_per_step() const { return batch_tokens / seq_len; }

double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
  const std::size_t w = cfg.warmup();
  if (w > 0 && step <= w) {
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(w);
  }
  if (cfg.schedule == Schedule::Constant || cfg.total_steps <= w) return cfg.learning_rate;
  const double progress = std::min(
      1.0, static_cast<double>(step - w) / static_cast<double>(cfg.total_steps - w));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.learning_rate * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine);
}

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

bool is_trainable(const std::string& name, const TrainConfig& cfg) {
  if (!cfg.train_conv && ends_with(name, ".mlp.conv_kernel")) return false;
  if (!cfg.train_target && ends_with(name, ".mlp.w_target")) return false;
  return true;
}

void adamw_step(std::span<RealMatrix* const> params, std::span<const RealMatrix> grads,
                AdamMoments& moments, std::size_t step, double lr, const TrainConfig& cfg,
                const std::vector<bool>& decay, const std::vector<bool>& frozen) {
  if (step == 0) throw Error("adamw_step: step index is 1-based");
  if (grads.size() != params.size()) throw Error("adamw_step: params/grads count mismatch");
  if (!decay.empty() && decay.size() != params.size()) {
    throw Error("adamw_step: decay mask count mismatch");
  }
  if (!frozen.empty() && frozen.size() != params.size()) {
    throw Error("adamw_step: frozen mask count mismatch");
  }
  if (moments.m.empty()) {
    for (const RealMatrix* p : params) {
      moments.m.emplace_back(p->rows(), p->cols());
      moments.v.emplace_back(p->rows(), p->cols());
    }
  }
  if (moments.m.size() != params.size() || moments.v.size() != params.size()) {
    throw Error("adamw_step: moment count mismatch");
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!frozen.empty() && frozen[i]) continue;
    RealMatrix& p = *params[i];
    const RealMatrix& g = grads[i];
    RealMatrix& m = moments.m[i];
    RealMatrix& v = moments.v[i];
    if (g.rows() != p.rows() || g.cols() != p.cols() || m.rows() != p.rows() ||
        m.cols() != p.cols()) {
      throw Error("adamw_step: shape mismatch for tensor " + std::to_string(i) + ": param " +
                  shape_string(p) + ", grad " + shape_string(g));
    }
    const double shrink = (decay.empty() || decay[i]) ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      double& th = p.data()[k];
      const double gk = g.data()[k];
      th *= shrink;
      double& mk = m.data()[k];
      double& vk = v.data()[k];
      mk = cfg.beta1 * mk + (1.0 - cfg.beta1) * gk;
      vk = cfg.beta2 * vk + (1.0 - cfg.beta2) * gk * gk;
      const double mhat = mk / bc1, vhat = vk / bc2;
      th -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

// Loop ------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974;  // "init"

std::vector<RealMatrix*> param_pointers(ModelParams& p, const ModelConfig& cfg) {
  std::vector<RealMatrix*> out;
  for_each_param(p, cfg, [&](const std::string&, RealMatrix& m) { out.push_back(&m); });
  return out;
}

std::vector<std::string> param_names(const ModelParams& p, const ModelConfig& cfg) {
  std::vector<std::string> out;
  for_each_param(p, cfg, [&](const std::string& n, const RealMatrix&) { out.push_back(n); });
  return out;
}

}  // namespace

TrainState init_train_state(const ModelConfig& model, const TrainConfig& cfg) {
  model.validate();
  cfg.validate();
  SeededRng rng(SeededRng::derive(cfg.seed, kInitStream));
  TrainState s;
  s.params = init_model(model, rng);
  for_each_param(s.params, model, [&](const std::string&, const RealMatrix& m) {
    s.moments.m.emplace_back(m.rows(), m.cols());
    s.moments.v.emplace_back(m.rows(), m.cols());
  });
  return s;
}

std::vector<std::vector<TokenId>> sample_batch(const Corpus& corpus, const TrainConfig& cfg,
                                               std::size_t step) {
  const std::size_t n = corpus.tokens.size();
  if (n < cfg.seq_len) {
    throw Error("corpus has " + std::to_string(n) + " tokens, fewer than train.seq_len (" +
                std::to_string(cfg.seq_len) + ")");
  }
  SeededRng rng(SeededRng::derive(cfg.seed, step));
  std::vector<std::vector<TokenId>> batch;
  for (std::size_t b = 0; b < cfg.sequences_per_step(); ++b) {
    std::size_t start = 0;
    if (cfg.sample_mode == SampleMode::Random || corpus.doc_starts.empty()) {
      start = static_cast<std::size_t>(rng.below(n - cfg.seq_len + 1));
    } else {
      const std::size_t d = static_cast<std::size_t>(rng.below(corpus.doc_starts.size()));
      // Documents after the first begin at their separator; skip it.
      const std::size_t s = corpus.doc_starts[d] + (d > 0 ? 1 : 0);
      start = std::min(s, n - cfg.seq_len);
    }
    const auto first = corpus.tokens.begin() + static_cast<std::ptrdiff_t>(start);
    batch.emplace_back(first, first + static_cast<std::ptrdiff_t>(cfg.seq_len));
  }
  return batch;
}

double loss_and_grads(const ModelParams& params, const ModelConfig& model,
                      std::span<const std::vector<TokenId>> batch,
                      std::vector<RealMatrix>* grads) {
  if (batch.empty()) throw Error("loss_and_grads: empty batch");
  double total = 0.0;
  if (grads != nullptr) grads->clear();
  for (const auto& seq : batch) {
    ad::Tape tape;
    const BoundaryMask mask = mask_from_separators(seq);
    const ModelVars vars = to_vars(tape, params, model);
    const ad::Var loss = ntp_loss(model_forward(tape, seq, vars, model, mask), seq, mask);
    total += loss.value()(0, 0);
    if (grads == nullptr) continue;
    tape.backward(loss);
    auto g = collect_grads(tape, vars, model);
    if (grads->empty()) {
      for (auto& [name, m] : g) grads->push_back(std::move(m));
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) add_inplace((*grads)[i], g[i].second);
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  if (grads != nullptr) {
    for (auto& g : *grads) g = scale(g, inv);
  }
  return total * inv;
}

void train(TrainState& state, const ModelConfig& model, const TrainConfig& cfg,
           const Corpus& corpus, std::size_t until_step, const StepCallback& on_step) {
  model.validate();
  cfg.validate();
  validate_params(state.params, model);
  const auto names = param_names(state.params, model);
  std::vector<bool> frozen(names.size()), decay(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    frozen[i] = !is_trainable(names[i], cfg);
    decay[i] = names[i].find("norm") == std::string::npos;
  }
  auto ptrs = param_pointers(state.params, model);
  std::vector<RealMatrix> grads;
  while (state.step < until_step) {
    const std::size_t step = state.step + 1;
    const auto batch = sample_batch(corpus, cfg, step);
    StepMetrics m;
    m.step = step;
    m.loss = loss_and_grads(state.params, model, batch, &grads);
    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (frozen[i]) {
        grads[i].fill(0.0);
        continue;
      }
      for (double g : grads[i].values()) sq += g * g;
    }
    m.grad_norm = std::sqrt(sq);
    if (m.grad_norm > cfg.grad_clip) {
      const double c = cfg.grad_clip / m.grad_norm;
      for (auto& g : grads) g = scale(g, c);
    }
    m.lr = learning_rate_at(cfg, step);
    adamw_step(ptrs, grads, state.moments, step, m.lr, cfg, decay, frozen);
    state.step = step;
    if (on_step) on_step(m);
  }
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv_header() { return "step,loss,grad_norm,lr\n"; }

std::string metrics_csv_row(const StepMetrics& m) {
  return std::to_string(m.step) + "," + format_double(m.loss) + "," + format_double(m.grad_norm) +
         "," + format_double(m.lr) + "\n";
}

// Checkpoint ------------------------------------------------------------------

namespace {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_bytes(std::string& out, std::string_view s) {
  if (s.size() > 0xFFFFFFFFu) throw Error("checkpoint: string too long");
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}

  std::string_view take(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw Error(std::string("checkpoint truncated while reading ") + what + " at byte " +
                  std::to_string(pos_));
    }
    const auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t uint(std::size_t n, const char* what) {
    const auto s = take(n, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  std::string_view str(const char* what) { return take(uint(4, what), what); }
  bool done() const { return pos_ == b_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out = "IPTT";
  put_u32(out, kCheckpointVersion);
  put_bytes(out, ckpt.config_json);
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    put_bytes(out, t.name);
    put_u8(out, 0);
    put_u32(out, 2);
    put_u64(out, t.value.rows());
    put_u64(out, t.value.cols());
    for (double v : t.value.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != "IPTT") throw Error("not a checkpoint: bad magic");
  const auto version = r.uint(4, "version");
  if (version != kCheckpointVersion) {
    throw Error("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.config_json = std::string(r.str("config"));
  const auto count = r.uint(4, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = std::string(r.str("tensor name"));
    const auto dtype = r.uint(1, "dtype");
    if (dtype != 0) throw Error("tensor " + t.name + ": unsupported dtype " + std::to_string(dtype));
    const auto rank = r.uint(4, "rank");
    if (rank > 2) throw Error("tensor " + t.name + ": rank " + std::to_string(rank) + " unsupported");
    std::uint64_t dims[2] = {1, 1};
    for (std::uint64_t k = 0; k < rank; ++k) dims[2 - rank + k] = r.uint(8, "dims");
    if (dims[0] != 0 && dims[1] > (bytes.size() / 8) / dims[0]) {
      throw Error("checkpoint truncated: tensor " + t.name + " larger than file");
    }
    std::vector<double> data(dims[0] * dims[1]);
    for (double& v : data) v = std::bit_cast<double>(r.uint(8, "payload"));
    t.value = RealMatrix(dims[0], dims[1], std::move(data));
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw Error("checkpoint has trailing bytes at " + std::to_string(r.pos()));
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

Checkpoint make_checkpoint(const TrainState& state, const ModelConfig& model,
                           const std::string& run_json) {
  json blob;
  blob["run"] = json::parse(run_json);
  blob["step"] = state.step;
  Checkpoint c;
  c.config_json = blob.dump();
  const auto names = param_names(state.params, model);
  std::size_t i = 0;
  for_each_param(state.params, model, [&](const std::string& n, const RealMatrix& m) {
    c.tensors.push_back({n, m});
  });
  for (i = 0; i < names.size() && i < state.moments.m.size(); ++i) {
    c.tensors.push_back({"adam.m." + names[i], state.moments.m[i]});
  }
  for (i = 0; i < names.size() && i < state.moments.v.size(); ++i) {
    c.tensors.push_back({"adam.v." + names[i], state.moments.v[i]});
  }
  return c;
}

TrainState restore_checkpoint(const Checkpoint& ckpt, const ModelConfig& model,
                              std::string* run_json) {
  json blob;
  try {
    blob = json::parse(ckpt.config_json);
  } catch (const json::exception& e) {
    throw Error(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  if (!blob.contains("run") || !blob.contains("step")) {
    throw Error("checkpoint config lacks run/step fields");
  }
  std::map<std::string, const RealMatrix*> by_name;
  for (const auto& t : ckpt.tensors) by_name[t.name] = &t.value;
  auto get = [&](const std::string& n) -> const RealMatrix& {
    const auto it = by_name.find(n);
    if (it == by_name.end()) throw Error("checkpoint is missing tensor " + n);
    return *it->second;
  };
  TrainState s;
  s.params.layers.resize(model.n_layers);
  // Shape the frozen-layer TTT slots so for_each_param visits the right set.
  for_each_param(s.params, model, [&](const std::string& n, RealMatrix& m) { m = get(n); });
  validate_params(s.params, model);
  for (const auto& n : param_names(s.params, model)) {
    if (by_name.count("adam.m." + n) == 0) {
      s.moments = {};
      break;
    }
    s.moments.m.push_back(get("adam.m." + n));
    s.moments.v.push_back(get("adam.v." + n));
  }
  s.step = blob["step"].get<std::size_t>();
  if (run_json != nullptr) *run_json = blob["run"].dump();
  return s;
}

}  // namespace iptt
