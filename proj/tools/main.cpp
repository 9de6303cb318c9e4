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

// iptt command-line tool: training, evaluation and verification experiments.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iptt/config.hpp"
#include "iptt/experiments.hpp"
#include "iptt/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitCheckFailed = 3;

void print_error(const std::string& kind, const std::string& message) {
  json j;
  j["error"] = {{"kind", kind}, {"message", message}};
  std::cerr << j.dump() << "\n";
}

// Thrown when a verification command ran but its check did not hold.
struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Command {
  CLI::App* app = nullptr;
  std::string config_path;
  std::string out;
  std::map<std::string, std::string> key_values;  // --section.key flags
  std::vector<std::pair<std::string, std::string>> shorthand;
};

// Registers --config, --out and one flag per key of the listed sections.
Command& add_command(CLI::App& app, std::vector<Command>& commands, const std::string& name,
                     const std::string& description, std::set<std::string> sections) {
  auto& c = commands.emplace_back();
  c.app = app.add_subcommand(name, description);
  c.app->add_option("--config", c.config_path, "JSON config file (flat or nested keys)");
  c.app->add_option("--out", c.out, "output directory")->required();
  for (const auto& k : iptt::config_keys()) {
    if (!sections.count(k.key.substr(0, k.key.find('.')))) continue;
    c.app->add_option("--" + k.key, c.key_values[k.key], k.help)
        ->default_str(k.value)
        ->group("Config keys");
  }
  return c;
}

iptt::RunConfig load_config(const Command& c) {
  const std::string text = c.config_path.empty() ? std::string() : iptt::read_file(c.config_path);
  std::vector<std::pair<std::string, std::string>> overrides = c.shorthand;
  for (const auto& [key, value] : c.key_values) {
    if (c.app->get_option("--" + key)->count() > 0) overrides.emplace_back(key, value);
  }
  return iptt::parse_config(text, overrides);
}

fs::path out_dir(const Command& c) {
  fs::create_directories(c.out);
  return c.out;
}

void log_step(const iptt::StepMetrics& m, std::size_t total) {
  if (m.step == 1 || m.step % 10 == 0 || m.step == total) {
    std::printf("step %zu/%zu loss %.5f grad_norm %.4f lr %.3g\n", m.step, total, m.loss,
                m.grad_norm, m.lr);
    std::fflush(stdout);
  }
}

// Model config stored in a checkpoint's run blob.
iptt::RunConfig checkpoint_config(const iptt::Checkpoint& ckpt, std::string* run_json) {
  const json blob = json::parse(ckpt.config_json);
  *run_json = blob.at("run").dump();
  return iptt::parse_config(*run_json);
}

int run_train(const Command& c, const std::string& corpus_path, const std::string& resume) {
  iptt::RunConfig cfg = load_config(c);
  const iptt::Corpus corpus = iptt::load_corpus(corpus_path);
  iptt::TrainState state;
  if (!resume.empty()) {
    const iptt::Checkpoint ckpt = iptt::read_checkpoint(resume);
    std::string run_json;
    const iptt::RunConfig saved = checkpoint_config(ckpt, &run_json);
    if (json::parse(saved.to_json())["model"] != json::parse(cfg.to_json())["model"] ||
        json::parse(saved.to_json())["ttt"] != json::parse(cfg.to_json())["ttt"]) {
      throw iptt::Error("--resume: the checkpoint's model.* / ttt.* settings differ from this run");
    }
    state = iptt::restore_checkpoint(ckpt, cfg.model);
  } else {
    state = iptt::init_train_state(cfg.model, cfg.train);
  }
  const fs::path dir = out_dir(c);
  std::string csv = iptt::metrics_csv_header();
  iptt::train(state, cfg.model, cfg.train, corpus, cfg.train.total_steps,
              [&](const iptt::StepMetrics& m) {
                csv += iptt::metrics_csv_row(m);
                log_step(m, cfg.train.total_steps);
              });
  iptt::write_file(dir / "metrics.csv", csv);
  iptt::write_checkpoint(dir / "checkpoint.iptt", iptt::make_checkpoint(state, cfg.model, cfg.to_json()));
  iptt::write_file(dir / "config.json", cfg.to_json());
  return 0;
}

int run_eval_ppl(const Command& c, const std::string& checkpoint, const std::string& corpus_path) {
  const iptt::RunConfig cfg = load_config(c);
  const iptt::Checkpoint ckpt = iptt::read_checkpoint(checkpoint);
  std::string run_json;
  const iptt::RunConfig saved = checkpoint_config(ckpt, &run_json);
  const iptt::TrainState state = iptt::restore_checkpoint(ckpt, saved.model);
  std::vector<std::vector<iptt::TokenId>> seqs;
  if (corpus_path.empty()) {
    for (const auto& d : iptt::recall_eval_documents(cfg.recall_for_eval())) {
      seqs.push_back(iptt::tokenize(d.text));
    }
  } else {
    const iptt::Corpus corpus = iptt::load_corpus(corpus_path);
    for (std::size_t i = 0; i < corpus.doc_starts.size(); ++i) {
      const std::size_t b = corpus.doc_starts[i] + (i > 0 ? 1 : 0);
      const std::size_t e =
          i + 1 < corpus.doc_starts.size() ? corpus.doc_starts[i + 1] : corpus.tokens.size();
      seqs.emplace_back(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(b),
                        corpus.tokens.begin() + static_cast<std::ptrdiff_t>(e));
    }
  }
  const auto curve = iptt::sliding_window_ppl(state.params, saved.model, seqs, cfg.eval_block(),
                                              cfg.eval.prefixes, cfg.eval.batch);
  iptt::write_file(out_dir(c) / "ppl_curve.csv", iptt::ppl_csv(curve));
  for (const auto& p : curve) std::printf("prefix %zu ppl %.6f\n", p.prefix, p.ppl);
  return 0;
}

int run_induction(const Command& c) {
  const iptt::RunConfig cfg = load_config(c);
  const auto report = iptt::theorem_bench(cfg.induction.settings, cfg.induction.trials, cfg.induction.seed);
  iptt::write_file(out_dir(c) / "theorem_report.json", report.to_json());
  for (const auto& ch : report.checks) {
    std::printf("%-15s observed %.6g bound %.6g tolerance %.3g %s\n", ch.name.c_str(), ch.observed,
                ch.bound, ch.tolerance, ch.pass ? "pass" : "FAIL");
  }
  if (!report.pass) throw CheckFailed("theorem bench: at least one bound does not hold");
  return 0;
}

int run_ablate(const Command& c) {
  const iptt::RunConfig cfg = load_config(c);
  const auto specs = iptt::expand_variants(cfg.ablation.variants, cfg.ablation.chunk_sweep,
                                           cfg.ablation.ttt_every_sweep);
  const fs::path dir = out_dir(c);
  std::vector<iptt::AblationRow> rows;
  for (const auto& spec : specs) {
    std::printf("variant %s\n", spec.name.c_str());
    const std::vector<iptt::AblationSpec> one{spec};
    auto r = iptt::ablation_run(cfg.model, cfg.train, cfg.recall_for_eval(), one,
                                [&](const iptt::StepMetrics& m) { log_step(m, cfg.train.total_steps); });
    rows.push_back(r.front());
    iptt::write_file(dir / "ablation.csv", iptt::ablation_csv(rows));
  }
  return 0;
}

int run_causality(const Command& c, const std::string& checkpoint) {
  const iptt::RunConfig cfg = load_config(c);
  iptt::ModelConfig model = cfg.model;
  iptt::ModelParams params;
  if (!checkpoint.empty()) {
    const iptt::Checkpoint ckpt = iptt::read_checkpoint(checkpoint);
    std::string run_json;
    model = checkpoint_config(ckpt, &run_json).model;
    params = iptt::restore_checkpoint(ckpt, model).params;
  } else {
    params = iptt::active_model_params(model, cfg.causality.seed);
  }
  const std::size_t n = cfg.causality.length, chunk = model.ttt.chunk_size;
  std::vector<std::size_t> positions = cfg.causality.positions;
  if (positions.empty()) {
    for (std::size_t q : {std::size_t{0}, std::size_t{1}, chunk - 1, chunk, chunk + 1, n - 1}) {
      if (q < n && std::find(positions.begin(), positions.end(), q) == positions.end()) {
        positions.push_back(q);
      }
    }
  }
  iptt::SeededRng rng(iptt::SeededRng::derive(cfg.causality.seed, 2));
  std::vector<iptt::TokenId> tokens(n);
  for (auto& t : tokens) t = static_cast<iptt::TokenId>(rng.below(model.vocab_size));
  json probes = json::array();
  bool pass = true;
  for (std::size_t q : positions) {
    const auto r = iptt::causality_probe(params, model, tokens, q);
    pass = pass && r.pass;
    probes.push_back({{"flip_position", q},
                      {"first_changed", r.first_changed ? json(*r.first_changed) : json(nullptr)},
                      {"pass", r.pass}});
    std::printf("q=%zu first_changed=%s %s\n", q,
                r.first_changed ? std::to_string(*r.first_changed).c_str() : "none",
                r.pass ? "pass" : "FAIL");
  }
  json out;
  out["length"] = n;
  out["chunk_size"] = chunk;
  out["window"] = model.window ? json(*model.window) : json(nullptr);
  out["probes"] = probes;
  out["pass"] = pass;
  iptt::write_file(out_dir(c) / "causality.json", out.dump(2) + "\n");
  if (!pass) throw CheckFailed("causality probe: a logit row before the flip changed");
  return 0;
}

int run_bench_scan(const Command& c) {
  const iptt::RunConfig cfg = load_config(c);
  const auto rows = iptt::scan_bench(cfg.bench_layer(), cfg.bench.chunks, cfg.bench.workers,
                                     cfg.bench.seed, cfg.bench.repeats);
  iptt::write_file(out_dir(c) / "scan_bench.csv", iptt::scan_bench_csv(rows));
  for (const auto& r : rows) {
    std::printf("%-11s workers %d  %.4fs  speedup %.2f  max_abs_diff %.3g\n", r.mode.c_str(),
                r.workers, r.seconds, r.speedup, r.max_abs_diff);
  }
  return 0;
}

int run_grad_check(const Command& c) {
  const iptt::RunConfig cfg = load_config(c);
  const auto report = iptt::model_grad_check(cfg.gradcheck_model(), cfg.gradcheck.seq_len,
                                             cfg.gradcheck.seed, cfg.gradcheck.h,
                                             cfg.gradcheck.tolerance);
  iptt::write_file(out_dir(c) / "grad_check.json", iptt::grad_check_json(report, cfg.gradcheck.h));
  for (const auto& p : report.params) {
    std::printf("%-28s %.3e\n", p.name.c_str(), p.max_relative_error);
  }
  std::printf("max relative error %.3e (tolerance %.1e)\n", report.max_relative_error,
              report.tolerance);
  if (!report.passed) throw CheckFailed("gradient check: relative error above tolerance");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"iptt: in-place test-time training toolkit.\n"
               "Worker threads follow IPTT_WORKERS (default: all cores); results do not depend on it."};
  app.require_subcommand(1);
  app.fallthrough(false);
  std::vector<Command> commands;
  commands.reserve(8);

  auto& train = add_command(app, commands, "train", "train a model on a byte corpus",
                            {"model", "ttt", "train"});
  std::string corpus, resume;
  train.app->add_option("--corpus", corpus, "corpus file or directory")->required();
  train.app->add_option("--resume", resume, "checkpoint to continue from");

  auto& eval = add_command(app, commands, "eval-ppl", "sliding-window perplexity of a checkpoint",
                           {"eval", "recall"});
  std::string checkpoint, eval_corpus;
  eval.app->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval.app->add_option("--corpus", eval_corpus,
                       "documents to score; default: held-out synthetic recall documents");

  auto& induction = add_command(app, commands, "induction", "induction-head logit bench",
                                {"induction"});
  std::string trials, seed;
  induction.app->add_option("--trials", trials, "same as --induction.trials");
  induction.app->add_option("--seed", seed, "same as --induction.seed");

  auto& ablate = add_command(app, commands, "ablate", "train target variants on the recall corpus",
                             {"model", "ttt", "train", "recall", "eval", "ablation"});
  std::string variants;
  ablate.app->add_option("--variants", variants, "same as --ablation.variants");

  auto& causality = add_command(app, commands, "causality", "check that no logit sees the future",
                                {"model", "ttt", "causality"});
  std::string causality_ckpt;
  causality.app->add_option("--checkpoint", causality_ckpt,
                            "checkpoint to probe; default: random weights from the config");

  auto& bench = add_command(app, commands, "bench-scan", "time sequential vs scan forward",
                            {"ttt", "bench"});
  std::string chunks, workers;
  bench.app->add_option("--chunks", chunks, "same as --bench.chunks");
  bench.app->add_option("--workers", workers, "same as --bench.workers");

  auto& grad = add_command(app, commands, "grad-check", "finite-difference gradient check",
                           {"model", "ttt", "gradcheck"});

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << "\n";
    std::string message = e.what();
    if (argc > 1 && argv[1][0] != '-') {
      const auto subs = app.get_subcommands([](CLI::App*) { return true; });
      const bool known = std::any_of(subs.begin(), subs.end(),
                                     [&](CLI::App* a) { return a->get_name() == argv[1]; });
      if (!known) message = std::string("unknown subcommand '") + argv[1] + "'";
    }
    print_error("usage", message);
    return kExitUsage;
  }

  auto shorthand = [](Command& c, const std::string& value, const char* flag, const char* key) {
    if (c.app->get_option(flag)->count() > 0) c.shorthand.emplace_back(key, value);
  };
  shorthand(induction, trials, "--trials", "induction.trials");
  shorthand(induction, seed, "--seed", "induction.seed");
  shorthand(ablate, variants, "--variants", "ablation.variants");
  shorthand(bench, chunks, "--chunks", "bench.chunks");
  shorthand(bench, workers, "--workers", "bench.workers");

  try {
    if (*train.app) return run_train(train, corpus, resume);
    if (*eval.app) return run_eval_ppl(eval, checkpoint, eval_corpus);
    if (*induction.app) return run_induction(induction);
    if (*ablate.app) return run_ablate(ablate);
    if (*causality.app) return run_causality(causality, causality_ckpt);
    if (*bench.app) return run_bench_scan(bench);
    if (*grad.app) return run_grad_check(grad);
  } catch (const CheckFailed& e) {
    print_error("check_failed", e.what());
    return kExitCheckFailed;
  } catch (const iptt::Error& e) {
    print_error("invalid", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return kExitRuntime;
  }
  print_error("usage", "no subcommand");
  return kExitUsage;
}
