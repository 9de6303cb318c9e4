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

// Drives the built iptt binary end to end.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "iptt/training.hpp"
#include "json.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Result {
  int code;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("iptt_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Result run(const std::string& args) {
    const fs::path err = dir_ / "stderr.txt";
    const std::string cmd = std::string(IPTT_CLI) + " " + args + " > " + (dir_ / "stdout.txt").string() +
                            " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, iptt::read_file(err)};
  }
  std::string out(const std::string& sub) const { return (dir_ / sub).string(); }
  std::string file(const std::string& rel) const { return iptt::read_file(dir_ / rel); }

  void write_corpus() {
    fs::create_directories(dir_ / "corpus");
    iptt::write_file(dir_ / "corpus/a.txt", "the quick brown fox jumps over the lazy dog. ");
    iptt::write_file(dir_ / "corpus/b.txt", "pack my box with five dozen liquor jugs.");
    iptt::write_file(dir_ / "small.json", R"({"model": {"d_model": 16, "n_heads": 2, "d_ff": 24,
      "n_layers": 2, "ttt_every": 2, "window": 16}, "ttt": {"chunk_size": 8, "eta": 0.1},
      "train": {"total_steps": 6, "batch_tokens": 64, "seq_len": 32}})");
  }

  fs::path dir_;
};

TEST_F(Cli, UnknownSubcommandIsAUsageError) {
  const Result r = run("frobnicate");
  EXPECT_EQ(r.code, 2);
  const json e = json::parse(r.err.substr(r.err.rfind("{\"error\"")));
  EXPECT_EQ(e["error"]["kind"], "usage");
  EXPECT_NE(e["error"]["message"].get<std::string>().find("frobnicate"), std::string::npos);
}

TEST_F(Cli, MissingOutIsAUsageError) { EXPECT_EQ(run("induction").code, 2); }

TEST_F(Cli, InvalidValueIsAJsonError) {
  const Result r = run("induction --out " + out("r") + " --induction.eta -1");
  EXPECT_EQ(r.code, 1);
  const json e = json::parse(r.err);
  EXPECT_EQ(e["error"]["kind"], "invalid");
  EXPECT_NE(e["error"]["message"].get<std::string>().find("eta"), std::string::npos);
}

TEST_F(Cli, HelpListsConfigKeysWithDefaults) {
  ASSERT_EQ(run("induction --help").code, 0);
  const std::string help = file("stdout.txt");
  EXPECT_NE(help.find("--induction.trials"), std::string::npos);
  EXPECT_NE(help.find("[1000]"), std::string::npos);
  EXPECT_NE(help.find("--induction.embedding"), std::string::npos);
}

TEST_F(Cli, InductionDefaultsPassAllThreeBounds) {
  ASSERT_EQ(run("induction --trials 1000 --seed 1 --out " + out("r")).code, 0);
  const json rep = json::parse(file("r/theorem_report.json"));
  EXPECT_TRUE(rep["pass"].get<bool>());
  ASSERT_EQ(rep["checks"].size(), 3u);
  for (const auto& c : rep["checks"]) EXPECT_TRUE(c["pass"].get<bool>()) << c["name"];
}

TEST_F(Cli, BenchScanWritesBaselinePlusTwoModesPerWorkerCount) {
  ASSERT_EQ(run("bench-scan --chunks 64 --workers 1,2,4 --bench.repeats 1 --out " + out("b")).code, 0);
  const std::string csv = file("b/scan_bench.csv");
  std::size_t lines = 0;
  for (char c : csv) lines += c == '\n';
  EXPECT_EQ(lines, 1u + 1u + 2u * 3u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "mode,workers,seconds,speedup,max_abs_diff,bitwise_equal");
}

TEST_F(Cli, TrainIsReproducibleAndResumable) {
  write_corpus();
  const std::string base = "train --config " + out("small.json") + " --corpus " + out("corpus");
  ASSERT_EQ(run(base + " --out " + out("a")).code, 0);
  ASSERT_EQ(run(base + " --out " + out("b")).code, 0);
  EXPECT_EQ(file("a/metrics.csv"), file("b/metrics.csv"));
  EXPECT_EQ(file("a/checkpoint.iptt"), file("b/checkpoint.iptt"));
  EXPECT_EQ(file("a/metrics.csv").substr(0, 24), "step,loss,grad_norm,lr\n1");

  ASSERT_EQ(run(base + " --out " + out("c") + " --train.total_steps 3").code, 0);
  ASSERT_EQ(run(base + " --out " + out("c") + " --resume " + out("c/checkpoint.iptt")).code, 0);
  EXPECT_EQ(file("c/checkpoint.iptt"), file("a/checkpoint.iptt"));

  const Result mismatch =
      run(base + " --out " + out("d") + " --model.d_ff 32 --resume " + out("a/checkpoint.iptt"));
  EXPECT_EQ(mismatch.code, 1);

  ASSERT_EQ(run("eval-ppl --checkpoint " + out("a/checkpoint.iptt") + " --corpus " + out("corpus") +
                " --eval.prefixes 8,16 --eval.block 8 --out " + out("e"))
                .code,
            0);
  EXPECT_EQ(file("e/ppl_curve.csv").substr(0, 22), "prefix,nll,ppl,tokens\n");
}

TEST_F(Cli, CausalityAndGradCheckPass) {
  ASSERT_EQ(run("causality --causality.length 64 --ttt.chunk_size 16 --model.ttt_every 1 --out " +
                out("c"))
                .code,
            0);
  const json c = json::parse(file("c/causality.json"));
  EXPECT_TRUE(c["pass"].get<bool>());
  EXPECT_EQ(c["probes"].size(), 6u);
  ASSERT_EQ(run("grad-check --out " + out("g")).code, 0);
  EXPECT_TRUE(json::parse(file("g/grad_check.json"))["pass"].get<bool>());
}

TEST_F(Cli, FailedCheckExitsWithThree) {
  // Tolerance below round-off cannot be met.
  const Result r = run("grad-check --gradcheck.tolerance 1e-15 --out " + out("g"));
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(json::parse(r.err)["error"]["kind"], "check_failed");
}

}  // namespace
