// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <sys/wait.h>

#include "moelab/cli.hpp"
#include "moelab/data.hpp"
#include "moelab/error.hpp"
#include "moelab/telemetry.hpp"
#include "test_util.hpp"

namespace moelab {
namespace {

using testing::read_file;
using testing::TempDir;
using testing::write_file;

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// A desk-preset model shrunk enough for a few seconds of training.
std::string small_config(const TempDir& dir) {
  return "preset = desk\n"
         "n_layers = 2\n"
         "d_model = 32\n"
         "n_heads = 2\n"
         "context_length = 32\n"
         "sequence_length = 32\n"
         "batch_size = 4\n"
         "iterations = 12\n"
         "eval_interval = 4\n"
         "eval_batches = 2\n"
         "train_data = " + (dir / "data/train.bin").string() + "\n" +
         "val_data = " + (dir / "data/val.bin").string() + "\n";
}

void prepare_toy(const TempDir& dir) {
  ToyCorpusOptions opts;
  opts.total_bytes = 60000;
  write_toy_corpus(dir / "corpus", opts);
  const auto r = cli({"prepare", "--corpus", (dir / "corpus").string(), "--out", (dir / "data").string(), "--labels"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("labels:"), std::string::npos);
}

TEST(Cli, CountParams) {
  TempDir dir;
  write_file(dir / "c.txt", "preset = paper\n");
  const auto moe = cli({"count-params", "--config", (dir / "c.txt").string()});
  ASSERT_EQ(moe.code, kExitOk) << moe.err;
  EXPECT_NE(moe.out.find("total 294484224 (294.48M)"), std::string::npos) << moe.out;
  EXPECT_NE(moe.out.find("active 181145856"), std::string::npos) << moe.out;
  const auto dense = cli({"count-params", "--config", (dir / "c.txt").string(), "--set", "moe=false"});
  EXPECT_NE(dense.out.find("total 124439808"), std::string::npos) << dense.out;
}

TEST(Cli, UsageErrors) {
  TempDir dir;
  write_file(dir / "c.txt", "preset = paper\n");
  EXPECT_EQ(cli({}).code, kExitUsage);
  EXPECT_EQ(cli({"count-params", "--config", (dir / "c.txt").string(), "--bogus"}).code, kExitUsage);
  EXPECT_EQ(cli({"frobnicate"}).code, kExitUsage);
  const auto bad = cli({"count-params", "--config", (dir / "c.txt").string(), "--set", "top_k=9"});
  EXPECT_EQ(bad.code, kExitUsage);
  EXPECT_NE(bad.err.find("configuration error"), std::string::npos) << bad.err;
  EXPECT_EQ(cli({"count-params", "--config", (dir / "missing.txt").string()}).code, kExitData);
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST(Cli, ExecutableExitCodes) {
  const std::string bin = MOELAB_CLI_PATH;
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " train --unknown-flag >/dev/null 2>&1").c_str())), 1);
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " --help >/dev/null 2>&1").c_str())), 0);
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " eval --checkpoint /nonexistent/x.ckpt >/dev/null 2>&1").c_str())), 2);
}

TEST(Cli, TrainEvalAnalyze) {
  TempDir dir;
  prepare_toy(dir);
  write_file(dir / "c.txt", small_config(dir));
  const std::string runs = (dir / "runs").string();
  const auto t = cli({"train", "--config", (dir / "c.txt").string(), "--run", "a", "--runs-dir", runs});
  ASSERT_EQ(t.code, kExitOk) << t.err;
  EXPECT_NE(t.out.find("final val_loss"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "runs/a/config.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "runs/a/telemetry/activations.csv"));
  const auto acts = read_activations_csv(dir / "runs/a/telemetry/activations.csv");
  EXPECT_EQ(acts.size(), 24u);

  const auto again = cli({"train", "--config", (dir / "c.txt").string(), "--run", "a", "--runs-dir", runs});
  EXPECT_EQ(again.code, kExitUsage);
  EXPECT_NE(again.err.find("--force"), std::string::npos);
  EXPECT_EQ(cli({"train", "--config", (dir / "c.txt").string(), "--run", "a", "--runs-dir", runs, "--force"}).code,
            kExitOk);

  const std::string ckpt = (dir / "runs/a/checkpoints/final.ckpt").string();
  const auto e1 = cli({"eval", "--checkpoint", ckpt});
  ASSERT_EQ(e1.code, kExitOk) << e1.err;
  EXPECT_NE(e1.out.find("iteration 12"), std::string::npos) << e1.out;
  EXPECT_EQ(cli({"eval", "--checkpoint", ckpt}).out, e1.out);

  const auto act = cli({"analyze-activations", "--run", "a", "--runs-dir", runs, "--out",
                        (dir / "act.svg").string(), "--window", "5"});
  ASSERT_EQ(act.code, kExitOk) << act.err;
  EXPECT_NE(read_file(dir / "act.svg").find("</svg>"), std::string::npos);
  EXPECT_EQ(read_collapse_csv(*std::make_unique<std::istringstream>(read_file(dir / "act.collapse.csv"))).size(), 16u);
  EXPECT_NE(act.out.find("layer 1"), std::string::npos);

  const auto as = cli({"analyze-assignments", "--checkpoint", ckpt, "--eval-set", (dir / "corpus").string(), "--out",
                       (dir / "assign").string()});
  ASSERT_EQ(as.code, kExitOk) << as.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "assign/profiles.csv"));
  EXPECT_NE(read_file(dir / "assign/assignments.svg").find("each row sums to 1"), std::string::npos);
  EXPECT_NE(as.out.find("distance_from_uniform"), std::string::npos);
}

TEST(Cli, SeedEnvironmentOverride) {
  TempDir dir;
  write_file(dir / "c.txt", small_config(dir));
  prepare_toy(dir);
  const std::string runs = (dir / "runs").string();
  ::setenv("MOELAB_SEED", "77", 1);
  const auto a = cli({"train", "--config", (dir / "c.txt").string(), "--run", "s", "--runs-dir", runs});
  ::unsetenv("MOELAB_SEED");
  ASSERT_EQ(a.code, kExitOk) << a.err;
  EXPECT_NE(read_file(dir / "runs/s/config.txt").find("seed = 77"), std::string::npos);
}

TEST(Grid, ExpansionOrderAndNames) {
  const auto points = expand_grid("preset = desk\n# comment\nunit = token, sequence\nn_experts = 2,4,8\n");
  ASSERT_EQ(points.size(), 6u);
  EXPECT_EQ(points[0].name, "r000-unit-token-n_experts-2");
  EXPECT_EQ(points[1].name, "r001-unit-token-n_experts-4");
  EXPECT_EQ(points[5].name, "r005-unit-sequence-n_experts-8");
  EXPECT_EQ(points[4].config_text, "preset = desk\nunit = sequence\nn_experts = 4\n");
  const auto lang = expand_grid("language_map = en:0, de:1\nstrategy = language\n");
  ASSERT_EQ(lang.size(), 1u);
  EXPECT_NE(lang[0].config_text.find("language_map = en:0, de:1"), std::string::npos);
  EXPECT_THROW(expand_grid("unit = token\nunit = sequence\n"), ParseError);
  EXPECT_THROW(expand_grid("unit token\n"), ParseError);
  EXPECT_THROW(expand_grid("unit = token,,sequence\n"), ParseError);
  EXPECT_EQ(expand_grid("").size(), 1u);
}

TEST(Cli, AblateSinglePointMatchesTrain) {
  TempDir dir;
  prepare_toy(dir);
  write_file(dir / "c.txt", small_config(dir));
  write_file(dir / "grid.txt", small_config(dir));
  const auto t = cli({"train", "--config", (dir / "c.txt").string(), "--run", "solo", "--runs-dir",
                      (dir / "solo").string()});
  ASSERT_EQ(t.code, kExitOk) << t.err;
  const auto g = cli({"ablate", "--grid", (dir / "grid.txt").string(), "--runs", (dir / "grid").string()});
  ASSERT_EQ(g.code, kExitOk) << g.err;
  const auto csv = read_file(dir / "grid/results.csv");
  EXPECT_EQ(csv.rfind("run,moe,n_experts", 0), 0u);
  EXPECT_NE(csv.find("\nr000,true,4,2,sequence,layer_wise,learned"), std::string::npos) << csv;
  EXPECT_EQ(read_file(dir / "grid/r000/checkpoints/final.ckpt"), read_file(dir / "solo/solo/checkpoints/final.ckpt"));
  const auto e1 = cli({"eval", "--checkpoint", (dir / "grid/r000/checkpoints/final.ckpt").string()});
  const auto e2 = cli({"eval", "--checkpoint", (dir / "solo/solo/checkpoints/final.ckpt").string()});
  EXPECT_EQ(e1.out, e2.out);
}

TEST(Cli, AblateParallelJobsMatchSerial) {
  TempDir dir;
  prepare_toy(dir);
  write_file(dir / "grid.txt", small_config(dir) + "lambda_balance = 0, 0.01\n");
  const auto a = cli({"ablate", "--grid", (dir / "grid.txt").string(), "--runs", (dir / "a").string()});
  ASSERT_EQ(a.code, kExitOk) << a.err;
  const auto b = cli({"ablate", "--grid", (dir / "grid.txt").string(), "--runs", (dir / "b").string(), "--jobs", "2"});
  ASSERT_EQ(b.code, kExitOk) << b.err;
  EXPECT_EQ(read_file(dir / "a/results.csv"), read_file(dir / "b/results.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a/r001-lambda_balance-0.01/checkpoints/final.ckpt"));
}

TEST(Cli, DataErrorsExitTwo) {
  TempDir dir;
  write_file(dir / "c.txt", "preset = desk\ntrain_data = " + (dir / "nope.bin").string() + "\nval_data = " +
                                (dir / "nope.bin").string() + "\n");
  const auto r = cli({"train", "--config", (dir / "c.txt").string(), "--run", "x", "--runs-dir", (dir / "r").string()});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_NE(r.err.find("data error"), std::string::npos);
  EXPECT_EQ(cli({"prepare", "--corpus", (dir / "empty").string(), "--out", (dir / "o").string()}).code, kExitData);
}

}  // namespace
}  // namespace moelab
