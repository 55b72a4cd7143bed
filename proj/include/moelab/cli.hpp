// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "moelab/config.hpp"
#include "moelab/train.hpp"

namespace moelab {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitData = 2,
  kExitNumeric = 3,
};

/// One point of an ablation grid: a run name and its configuration text.
struct GridPoint {
  std::string name;
  std::string config_text;
};

/// Expands `key = v1, v2, ...` lines into their Cartesian product, later keys
/// varying fastest. `language_map` values are never split. Throws ParseError
/// for malformed lines or duplicate keys.
std::vector<GridPoint> expand_grid(std::string_view text);

struct RunSummary {
  std::string name;
  ExperimentConfig config;
  ParameterCount params;
  EvalResult final_eval;
  double window_perplexity = 0;
};

/// Trains `config` into `run_dir` (config.txt, telemetry/, checkpoints/) and
/// evaluates the final model. `log` may be null.
RunSummary train_run(const ExperimentConfig& config, const std::filesystem::path& run_dir, std::ostream* log);

/// Header and one row per run: routing setup, parameter counts, perplexities.
void write_results_csv(std::ostream& out, const std::vector<RunSummary>& runs);

/// Entry point of the `moelab` executable; returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace moelab
