// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// Training loop, AdamW, learning-rate schedule, evaluation and checkpoints.
//
// Checkpoint layout (little-endian):
//
//   8 bytes   magic "MOELAB01"
//   u32       format version (1)
//   u32       scalar width in bytes (4 for float32 runs, 8 for float64)
//   u64       config digest
//   u32 + ..  serialized config text
//   i64       iteration
//   u32 + ..  data-sampling RNG state (text form)
//   u64       evaluation count, then per evaluation: i64 iteration, f64 cross-entropy
//   u64       tensor count, then per tensor in declared order:
//             u32 + name, u64 rows, u64 cols, rows·cols scalars
//   i64       optimizer step count
//   the same tensor sequence twice more: first moments, second moments
//   u64       FNV-1a digest of every preceding byte

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "moelab/config.hpp"
#include "moelab/data.hpp"
#include "moelab/model.hpp"
#include "moelab/telemetry.hpp"

namespace moelab {

/// Linear warmup to learning_rate over warmup_iterations, then cosine decay
/// reaching min_learning_rate at iteration = iterations.
double learning_rate_at(const TrainConfig& train, std::int64_t iteration);

template <typename T>
struct AdamState {
  ModelParams<T> m;
  ModelParams<T> v;
  std::int64_t step = 0;

  bool operator==(const AdamState&) const = default;
};

/// Whether the optimizer updates a tensor: routers only under the learned strategy.
bool updates_role(ParamRole role, const ExperimentConfig& config);

/// Scales `grads` so the global L2 norm over optimizer-updated tensors is at
/// most `max_norm`; returns the norm before clipping. max_norm ≤ 0 disables.
template <typename T>
double clip_grad_norm(ModelParams<T>& grads, const ExperimentConfig& config, double max_norm);

/// One decoupled-weight-decay Adam update. Weight decay applies to weight and
/// router tensors, not to biases and norm gains.
template <typename T>
void adamw_update(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state,
                  const ExperimentConfig& config, double learning_rate);

struct EvalResult {
  std::int64_t iteration = 0;
  double cross_entropy = 0;
  double perplexity = 0;

  bool operator==(const EvalResult&) const = default;
};

template <typename T>
struct TrainRun {
  ExperimentConfig config;
  ModelState<T> model;
  AdamState<T> optimizer;
  std::int64_t iteration = 0;
  std::mt19937_64 rng;
  std::vector<EvalResult> evals;
  TelemetrySink* sink = nullptr;

  /// Fresh run seeded by config.train.seed.
  static TrainRun create(const ExperimentConfig& config);
};

/// Draws one micro-batch using the run's RNG.
using BatchSource = std::function<Batch(std::mt19937_64& rng)>;

/// Micro-batches from a shard; windows stay inside documents under language routing.
BatchSource shard_source(const TokenShard& shard, const ExperimentConfig& config);

struct StepResult {
  std::int64_t iteration = 0;  // iteration the step belonged to
  double lm_loss = 0;          // mean over micro-batches
  double balance_loss = 0;
  double learning_rate = 0;
  double grad_norm = 0;
  std::vector<ActivationRecord> activations;
};

/// One optimizer iteration over grad_accumulation_steps micro-batches. Random
/// routers are re-drawn first. Throws NumericError for a non-finite loss or
/// gradient; the run is left unchanged in that case.
template <typename T>
StepResult train_step(TrainRun<T>& run, const BatchSource& source);

/// Mean next-token cross-entropy over `eval_batches` batches drawn with a fixed
/// seed, so repeated calls agree. Throws DataError for an empty shard.
template <typename T>
EvalResult evaluate(const ModelState<T>& model, const TokenShard& val, int eval_batches, std::int64_t iteration = 0);

/// Mean perplexity of the evaluations within the final `window` iterations.
double headline_perplexity(const std::vector<EvalResult>& evals, std::int64_t final_iteration, int window);

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_dir;  // diagnostic and final checkpoints
  std::function<void(const StepResult&)> on_step;
  std::function<void(const EvalResult&)> on_eval;
};

/// Trains until config.train.iterations, evaluating every eval_interval
/// iterations and at the end. On a numeric failure a diagnostic checkpoint is
/// written (when checkpoint_dir is set) before the NumericError propagates.
template <typename T>
void train(TrainRun<T>& run, const TokenShard& train_shard, const TokenShard& val_shard, const TrainOptions& options);

template <typename T>
std::string checkpoint_bytes(const TrainRun<T>& run);
template <typename T>
TrainRun<T> checkpoint_from_bytes(std::string_view bytes);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainRun<T>& run);
/// Throws CheckpointError for a bad magic, digest mismatch, truncation or a
/// scalar width other than sizeof(T).
template <typename T>
TrainRun<T> load_checkpoint(const std::filesystem::path& path);

/// Scalar width recorded in a checkpoint header.
Precision checkpoint_precision(const std::filesystem::path& path);

}  // namespace moelab
