// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// Expert-activation telemetry, collapse metrics, assignment profiles and
// SVG heatmaps.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "moelab/data.hpp"
#include "moelab/model.hpp"
#include "moelab/routing.hpp"

namespace moelab {

/// Selection counts per expert for one (iteration, layer).
struct ActivationRecord {
  std::int64_t iteration = 0;
  int layer = 0;
  std::vector<std::int64_t> counts;

  bool operator==(const ActivationRecord&) const = default;
};

/// One record per decision, counting every Top-K slot once.
template <typename T>
std::vector<ActivationRecord> record_activations(const std::vector<RoutingDecision<T>>& decisions,
                                                 std::int64_t iteration);

/// Adds `more` into `into` elementwise (same layers, same expert count).
void merge_activations(std::vector<ActivationRecord>& into, const std::vector<ActivationRecord>& more);

/// `iteration,layer,expert,count`, one row per expert.
void write_activations_csv(std::ostream& out, const std::vector<ActivationRecord>& records, bool header = true);
/// Inverse of write_activations_csv. Throws DataError on malformed input.
std::vector<ActivationRecord> read_activations_csv(std::istream& in);
std::vector<ActivationRecord> read_activations_csv(const std::filesystem::path& path);

/// Entropy (nats) of the normalized counts; 0 for an all-zero vector.
double distribution_entropy(const std::vector<double>& weights);
/// max/min of the weights; +infinity when the minimum is zero.
double max_min_ratio(const std::vector<double>& weights);

struct CollapseMetric {
  std::int64_t window_end = 0;  // iteration of the last record in the window
  int layer = 0;
  double entropy = 0;
  double ratio = 1;  // +infinity when some expert is never selected

  bool operator==(const CollapseMetric&) const = default;
};

/// Sliding-window (length `window`, step 1) mean frequencies per layer, reduced
/// to entropy and max/min ratio. Throws DataError when a layer has fewer than
/// `window` records.
std::vector<CollapseMetric> collapse_metrics(const std::vector<ActivationRecord>& records, std::size_t window);
/// The metric of the final window for each layer, in layer order.
std::vector<CollapseMetric> final_window_metrics(const std::vector<ActivationRecord>& records, std::size_t window);

/// `window_end,layer,entropy,ratio`; an infinite ratio is written as `inf`.
void write_collapse_csv(std::ostream& out, const std::vector<CollapseMetric>& rows);
std::vector<CollapseMetric> read_collapse_csv(std::istream& in);

/// Selection mass per (layer, expert) for one category; every layer row sums to 1.
struct AssignmentProfile {
  std::string category;
  std::vector<std::vector<double>> layers;
  std::size_t samples = 0;  // routed units per layer

  /// Mean over layers.
  std::vector<double> layer_mean() const;
  /// Total-variation distance of layer_mean() from the uniform profile.
  double distance_from_uniform() const;
};

/// Runs every sequence of every category through the model in evaluation mode
/// and aggregates selections per (layer, expert). Under the random strategy the
/// routers are re-drawn for each sequence. Throws ConfigError for a dense model
/// and DataError for an empty category.
template <typename T>
std::vector<AssignmentProfile> assignment_profile(const ModelState<T>& model, const EvalCategorySet& eval_set);

/// `category,layer,expert,mass`; the all-layer mean uses the layer name `mean`.
void write_profiles_csv(std::ostream& out, const std::vector<AssignmentProfile>& profiles);

/// A labeled value grid. Rows render top to bottom.
struct Heatmap {
  std::string title;
  std::vector<std::string> row_labels;
  std::vector<std::string> column_labels;
  std::vector<std::vector<double>> values;  // rows × columns
  bool row_normalized = false;              // legend notes that rows sum to 1
};

/// Self-contained SVG 1.1 with one panel per heatmap, a linear white-to-blue
/// scale shared per panel with a legend, and cell values as tooltips. Throws
/// DataError for an empty or non-finite matrix.
std::string render_heatmap(const Heatmap& heatmap);
std::string render_heatmaps(const std::vector<Heatmap>& heatmaps);

/// Rows = experts, columns = iterations averaged into at most `max_columns` bins.
Heatmap activation_heatmap(const std::vector<ActivationRecord>& records, int layer, std::size_t max_columns = 512);
/// Rows = layers (plus the mean), columns = experts.
Heatmap profile_heatmap(const AssignmentProfile& profile);

/// Appends per-iteration training telemetry to `dir/activations.csv`,
/// `dir/train.csv` and `dir/eval.csv`.
class TelemetrySink {
 public:
  explicit TelemetrySink(std::filesystem::path dir);

  void activations(const std::vector<ActivationRecord>& records);
  void step(std::int64_t iteration, double lm_loss, double balance_loss, double learning_rate, double grad_norm);
  void eval(std::int64_t iteration, double cross_entropy, double perplexity);

  const std::filesystem::path& dir() const { return dir_; }

 private:
  void append(const std::string& file, const std::string& header, const std::string& rows);
  std::filesystem::path dir_;
};

}  // namespace moelab
