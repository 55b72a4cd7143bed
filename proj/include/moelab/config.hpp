// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace moelab {

enum class RoutingUnit { token, sequence };
enum class RoutingScope { layer_wise, global };
enum class RoutingStrategy { learned, frozen, random, language };
enum class RouterDepth { one_layer, two_layer };
enum class SequencePooling { mean };
enum class Precision { float32, float64 };

std::string_view to_string(RoutingUnit v);
std::string_view to_string(RoutingScope v);
std::string_view to_string(RoutingStrategy v);
std::string_view to_string(RouterDepth v);
std::string_view to_string(SequencePooling v);
std::string_view to_string(Precision v);

/// Injective map from language code to expert index.
class LanguageMap {
 public:
  LanguageMap() = default;
  explicit LanguageMap(std::vector<std::pair<std::string, int>> entries);

  /// Parses `en:0,de:1,fr:2`. Throws ConfigError on malformed or non-injective input.
  static LanguageMap parse(std::string_view text);
  std::string serialize() const;

  std::optional<int> find(std::string_view language) const;
  bool contains(std::string_view language) const { return find(language).has_value(); }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, int>>& entries() const { return entries_; }

  /// Checks injectivity and that every expert index lies in [0, n_experts).
  void validate(int n_experts) const;

  bool operator==(const LanguageMap&) const = default;

 private:
  std::vector<std::pair<std::string, int>> entries_;
};

struct ModelConfig {
  int n_layers = 12;
  int d_model = 768;
  int n_heads = 12;
  int d_ffn = 3072;
  int vocab_size = 50257;
  int context_length = 1024;
  double dropout = 0.2;
  int ffn_width_multiplier = 1;
  bool biases_enabled = true;

  int head_dim() const { return d_model / n_heads; }
  /// FFN hidden width of one expert (MoE) or of the dense FFN (baseline).
  int ffn_hidden() const { return d_ffn * ffn_width_multiplier; }

  bool operator==(const ModelConfig&) const = default;
};

struct RoutingConfig {
  int n_experts = 4;
  int top_k = 2;
  RoutingUnit unit = RoutingUnit::token;
  RoutingScope scope = RoutingScope::layer_wise;
  RoutingStrategy strategy = RoutingStrategy::learned;
  RouterDepth router_depth = RouterDepth::one_layer;
  int router_hidden = 768;
  double lambda_balance = 0.01;
  SequencePooling sequence_pooling = SequencePooling::mean;
  LanguageMap language_map;

  /// K actually used by the gate; the language strategy forces a single expert.
  int effective_top_k() const { return strategy == RoutingStrategy::language ? 1 : top_k; }
  /// True when routers exist as parameters (every strategy except language).
  bool has_router_parameters() const { return strategy != RoutingStrategy::language; }
  /// Number of layers that own a router network.
  int router_count(int n_layers) const;

  bool operator==(const RoutingConfig&) const = default;
};

struct TrainConfig {
  double learning_rate = 9.6e-4;
  double min_learning_rate = 9.6e-5;
  double weight_decay = 0.5;
  int iterations = 6000;
  int batch_size = 8;
  int grad_accumulation_steps = 128;
  int sequence_length = 1024;
  int warmup_iterations = 120;
  std::int64_t seed = 1337;
  int eval_window = 100;
  int eval_interval = 50;
  int eval_batches = 20;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_epsilon = 1e-8;
  double grad_clip = 1.0;
  Precision precision = Precision::float32;

  std::int64_t tokens_per_iteration() const {
    return std::int64_t{batch_size} * grad_accumulation_steps * sequence_length;
  }

  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  std::string train_data;
  std::string val_data;

  bool operator==(const DataConfig&) const = default;
};

/// One experiment: architecture, optional MoE routing, optimisation, data.
struct ExperimentConfig {
  ModelConfig model;
  std::optional<RoutingConfig> routing;
  TrainConfig train;
  DataConfig data;

  bool is_moe() const { return routing.has_value(); }

  /// Throws ConfigError naming the first violated invariant.
  void validate() const;

  bool operator==(const ExperimentConfig&) const = default;
};

enum class Preset { paper, desk };

/// GPT2-small scale with the optimisation recipe used for the published runs.
ExperimentConfig paper_preset();
/// Small model trainable on a single CPU core in minutes.
ExperimentConfig desk_preset();
ExperimentConfig preset(Preset p);

/// Parses the flat `key = value` grammar. `#` starts a comment; blank lines are
/// ignored. A `preset = paper|desk` line selects the base defaults regardless
/// of where it appears. Throws ParseError carrying the offending line number.
ExperimentConfig parse_config(std::string_view text);

/// Applies `key=value` overrides on top of an existing config, then validates.
void apply_overrides(ExperimentConfig& config, const std::vector<std::string>& assignments);

/// Every key in canonical order with full round-trip precision.
std::string serialize_config(const ExperimentConfig& config);

/// Reads and parses a configuration file. Throws DataError if unreadable.
ExperimentConfig load_config_file(const std::string& path);

/// FNV-1a digest of the serialized form; identifies a config in checkpoints.
std::uint64_t config_digest(const ExperimentConfig& config);

/// The recognised configuration keys, in serialization order.
const std::vector<std::string>& config_keys();

struct ParameterCount {
  std::int64_t total = 0;
  std::int64_t active = 0;
  bool operator==(const ParameterCount&) const = default;
};

/// Learnable scalars in one expert FFN (or the dense FFN of a baseline).
std::int64_t ffn_parameter_count(const ModelConfig& model);
/// Learnable scalars in one router network.
std::int64_t router_parameter_count(const ModelConfig& model, const RoutingConfig& routing);

/// Total learnable scalars and the subset touched by one routed unit's forward
/// pass. Routers count as active. Validates first.
ParameterCount count_parameters(const ModelConfig& model, const std::optional<RoutingConfig>& routing);
inline ParameterCount count_parameters(const ExperimentConfig& config) {
  return count_parameters(config.model, config.routing);
}

}  // namespace moelab
