// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// Turns router outputs into routing decisions under the learned, frozen,
// random and language strategies, for token or sequence units and layer-wise
// or global scope.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moelab/config.hpp"
#include "moelab/gating.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

/// Decisions for every routed unit of one batch at one layer. Units are token
/// positions (b·T + t) for token routing and batch elements for sequence routing.
template <typename T>
struct RoutingDecision {
  int layer = 0;
  RoutingUnit unit = RoutingUnit::token;
  int n_experts = 0;
  int top_k = 0;
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> selected;        // unit_count × top_k
  std::vector<T> combine_weights;   // unit_count × top_k
  std::vector<T> probabilities;     // unit_count × n_experts; empty for language routing

  std::size_t unit_count() const { return unit == RoutingUnit::token ? batch * seq_len : batch; }
  std::size_t unit_of(std::size_t b, std::size_t t) const { return unit == RoutingUnit::token ? b * seq_len + t : b; }

  std::span<const int> selected_for(std::size_t u) const {
    return {selected.data() + u * static_cast<std::size_t>(top_k), static_cast<std::size_t>(top_k)};
  }
  std::span<const T> weights_for(std::size_t u) const {
    return {combine_weights.data() + u * static_cast<std::size_t>(top_k), static_cast<std::size_t>(top_k)};
  }
  std::span<const T> probabilities_for(std::size_t u) const {
    if (probabilities.empty()) return {};
    return {probabilities.data() + u * static_cast<std::size_t>(n_experts), static_cast<std::size_t>(n_experts)};
  }

  /// Per-expert selection counts over all units (each of the K slots counts once).
  std::vector<std::int64_t> expert_counts() const;

  /// Equality of everything except the layer index.
  bool same_routing(const RoutingDecision& other) const;

  bool operator==(const RoutingDecision&) const = default;
};

/// Intermediate values of one routing computation, kept for the backward pass.
template <typename T>
struct RouteTrace {
  Matrix<T> router_input;  // units × d_model
  typename RouterNetwork<T>::Cache router_cache;
  Matrix<T> logits;        // units × n_experts
  std::vector<GateResult<T>> gates;
};

/// Computes the routing decision for one layer.
///
/// `layer_input` is (batch·seq_len)×d_model. `routers` holds one router per layer
/// for layer-wise scope or a single router for global scope; it may be empty
/// for the language strategy. For global scope and layer > 0 the cached layer-0
/// decision is returned unchanged apart from its layer index. `labels` carries
/// one language code per batch element and is required iff strategy = language.
///
/// Throws RoutingError for missing labels, unknown languages, a missing router,
/// or a missing layer-0 decision under global scope.
template <typename T>
RoutingDecision<T> route(const Matrix<T>& layer_input, std::size_t batch, std::size_t seq_len, int layer,
                         const RoutingConfig& routing, std::span<const RouterNetwork<T>> routers,
                         std::span<const std::string> labels, const RoutingDecision<T>* layer0_decision,
                         RouteTrace<T>* trace = nullptr);

/// True when the optimizer updates router parameters under this strategy.
bool router_trainable(RoutingStrategy strategy);

/// Learned routers are used as-is and train with the rest of the model.
template <typename T>
const RouterNetwork<T>& apply_strategy_learned(const RouterNetwork<T>& router) {
  return router;
}

/// Frozen routers keep their initial parameters; the optimizer skips them.
template <typename T>
const RouterNetwork<T>& apply_strategy_frozen(const RouterNetwork<T>& router) {
  return router;
}

/// Re-draws the router from the standard initialisation, deterministically in
/// (seed, iteration, router_index).
template <typename T>
RouterNetwork<T> apply_strategy_random(const ModelConfig& model, const RoutingConfig& routing, std::int64_t seed,
                                       std::int64_t iteration, int router_index);

/// Hard-coded single-expert assignment with gate weight 1. Throws RoutingError
/// for a language absent from the map.
std::pair<int, double> apply_strategy_language(const LanguageMap& map, std::string_view label);

}  // namespace moelab
