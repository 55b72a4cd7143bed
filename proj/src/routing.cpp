// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/routing.hpp"

#include <random>

#include "moelab/error.hpp"

namespace moelab {

template <typename T>
std::vector<std::int64_t> RoutingDecision<T>::expert_counts() const {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(n_experts), 0);
  for (const int e : selected) ++counts[static_cast<std::size_t>(e)];
  return counts;
}

template <typename T>
bool RoutingDecision<T>::same_routing(const RoutingDecision& other) const {
  return unit == other.unit && n_experts == other.n_experts && top_k == other.top_k && batch == other.batch &&
         seq_len == other.seq_len && selected == other.selected && combine_weights == other.combine_weights &&
         probabilities == other.probabilities;
}

bool router_trainable(RoutingStrategy strategy) { return strategy == RoutingStrategy::learned; }

std::pair<int, double> apply_strategy_language(const LanguageMap& map, std::string_view label) {
  const auto expert = map.find(label);
  if (!expert) throw RoutingError("language '" + std::string(label) + "' is not in the language map");
  return {*expert, 1.0};
}

template <typename T>
RouterNetwork<T> apply_strategy_random(const ModelConfig& model, const RoutingConfig& routing, std::int64_t seed,
                                       std::int64_t iteration, int router_index) {
  const auto s = static_cast<std::uint64_t>(seed);
  const auto it = static_cast<std::uint64_t>(iteration);
  std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32),
                    static_cast<std::uint32_t>(it), static_cast<std::uint32_t>(it >> 32),
                    static_cast<std::uint32_t>(router_index), 0x7a11d0u};
  std::mt19937_64 rng(seq);
  return RouterNetwork<T>::random(model, routing, rng);
}

template <typename T>
RoutingDecision<T> route(const Matrix<T>& layer_input, std::size_t batch, std::size_t seq_len, int layer,
                         const RoutingConfig& routing, std::span<const RouterNetwork<T>> routers,
                         std::span<const std::string> labels, const RoutingDecision<T>* layer0_decision,
                         RouteTrace<T>* trace) {
  if (layer_input.rows != batch * seq_len) throw RoutingError("layer input rows do not match batch × seq_len");

  if (routing.scope == RoutingScope::global && layer > 0) {
    if (layer0_decision == nullptr) throw RoutingError("global routing needs the layer-0 decision");
    RoutingDecision<T> d = *layer0_decision;
    d.layer = layer;
    return d;
  }

  RoutingDecision<T> d;
  d.layer = layer;
  d.unit = routing.unit;
  d.n_experts = routing.n_experts;
  d.top_k = routing.effective_top_k();
  d.batch = batch;
  d.seq_len = seq_len;
  const std::size_t units = d.unit_count();
  const auto k = static_cast<std::size_t>(d.top_k);
  d.selected.resize(units * k);
  d.combine_weights.resize(units * k);

  if (routing.strategy == RoutingStrategy::language) {
    if (labels.size() != batch) throw RoutingError("language routing needs one label per sequence");
    for (std::size_t b = 0; b < batch; ++b) {
      const auto [expert, weight] = apply_strategy_language(routing.language_map, labels[b]);
      d.selected[b] = expert;
      d.combine_weights[b] = static_cast<T>(weight);
    }
    return d;
  }

  const std::size_t router_index = routing.scope == RoutingScope::global ? 0 : static_cast<std::size_t>(layer);
  if (router_index >= routers.size()) {
    throw RoutingError("no router network for layer " + std::to_string(layer));
  }
  const auto& router = routers[router_index];

  const std::size_t d_model = layer_input.cols;
  Matrix<T> input;
  if (routing.unit == RoutingUnit::token) {
    input = layer_input;
  } else {
    input.resize(batch, d_model);
    Matrix<T> seq(seq_len, d_model);
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(layer_input.ptr() + b * seq_len * d_model, seq_len * d_model, seq.ptr());
      const auto pooled = pool_sequence<T>(seq, {});
      std::copy(pooled.begin(), pooled.end(), input.row(b).begin());
    }
  }

  typename RouterNetwork<T>::Cache cache;
  Matrix<T> logits = router.forward(input, &cache);
  d.probabilities.resize(units * static_cast<std::size_t>(routing.n_experts));
  std::vector<GateResult<T>> gates;
  gates.reserve(units);
  for (std::size_t u = 0; u < units; ++u) {
    auto g = gate<T>(logits.row(u), d.top_k, routing.unit);
    std::copy(g.selected.begin(), g.selected.end(), d.selected.begin() + u * k);
    std::copy(g.combine_weights.begin(), g.combine_weights.end(), d.combine_weights.begin() + u * k);
    std::copy(g.probabilities.begin(), g.probabilities.end(), d.probabilities.begin() + u * routing.n_experts);
    gates.push_back(std::move(g));
  }
  if (trace != nullptr) {
    trace->router_input = std::move(input);
    trace->router_cache = std::move(cache);
    trace->logits = std::move(logits);
    trace->gates = std::move(gates);
  }
  return d;
}

template struct RoutingDecision<float>;
template struct RoutingDecision<double>;
template RoutingDecision<float> route<float>(const Matrix<float>&, std::size_t, std::size_t, int,
                                             const RoutingConfig&, std::span<const RouterNetwork<float>>,
                                             std::span<const std::string>, const RoutingDecision<float>*,
                                             RouteTrace<float>*);
template RoutingDecision<double> route<double>(const Matrix<double>&, std::size_t, std::size_t, int,
                                               const RoutingConfig&, std::span<const RouterNetwork<double>>,
                                               std::span<const std::string>, const RoutingDecision<double>*,
                                               RouteTrace<double>*);
template RouterNetwork<float> apply_strategy_random<float>(const ModelConfig&, const RoutingConfig&, std::int64_t,
                                                           std::int64_t, int);
template RouterNetwork<double> apply_strategy_random<double>(const ModelConfig&, const RoutingConfig&,
                                                             std::int64_t, std::int64_t, int);

}  // namespace moelab
