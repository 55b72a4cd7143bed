// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// Gating mathematics: router networks, softmax, Top-K selection, combine
// weights, sequence pooling and the load-balancing auxiliary loss.
//
// Combine weights by gate:
//   top-1 (any unit)       w = [p_argmax],          p = softmax(h)
//   token, K ≥ 2           w = softmax(h_T)         (one softmax over the selected logits)
//   sequence, K ≥ 2        w = softmax(p_T)         (softmax applied to the probabilities)
// where T is the ordered Top-K index set (descending, lowest index wins ties).

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "moelab/config.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

template <typename T>
struct GateResult {
  std::vector<T> probabilities;   // length N, sums to 1
  std::vector<int> selected;      // length K, descending by score
  std::vector<T> combine_weights; // length K

  bool operator==(const GateResult&) const = default;
};

/// Max-subtracted softmax. Throws NumericError on NaN/Inf input.
template <typename T>
std::vector<T> softmax(std::span<const T> logits);

/// Indices of the k largest values, descending; equal values keep ascending index order.
template <typename T>
std::vector<int> top_k_indices(std::span<const T> values, int k);

template <typename T>
GateResult<T> gate_top1(std::span<const T> logits);

/// Throws ConfigError unless 1 ≤ k ≤ N.
template <typename T>
GateResult<T> gate_topk_token(std::span<const T> logits, int k);

/// k = 1 falls back to gate_top1. Throws ConfigError unless 1 ≤ k ≤ N.
template <typename T>
GateResult<T> gate_topk_sequence(std::span<const T> logits, int k);

/// The gate a model uses for its routing unit: Top-1 for k = 1, otherwise the
/// unit-specific Top-K gate.
template <typename T>
GateResult<T> gate(std::span<const T> logits, int k, RoutingUnit unit);

/// Accumulates dL/dlogits into `d_logits` given upstream gradients with respect
/// to the combine weights (length K) and the probabilities (length N, may be
/// empty). The selection itself is piecewise constant and contributes nothing.
template <typename T>
void gate_backward(const GateResult<T>& g, std::span<const T> logits, int k, RoutingUnit unit,
                   std::span<const T> d_weights, std::span<const T> d_probs, std::span<T> d_logits);

/// Mean of the unmasked rows of `rows` (T×d). Throws RoutingError when every
/// position is masked. An empty mask means "all positions present".
template <typename T>
std::vector<T> pool_sequence(const Matrix<T>& rows, std::span<const bool> mask);

/// λ · N · Σ f_i · P_i. Throws NumericError on negative or non-finite entries
/// and ConfigError on length mismatch.
template <typename T>
T load_balance_loss(std::span<const T> routed_fraction, std::span<const T> mean_probability, T lambda,
                    int n_experts);

/// Maps a routed unit's representation (d_model) to N logits. One-layer:
/// h = x·W. Two-layer: h = gelu(x·W1 + b1)·W2.
template <typename T>
struct RouterNetwork {
  RouterDepth depth = RouterDepth::one_layer;
  Matrix<T> w1;  // d×N (one-layer) or d×H
  Matrix<T> b1;  // 1×H, two-layer with biases only
  Matrix<T> w2;  // H×N, two-layer only

  int n_experts() const { return static_cast<int>(depth == RouterDepth::one_layer ? w1.cols : w2.cols); }
  std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size(); }

  /// Zero-valued router with the shape implied by the configs.
  static RouterNetwork zeros(const ModelConfig& model, const RoutingConfig& routing);
  /// Weights ~ normal(0, std), biases zero.
  static RouterNetwork random(const ModelConfig& model, const RoutingConfig& routing, std::mt19937_64& rng,
                              double std = 0.02);

  struct Cache {
    Matrix<T> hidden_pre;  // U×H, two-layer only
    Matrix<T> hidden;      // U×H, two-layer only
  };

  /// x: U×d. Returns U×N logits.
  Matrix<T> forward(const Matrix<T>& x, Cache* cache = nullptr) const;
  /// Accumulates parameter gradients into `grads` (same shape) and, when `dx`
  /// is non-null, writes dL/dx (U×d).
  void backward(const Matrix<T>& x, const Cache& cache, const Matrix<T>& d_logits, RouterNetwork& grads,
                Matrix<T>* dx) const;

  bool operator==(const RouterNetwork&) const = default;
};

}  // namespace moelab
