// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// Decoder-only transformer whose FFN in every block is either a dense FFN
// (width-multiplied baseline) or an N-expert mixture combined by the gate.
// Pre-norm blocks, GELU experts, learned position embeddings, output head tied
// to the token embedding.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "moelab/config.hpp"
#include "moelab/gating.hpp"
#include "moelab/routing.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

template <typename T>
struct ExpertFFN {
  Matrix<T> fc_w;    // d × F
  Matrix<T> fc_b;    // 1 × F (empty without biases)
  Matrix<T> proj_w;  // F × d
  Matrix<T> proj_b;  // 1 × d (empty without biases)

  bool operator==(const ExpertFFN&) const = default;
};

template <typename T>
struct BlockParams {
  Matrix<T> ln1_g, ln1_b;
  Matrix<T> attn_w, attn_b;  // d × 3d, 1 × 3d
  Matrix<T> proj_w, proj_b;  // d × d, 1 × d
  Matrix<T> ln2_g, ln2_b;
  std::vector<ExpertFFN<T>> experts;  // one entry for a dense FFN

  bool operator==(const BlockParams&) const = default;
};

enum class ParamRole {
  weight,  // matrices and embeddings; weight decay applies
  vector,  // biases and norm gains; no weight decay
  router,  // router parameters; optimizer participation depends on the strategy
};

template <typename T>
struct ModelParams {
  Matrix<T> wte;  // vocab × d, also the output head
  Matrix<T> wpe;  // context × d
  std::vector<BlockParams<T>> blocks;
  std::vector<RouterNetwork<T>> routers;  // per layer, one (global), or none
  Matrix<T> lnf_g, lnf_b;

  /// Visits every present parameter tensor in the fixed declared order:
  /// wte, wpe, blocks (norms, attention, experts), routers, final norm.
  void for_each(const std::function<void(const std::string& name, Matrix<T>& tensor, ParamRole role)>& fn);
  void for_each(const std::function<void(const std::string& name, const Matrix<T>& tensor, ParamRole role)>& fn)
      const;

  std::size_t parameter_count() const;
  void set_zero();
  /// Zero-valued parameters with the same shapes.
  ModelParams zeros_like() const;

  bool operator==(const ModelParams&) const = default;
};

template <typename T>
struct ModelState {
  ExperimentConfig config;
  ModelParams<T> params;
};

/// normal(0, 0.02) weights, zero biases, unit norm gains; deterministic in `seed`.
template <typename T>
ModelState<T> build_model(const ExperimentConfig& config, std::uint64_t seed);

/// One batch of token windows. `targets` may be empty (no loss computed).
struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> tokens;   // batch × seq_len
  std::vector<std::int32_t> targets;  // batch × seq_len, inputs shifted by one
  std::vector<std::string> labels;    // one per sequence, or empty

  bool operator==(const Batch&) const = default;
};

struct ForwardOptions {
  bool training = false;          // enables dropout
  std::uint64_t dropout_seed = 0;
};

template <typename T>
struct ForwardResult {
  Matrix<T> logits;  // (batch·seq_len) × vocab
  T lm_loss = 0;
  T balance_loss = 0;
  std::vector<RoutingDecision<T>> decisions;  // one per layer; empty for dense models

  T total_loss() const { return lm_loss + balance_loss; }
};

template <typename T>
struct ForwardCache;

/// Runs the model. When `cache` is non-null, everything needed by backward()
/// is retained in it. Throws DataError for token ids ≥ vocab_size or sequences
/// longer than context_length, RoutingError for routing failures.
template <typename T>
ForwardResult<T> forward(const ModelState<T>& model, const Batch& batch, const ForwardOptions& options,
                         ForwardCache<T>* cache);

template <typename T>
ForwardResult<T> forward(const ModelState<T>& model, const Batch& batch, const ForwardOptions& options = {}) {
  return forward(model, batch, options, static_cast<ForwardCache<T>*>(nullptr));
}

/// Accumulates loss_scale · d(lm_loss + balance_loss)/dθ into `grads`.
/// Throws NumericError naming the first non-finite gradient tensor.
template <typename T>
void backward(const ModelState<T>& model, const ForwardCache<T>& cache, ModelParams<T>& grads, T loss_scale = 1);

/// Gradient of the mean cross-entropy with respect to the logits, as used by
/// backward(); exposed for tests.
template <typename T>
Matrix<T> cross_entropy_logit_grad(const ForwardCache<T>& cache);

// ---------------------------------------------------------------------------
// Cache layout. Treat as opaque outside model.cpp and tests.

template <typename T>
struct LayerNormCache {
  Matrix<T> xhat;
  std::vector<T> rstd;
};

template <typename T>
struct ExpertCache {
  std::vector<std::size_t> rows;   // token rows routed to this expert, ascending
  std::vector<std::size_t> units;  // routed unit of each row
  std::vector<std::size_t> slots;  // position of this expert in the unit's Top-K
  Matrix<T> x, pre, act, out;
};

template <typename T>
struct BlockCache {
  LayerNormCache<T> ln1;
  Matrix<T> a;
  Matrix<T> qkv;
  std::vector<T> att_probs;  // batch × heads × T × T
  Matrix<T> att_concat;
  Matrix<T> attn_mask;  // dropout mask on the attention output, empty when off
  LayerNormCache<T> ln2;
  Matrix<T> m;  // FFN input
  bool routes_here = false;
  RouteTrace<T> trace;
  std::vector<T> routed_fraction;  // f, for the balance-loss gradient
  std::vector<ExpertCache<T>> experts;
  Matrix<T> ffn_mask;
};

template <typename T>
struct ForwardCache {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  Matrix<T> emb_mask;
  std::vector<BlockCache<T>> blocks;
  LayerNormCache<T> lnf;
  Matrix<T> hf;
  Matrix<T> probs;  // softmax of logits
  std::vector<RoutingDecision<T>> decisions;
};

}  // namespace moelab
