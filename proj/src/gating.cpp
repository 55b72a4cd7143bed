// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/gating.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "moelab/error.hpp"
#include "moelab/linalg.hpp"

namespace moelab {

namespace {

void check_k(int k, std::size_t n) {
  if (k < 1 || static_cast<std::size_t>(k) > n) {
    throw ConfigError("top_k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
}

template <typename T>
T dot_span(std::span<const T> a, std::span<const T> b) {
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  if (logits.empty()) throw NumericError("softmax of an empty vector");
  T max = logits[0];
  for (const T v : logits) {
    if (!std::isfinite(v)) throw NumericError("softmax input is not finite");
    max = std::max(max, v);
  }
  std::vector<T> out(logits.size());
  T sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - max);
    sum += out[i];
  }
  for (T& v : out) v /= sum;
  return out;
}

template <typename T>
std::vector<int> top_k_indices(std::span<const T> values, int k) {
  check_k(k, values.size());
  std::vector<int> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

template <typename T>
GateResult<T> gate_top1(std::span<const T> logits) {
  GateResult<T> g;
  g.probabilities = softmax(logits);
  g.selected = top_k_indices<T>(g.probabilities, 1);
  g.combine_weights = {g.probabilities[g.selected[0]]};
  return g;
}

template <typename T>
GateResult<T> gate_topk_token(std::span<const T> logits, int k) {
  check_k(k, logits.size());
  GateResult<T> g;
  g.probabilities = softmax(logits);
  g.selected = top_k_indices(logits, k);
  std::vector<T> chosen(g.selected.size());
  for (std::size_t i = 0; i < chosen.size(); ++i) chosen[i] = logits[g.selected[i]];
  g.combine_weights = softmax<T>(chosen);
  return g;
}

template <typename T>
GateResult<T> gate_topk_sequence(std::span<const T> logits, int k) {
  check_k(k, logits.size());
  if (k == 1) return gate_top1(logits);
  GateResult<T> g;
  g.probabilities = softmax(logits);
  g.selected = top_k_indices<T>(g.probabilities, k);
  std::vector<T> chosen(g.selected.size());
  for (std::size_t i = 0; i < chosen.size(); ++i) chosen[i] = g.probabilities[g.selected[i]];
  g.combine_weights = softmax<T>(chosen);
  return g;
}

template <typename T>
GateResult<T> gate(std::span<const T> logits, int k, RoutingUnit unit) {
  if (k == 1) return gate_top1(logits);
  return unit == RoutingUnit::token ? gate_topk_token(logits, k) : gate_topk_sequence(logits, k);
}

template <typename T>
void gate_backward(const GateResult<T>& g, std::span<const T> logits, int k, RoutingUnit unit,
                   std::span<const T> d_weights, std::span<const T> d_probs, std::span<T> d_logits) {
  const std::size_t n = logits.size();
  std::vector<T> dp(n, T{0});
  if (!d_probs.empty()) std::copy(d_probs.begin(), d_probs.end(), dp.begin());

  if (k == 1) {
    dp[g.selected[0]] += d_weights[0];
  } else {
    // w = softmax(s_T): ds_T = w ⊙ (dw − ⟨dw, w⟩)
    const std::span<const T> w(g.combine_weights);
    const T inner = dot_span(d_weights, w);
    for (std::size_t i = 0; i < g.selected.size(); ++i) {
      const T ds = w[i] * (d_weights[i] - inner);
      if (unit == RoutingUnit::token) {
        d_logits[g.selected[i]] += ds;
      } else {
        dp[g.selected[i]] += ds;
      }
    }
  }

  const std::span<const T> p(g.probabilities);
  const T inner = dot_span<T>(dp, p);
  for (std::size_t i = 0; i < n; ++i) d_logits[i] += p[i] * (dp[i] - inner);
}

template <typename T>
std::vector<T> pool_sequence(const Matrix<T>& rows, std::span<const bool> mask) {
  if (!mask.empty() && mask.size() != rows.rows) throw RoutingError("pooling mask length does not match sequence");
  std::vector<T> out(rows.cols, T{0});
  std::size_t present = 0;
  for (std::size_t t = 0; t < rows.rows; ++t) {
    if (!mask.empty() && !mask[t]) continue;
    ++present;
    const auto r = rows.row(t);
    for (std::size_t c = 0; c < rows.cols; ++c) out[c] += r[c];
  }
  if (present == 0) throw RoutingError("cannot pool an empty sequence (every position masked)");
  const T inv = T{1} / static_cast<T>(present);
  for (T& v : out) v *= inv;
  return out;
}

template <typename T>
T load_balance_loss(std::span<const T> routed_fraction, std::span<const T> mean_probability, T lambda,
                    int n_experts) {
  if (routed_fraction.size() != static_cast<std::size_t>(n_experts) ||
      mean_probability.size() != static_cast<std::size_t>(n_experts)) {
    throw ConfigError("load balance inputs must have length n_experts");
  }
  if (!std::isfinite(lambda) || lambda < 0) throw NumericError("load balance weight must be finite and >= 0");
  T acc = 0;
  for (int i = 0; i < n_experts; ++i) {
    const T f = routed_fraction[i];
    const T p = mean_probability[i];
    if (!(f >= 0) || !(p >= 0) || !std::isfinite(f) || !std::isfinite(p)) {
      throw NumericError("load balance inputs must be finite and nonnegative");
    }
    acc += f * p;
  }
  return lambda * static_cast<T>(n_experts) * acc;
}

template <typename T>
RouterNetwork<T> RouterNetwork<T>::zeros(const ModelConfig& model, const RoutingConfig& routing) {
  RouterNetwork r;
  r.depth = routing.router_depth;
  const auto d = static_cast<std::size_t>(model.d_model);
  const auto n = static_cast<std::size_t>(routing.n_experts);
  if (r.depth == RouterDepth::one_layer) {
    r.w1 = Matrix<T>(d, n);
  } else {
    const auto h = static_cast<std::size_t>(routing.router_hidden);
    r.w1 = Matrix<T>(d, h);
    if (model.biases_enabled) r.b1 = Matrix<T>(1, h);
    r.w2 = Matrix<T>(h, n);
  }
  return r;
}

template <typename T>
RouterNetwork<T> RouterNetwork<T>::random(const ModelConfig& model, const RoutingConfig& routing,
                                          std::mt19937_64& rng, double std) {
  auto r = zeros(model, routing);
  std::normal_distribution<double> normal(0.0, std);
  for (T& v : r.w1.data) v = static_cast<T>(normal(rng));
  for (T& v : r.w2.data) v = static_cast<T>(normal(rng));
  return r;
}

template <typename T>
Matrix<T> RouterNetwork<T>::forward(const Matrix<T>& x, Cache* cache) const {
  Matrix<T> logits;
  if (depth == RouterDepth::one_layer) {
    linalg::matmul(x, w1, logits);
    return logits;
  }
  Matrix<T> pre;
  linalg::matmul(x, w1, pre);
  linalg::add_row_vector(pre, b1);
  Matrix<T> hidden(pre.rows, pre.cols);
  kernels::gelu_forward<T>(pre.size(), pre.ptr(), hidden.ptr());
  linalg::matmul(hidden, w2, logits);
  if (cache != nullptr) {
    cache->hidden_pre = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return logits;
}

template <typename T>
void RouterNetwork<T>::backward(const Matrix<T>& x, const Cache& cache, const Matrix<T>& d_logits,
                                RouterNetwork& grads, Matrix<T>* dx) const {
  if (depth == RouterDepth::one_layer) {
    linalg::matmul_tn(x, d_logits, grads.w1, true);
    if (dx != nullptr) linalg::matmul_nt(d_logits, w1, *dx);
    return;
  }
  linalg::matmul_tn(cache.hidden, d_logits, grads.w2, true);
  Matrix<T> d_hidden;
  linalg::matmul_nt(d_logits, w2, d_hidden);
  kernels::gelu_backward<T>(d_hidden.size(), cache.hidden_pre.ptr(), d_hidden.ptr());
  linalg::accumulate_column_sums(d_hidden, grads.b1);
  linalg::matmul_tn(x, d_hidden, grads.w1, true);
  if (dx != nullptr) linalg::matmul_nt(d_hidden, w1, *dx);
}

#define MOELAB_INSTANTIATE_GATING(T)                                                                        \
  template std::vector<T> softmax<T>(std::span<const T>);                                                    \
  template std::vector<int> top_k_indices<T>(std::span<const T>, int);                                       \
  template GateResult<T> gate_top1<T>(std::span<const T>);                                                   \
  template GateResult<T> gate_topk_token<T>(std::span<const T>, int);                                        \
  template GateResult<T> gate_topk_sequence<T>(std::span<const T>, int);                                     \
  template GateResult<T> gate<T>(std::span<const T>, int, RoutingUnit);                                      \
  template void gate_backward<T>(const GateResult<T>&, std::span<const T>, int, RoutingUnit,                 \
                                 std::span<const T>, std::span<const T>, std::span<T>);                      \
  template std::vector<T> pool_sequence<T>(const Matrix<T>&, std::span<const bool>);                         \
  template T load_balance_loss<T>(std::span<const T>, std::span<const T>, T, int);                           \
  template struct RouterNetwork<T>;

MOELAB_INSTANTIATE_GATING(float)
MOELAB_INSTANTIATE_GATING(double)

}  // namespace moelab
