// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "moelab/error.hpp"
#include "moelab/kernels.hpp"
#include "moelab/linalg.hpp"

namespace moelab {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;

template <typename T, typename Params, typename Fn>
void visit_params(Params& p, Fn&& fn) {
  auto visit = [&](const std::string& name, auto& m, ParamRole role) {
    if (!m.empty()) fn(name, m, role);
  };
  visit("wte", p.wte, ParamRole::weight);
  visit("wpe", p.wpe, ParamRole::weight);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "h." + std::to_string(l) + ".";
    visit(pre + "ln_1.weight", b.ln1_g, ParamRole::vector);
    visit(pre + "ln_1.bias", b.ln1_b, ParamRole::vector);
    visit(pre + "attn.c_attn.weight", b.attn_w, ParamRole::weight);
    visit(pre + "attn.c_attn.bias", b.attn_b, ParamRole::vector);
    visit(pre + "attn.c_proj.weight", b.proj_w, ParamRole::weight);
    visit(pre + "attn.c_proj.bias", b.proj_b, ParamRole::vector);
    visit(pre + "ln_2.weight", b.ln2_g, ParamRole::vector);
    visit(pre + "ln_2.bias", b.ln2_b, ParamRole::vector);
    for (std::size_t e = 0; e < b.experts.size(); ++e) {
      auto& x = b.experts[e];
      const std::string ep = pre + "ffn." + std::to_string(e) + ".";
      visit(ep + "c_fc.weight", x.fc_w, ParamRole::weight);
      visit(ep + "c_fc.bias", x.fc_b, ParamRole::vector);
      visit(ep + "c_proj.weight", x.proj_w, ParamRole::weight);
      visit(ep + "c_proj.bias", x.proj_b, ParamRole::vector);
    }
  }
  for (std::size_t r = 0; r < p.routers.size(); ++r) {
    auto& router = p.routers[r];
    const std::string rp = "router." + std::to_string(r) + ".";
    visit(rp + "w1", router.w1, ParamRole::router);
    visit(rp + "b1", router.b1, ParamRole::router);
    visit(rp + "w2", router.w2, ParamRole::router);
  }
  visit("ln_f.weight", p.lnf_g, ParamRole::vector);
  visit("ln_f.bias", p.lnf_b, ParamRole::vector);
}

template <typename T>
void layer_norm_forward(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, Matrix<T>& y,
                        LayerNormCache<T>* cache) {
  const std::size_t n = x.rows;
  const std::size_t d = x.cols;
  y.resize(n, d);
  LayerNormCache<T> local;
  auto& c = cache != nullptr ? *cache : local;
  c.xhat.resize(n, d);
  c.rstd.assign(n, T{0});
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.ptr() + r * d;
    T mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(d);
    const T rstd = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
    c.rstd[r] = rstd;
    T* xh = c.xhat.ptr() + r * d;
    T* yr = y.ptr() + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      xh[i] = (xr[i] - mean) * rstd;
      yr[i] = xh[i] * gain.data[i] + (bias.empty() ? T{0} : bias.data[i]);
    }
  }
}

// dx += LayerNorm backward of dy.
template <typename T>
void layer_norm_backward(const LayerNormCache<T>& c, const Matrix<T>& gain, const Matrix<T>& dy, Matrix<T>& dgain,
                         Matrix<T>& dbias, Matrix<T>& dx) {
  const std::size_t n = dy.rows;
  const std::size_t d = dy.cols;
  std::vector<T> dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    const T* dyr = dy.ptr() + r * d;
    const T* xh = c.xhat.ptr() + r * d;
    T mean_dxhat = 0;
    T mean_dxhat_xhat = 0;
    for (std::size_t i = 0; i < d; ++i) {
      dxhat[i] = dyr[i] * gain.data[i];
      dgain.data[i] += dyr[i] * xh[i];
      if (!dbias.empty()) dbias.data[i] += dyr[i];
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * xh[i];
    }
    mean_dxhat /= static_cast<T>(d);
    mean_dxhat_xhat /= static_cast<T>(d);
    T* dxr = dx.ptr() + r * d;
    for (std::size_t i = 0; i < d; ++i) dxr[i] += c.rstd[r] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
  }
}

template <typename T>
Matrix<T> dropout_mask(std::size_t rows, std::size_t cols, double p, std::mt19937_64& rng) {
  Matrix<T> mask(rows, cols);
  std::bernoulli_distribution keep(1.0 - p);
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (T& v : mask.data) v = keep(rng) ? scale : T{0};
  return mask;
}

template <typename T>
void apply_mask(Matrix<T>& x, const Matrix<T>& mask) {
  if (mask.empty()) return;
  for (std::size_t i = 0; i < x.size(); ++i) x.data[i] *= mask.data[i];
}

template <typename T>
void add_into(Matrix<T>& dst, const Matrix<T>& src) {
  kernels::axpy<T>(dst.size(), T{1}, src.ptr(), dst.ptr());
}

// Expert FFN on gathered rows: pre = x·W1 + b1, act = gelu(pre), out = act·W2 + b2.
template <typename T>
void expert_forward(const ExpertFFN<T>& e, ExpertCache<T>& c) {
  linalg::matmul(c.x, e.fc_w, c.pre);
  linalg::add_row_vector(c.pre, e.fc_b);
  c.act.resize(c.pre.rows, c.pre.cols);
  kernels::gelu_forward<T>(c.pre.size(), c.pre.ptr(), c.act.ptr());
  linalg::matmul(c.act, e.proj_w, c.out);
  linalg::add_row_vector(c.out, e.proj_b);
}

// Returns dL/dx for the gathered rows given dL/dout.
template <typename T>
Matrix<T> expert_backward(const ExpertFFN<T>& e, const ExpertCache<T>& c, const Matrix<T>& d_out, ExpertFFN<T>& g) {
  linalg::matmul_tn(c.act, d_out, g.proj_w, true);
  linalg::accumulate_column_sums(d_out, g.proj_b);
  Matrix<T> d_pre;
  linalg::matmul_nt(d_out, e.proj_w, d_pre);
  kernels::gelu_backward<T>(d_pre.size(), c.pre.ptr(), d_pre.ptr());
  linalg::matmul_tn(c.x, d_pre, g.fc_w, true);
  linalg::accumulate_column_sums(d_pre, g.fc_b);
  Matrix<T> dx;
  linalg::matmul_nt(d_pre, e.fc_w, dx);
  return dx;
}

template <typename T>
void attention_forward(const Matrix<T>& qkv, std::size_t batch, std::size_t seq_len, int n_heads,
                       Matrix<T>& out, std::vector<T>& probs) {
  const std::size_t d = qkv.cols / 3;
  const std::size_t hd = d / static_cast<std::size_t>(n_heads);
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  out.resize(batch * seq_len, d);
  probs.assign(batch * static_cast<std::size_t>(n_heads) * seq_len * seq_len, T{0});
  Matrix<T> q(seq_len, hd), kt(hd, seq_len), v(seq_len, hd), s, o;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
      for (std::size_t t = 0; t < seq_len; ++t) {
        const T* row = qkv.ptr() + (b * seq_len + t) * qkv.cols;
        for (std::size_t i = 0; i < hd; ++i) {
          q(t, i) = row[h * hd + i];
          kt(i, t) = row[d + h * hd + i];
          v(t, i) = row[2 * d + h * hd + i];
        }
      }
      linalg::matmul(q, kt, s);
      T* p = probs.data() + (b * static_cast<std::size_t>(n_heads) + h) * seq_len * seq_len;
      for (std::size_t i = 0; i < seq_len; ++i) {
        T max = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) max = std::max(max, s(i, j) * scale);
        T sum = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          p[i * seq_len + j] = std::exp(s(i, j) * scale - max);
          sum += p[i * seq_len + j];
        }
        for (std::size_t j = 0; j <= i; ++j) p[i * seq_len + j] /= sum;
      }
      Matrix<T> pm(seq_len, seq_len);
      std::copy_n(p, seq_len * seq_len, pm.ptr());
      linalg::matmul(pm, v, o);
      for (std::size_t t = 0; t < seq_len; ++t) {
        std::copy_n(o.ptr() + t * hd, hd, out.ptr() + (b * seq_len + t) * d + h * hd);
      }
    }
  }
}

template <typename T>
void attention_backward(const Matrix<T>& qkv, const std::vector<T>& probs, const Matrix<T>& d_out,
                        std::size_t batch, std::size_t seq_len, int n_heads, Matrix<T>& d_qkv) {
  const std::size_t d = qkv.cols / 3;
  const std::size_t hd = d / static_cast<std::size_t>(n_heads);
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  d_qkv.resize(qkv.rows, qkv.cols);
  Matrix<T> q(seq_len, hd), k(seq_len, hd), v(seq_len, hd), d_o(seq_len, hd), pm(seq_len, seq_len);
  Matrix<T> d_p, d_v, d_q, d_k;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
      for (std::size_t t = 0; t < seq_len; ++t) {
        const T* row = qkv.ptr() + (b * seq_len + t) * qkv.cols;
        const T* drow = d_out.ptr() + (b * seq_len + t) * d;
        for (std::size_t i = 0; i < hd; ++i) {
          q(t, i) = row[h * hd + i];
          k(t, i) = row[d + h * hd + i];
          v(t, i) = row[2 * d + h * hd + i];
          d_o(t, i) = drow[h * hd + i];
        }
      }
      const T* p = probs.data() + (b * static_cast<std::size_t>(n_heads) + h) * seq_len * seq_len;
      std::copy_n(p, seq_len * seq_len, pm.ptr());
      linalg::matmul_nt(d_o, v, d_p);  // T×T
      linalg::matmul_tn(pm, d_o, d_v);  // T×hd
      // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
      for (std::size_t i = 0; i < seq_len; ++i) {
        T inner = 0;
        for (std::size_t j = 0; j <= i; ++j) inner += d_p(i, j) * pm(i, j);
        for (std::size_t j = 0; j < seq_len; ++j) {
          d_p(i, j) = j <= i ? pm(i, j) * (d_p(i, j) - inner) * scale : T{0};
        }
      }
      linalg::matmul(d_p, k, d_q);
      linalg::matmul_tn(d_p, q, d_k);
      for (std::size_t t = 0; t < seq_len; ++t) {
        T* drow = d_qkv.ptr() + (b * seq_len + t) * qkv.cols;
        for (std::size_t i = 0; i < hd; ++i) {
          drow[h * hd + i] = d_q(t, i);
          drow[d + h * hd + i] = d_k(t, i);
          drow[2 * d + h * hd + i] = d_v(t, i);
        }
      }
    }
  }
}

template <typename T>
void check_finite(const std::string& name, const Matrix<T>& g) {
  for (const T v : g.data) {
    if (!std::isfinite(v)) throw NumericError("non-finite gradient in " + name);
  }
}

}  // namespace

template <typename T>
void ModelParams<T>::for_each(
    const std::function<void(const std::string&, Matrix<T>&, ParamRole)>& fn) {
  visit_params<T>(*this, fn);
}

template <typename T>
void ModelParams<T>::for_each(
    const std::function<void(const std::string&, const Matrix<T>&, ParamRole)>& fn) const {
  visit_params<T>(*this, fn);
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix<T>& m, ParamRole) { n += m.size(); });
  return n;
}

template <typename T>
void ModelParams<T>::set_zero() {
  for_each([](const std::string&, Matrix<T>& m, ParamRole) { m.fill(T{0}); });
}

template <typename T>
ModelParams<T> ModelParams<T>::zeros_like() const {
  ModelParams z = *this;
  z.set_zero();
  return z;
}

template <typename T>
ModelState<T> build_model(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  const auto& mc = config.model;
  const auto d = static_cast<std::size_t>(mc.d_model);
  const auto f = static_cast<std::size_t>(mc.ffn_hidden());
  const bool bias = mc.biases_enabled;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kInitStd);
  auto weight = [&](std::size_t r, std::size_t c) {
    Matrix<T> m(r, c);
    for (T& v : m.data) v = static_cast<T>(normal(rng));
    return m;
  };
  auto bias_vec = [&](std::size_t n) { return bias ? Matrix<T>(1, n) : Matrix<T>{}; };
  auto gain = [&](std::size_t n) { return Matrix<T>(1, n, T{1}); };

  ModelState<T> model;
  model.config = config;
  auto& p = model.params;
  p.wte = weight(static_cast<std::size_t>(mc.vocab_size), d);
  p.wpe = weight(static_cast<std::size_t>(mc.context_length), d);
  const int n_experts = config.routing ? config.routing->n_experts : 1;
  for (int l = 0; l < mc.n_layers; ++l) {
    BlockParams<T> b;
    b.ln1_g = gain(d);
    b.ln1_b = bias_vec(d);
    b.attn_w = weight(d, 3 * d);
    b.attn_b = bias_vec(3 * d);
    b.proj_w = weight(d, d);
    b.proj_b = bias_vec(d);
    b.ln2_g = gain(d);
    b.ln2_b = bias_vec(d);
    for (int e = 0; e < n_experts; ++e) {
      ExpertFFN<T> x;
      x.fc_w = weight(d, f);
      x.fc_b = bias_vec(f);
      x.proj_w = weight(f, d);
      x.proj_b = bias_vec(d);
      b.experts.push_back(std::move(x));
    }
    p.blocks.push_back(std::move(b));
  }
  if (config.routing) {
    const int routers = config.routing->router_count(mc.n_layers);
    for (int r = 0; r < routers; ++r) {
      p.routers.push_back(RouterNetwork<T>::random(mc, *config.routing, rng, kInitStd));
    }
  }
  p.lnf_g = gain(d);
  p.lnf_b = bias_vec(d);
  return model;
}

template <typename T>
ForwardResult<T> forward(const ModelState<T>& model, const Batch& batch, const ForwardOptions& options,
                         ForwardCache<T>* cache) {
  const auto& cfg = model.config;
  const auto& mc = cfg.model;
  const auto& p = model.params;
  const std::size_t B = batch.batch;
  const std::size_t S = batch.seq_len;
  const std::size_t n = B * S;
  const auto d = static_cast<std::size_t>(mc.d_model);
  const auto V = static_cast<std::size_t>(mc.vocab_size);

  if (batch.tokens.size() != n) throw DataError("batch token count does not match batch × seq_len");
  if (!batch.targets.empty() && batch.targets.size() != n) throw DataError("target count does not match tokens");
  if (S == 0 || B == 0) throw DataError("empty batch");
  if (S > static_cast<std::size_t>(mc.context_length)) {
    throw DataError("sequence length " + std::to_string(S) + " exceeds context_length " +
                    std::to_string(mc.context_length));
  }
  for (const auto id : batch.tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(V));
    }
  }
  for (const auto id : batch.targets) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw DataError("target id " + std::to_string(id) + " outside vocabulary of " + std::to_string(V));
    }
  }

  ForwardCache<T> local;
  ForwardCache<T>& c = cache != nullptr ? *cache : local;
  c = ForwardCache<T>{};
  c.batch = B;
  c.seq_len = S;
  c.tokens = batch.tokens;
  c.targets = batch.targets;
  c.blocks.resize(p.blocks.size());

  const bool dropout = options.training && mc.dropout > 0.0;
  std::mt19937_64 drop_rng(options.dropout_seed);

  Matrix<T> x(n, d);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < S; ++t) {
      const std::size_t r = b * S + t;
      const T* te = p.wte.ptr() + static_cast<std::size_t>(batch.tokens[r]) * d;
      const T* pe = p.wpe.ptr() + t * d;
      T* xr = x.ptr() + r * d;
      for (std::size_t i = 0; i < d; ++i) xr[i] = te[i] + pe[i];
    }
  }
  if (dropout) {
    c.emb_mask = dropout_mask<T>(n, d, mc.dropout, drop_rng);
    apply_mask(x, c.emb_mask);
  }

  ForwardResult<T> result;
  const bool moe = cfg.routing.has_value();
  const RoutingDecision<T>* layer0 = nullptr;
  if (moe) result.decisions.reserve(p.blocks.size());

  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const auto& bp = p.blocks[l];
    auto& bc = c.blocks[l];

    // attention
    layer_norm_forward(x, bp.ln1_g, bp.ln1_b, bc.a, &bc.ln1);
    linalg::matmul(bc.a, bp.attn_w, bc.qkv);
    linalg::add_row_vector(bc.qkv, bp.attn_b);
    attention_forward(bc.qkv, B, S, mc.n_heads, bc.att_concat, bc.att_probs);
    Matrix<T> attn_out;
    linalg::matmul(bc.att_concat, bp.proj_w, attn_out);
    linalg::add_row_vector(attn_out, bp.proj_b);
    if (dropout) {
      bc.attn_mask = dropout_mask<T>(n, d, mc.dropout, drop_rng);
      apply_mask(attn_out, bc.attn_mask);
    }
    add_into(x, attn_out);

    // feed-forward
    layer_norm_forward(x, bp.ln2_g, bp.ln2_b, bc.m, &bc.ln2);
    Matrix<T> y(n, d);
    const std::size_t n_experts = bp.experts.size();
    bc.experts.assign(n_experts, ExpertCache<T>{});
    if (moe) {
      const auto& rc = *cfg.routing;
      bc.routes_here = rc.scope == RoutingScope::layer_wise || l == 0;
      auto decision = route<T>(bc.m, B, S, static_cast<int>(l), rc, p.routers, batch.labels, layer0,
                               bc.routes_here ? &bc.trace : nullptr);
      result.decisions.push_back(std::move(decision));
      if (l == 0) layer0 = &result.decisions.front();
      const auto& dec = result.decisions.back();
      const std::size_t units = dec.unit_count();
      const auto k = static_cast<std::size_t>(dec.top_k);
      // Units are visited in order, so every expert sees its rows ascending.
      for (std::size_t u = 0; u < units; ++u) {
        const auto sel = dec.selected_for(u);
        const std::size_t first = rc.unit == RoutingUnit::token ? u : u * S;
        const std::size_t count = rc.unit == RoutingUnit::token ? 1 : S;
        for (std::size_t slot = 0; slot < k; ++slot) {
          auto& ec = bc.experts[static_cast<std::size_t>(sel[slot])];
          for (std::size_t r = first; r < first + count; ++r) {
            ec.rows.push_back(r);
            ec.units.push_back(u);
            ec.slots.push_back(slot);
          }
        }
      }
      if (bc.routes_here && !dec.probabilities.empty()) {
        const auto counts = dec.expert_counts();
        const T total_sel = static_cast<T>(units * k);
        bc.routed_fraction.resize(n_experts);
        std::vector<T> mean_p(n_experts, T{0});
        for (std::size_t u = 0; u < units; ++u) {
          const auto pu = dec.probabilities_for(u);
          for (std::size_t e = 0; e < n_experts; ++e) mean_p[e] += pu[e];
        }
        for (std::size_t e = 0; e < n_experts; ++e) {
          bc.routed_fraction[e] = static_cast<T>(counts[e]) / total_sel;
          mean_p[e] /= static_cast<T>(units);
        }
        result.balance_loss += load_balance_loss<T>(bc.routed_fraction, mean_p, static_cast<T>(rc.lambda_balance),
                                                    static_cast<int>(n_experts));
      }
    } else {
      auto& ec = bc.experts[0];
      ec.rows.resize(n);
      ec.units.resize(n);
      ec.slots.assign(n, 0);
      for (std::size_t r = 0; r < n; ++r) ec.rows[r] = ec.units[r] = r;
    }

    for (std::size_t e = 0; e < n_experts; ++e) {
      auto& ec = bc.experts[e];
      if (ec.rows.empty()) continue;
      ec.x.resize(ec.rows.size(), d);
      for (std::size_t i = 0; i < ec.rows.size(); ++i) {
        std::copy_n(bc.m.ptr() + ec.rows[i] * d, d, ec.x.ptr() + i * d);
      }
      expert_forward(bp.experts[e], ec);
      for (std::size_t i = 0; i < ec.rows.size(); ++i) {
        const T w = moe ? result.decisions.back().weights_for(ec.units[i])[ec.slots[i]] : T{1};
        kernels::axpy<T>(d, w, ec.out.ptr() + i * d, y.ptr() + ec.rows[i] * d);
      }
    }
    if (dropout) {
      bc.ffn_mask = dropout_mask<T>(n, d, mc.dropout, drop_rng);
      apply_mask(y, bc.ffn_mask);
    }
    add_into(x, y);
  }

  layer_norm_forward(x, p.lnf_g, p.lnf_b, c.hf, &c.lnf);
  linalg::matmul_nt(c.hf, p.wte, result.logits);

  if (!batch.targets.empty()) {
    c.probs.resize(n, V);
    T loss = 0;
    for (std::size_t r = 0; r < n; ++r) {
      const auto logits = result.logits.row(r);
      auto probs = c.probs.row(r);
      T max = logits[0];
      for (const T v : logits) max = std::max(max, v);
      T sum = 0;
      for (std::size_t j = 0; j < V; ++j) {
        probs[j] = std::exp(logits[j] - max);
        sum += probs[j];
      }
      for (std::size_t j = 0; j < V; ++j) probs[j] /= sum;
      loss += -(logits[static_cast<std::size_t>(batch.targets[r])] - max - std::log(sum));
    }
    result.lm_loss = loss / static_cast<T>(n);
    if (!std::isfinite(result.lm_loss)) throw NumericError("language-model loss is not finite");
  }
  c.decisions = result.decisions;
  return result;
}

template <typename T>
Matrix<T> cross_entropy_logit_grad(const ForwardCache<T>& c) {
  Matrix<T> g = c.probs;
  const T inv = T{1} / static_cast<T>(c.batch * c.seq_len);
  for (std::size_t r = 0; r < g.rows; ++r) {
    g(r, static_cast<std::size_t>(c.targets[r])) -= T{1};
    for (std::size_t j = 0; j < g.cols; ++j) g(r, j) *= inv;
  }
  return g;
}

template <typename T>
void backward(const ModelState<T>& model, const ForwardCache<T>& c, ModelParams<T>& grads, T loss_scale) {
  const auto& cfg = model.config;
  const auto& mc = cfg.model;
  const auto& p = model.params;
  if (c.targets.empty()) throw NumericError("backward requires a forward pass with targets");
  const std::size_t S = c.seq_len;
  const std::size_t n = c.batch * S;
  const auto d = static_cast<std::size_t>(mc.d_model);
  const bool moe = cfg.routing.has_value();

  Matrix<T> d_logits = cross_entropy_logit_grad(c);
  if (loss_scale != T{1}) {
    for (T& v : d_logits.data) v *= loss_scale;
  }
  // logits = hf · wteᵀ
  Matrix<T> d_hf;
  linalg::matmul(d_logits, p.wte, d_hf);
  linalg::matmul_tn(d_logits, c.hf, grads.wte, true);
  Matrix<T> dx(n, d);
  layer_norm_backward(c.lnf, p.lnf_g, d_hf, grads.lnf_g, grads.lnf_b, dx);

  // Gradient of the combine weights of the layer-0 decision, shared by all
  // layers under global scope.
  std::vector<T> global_dw;

  for (std::size_t li = p.blocks.size(); li-- > 0;) {
    const auto& bp = p.blocks[li];
    const auto& bc = c.blocks[li];
    auto& bg = grads.blocks[li];

    // feed-forward: x_out = x_mid + drop(y)
    Matrix<T> dy = dx;
    apply_mask(dy, bc.ffn_mask);
    Matrix<T> dm(n, d);
    const RoutingDecision<T>* dec = moe ? &c.decisions[li] : nullptr;
    std::vector<T> local_dw;
    std::vector<T>* dw = nullptr;
    if (moe) {
      const std::size_t slots = dec->unit_count() * static_cast<std::size_t>(dec->top_k);
      if (cfg.routing->scope == RoutingScope::global) {
        if (global_dw.empty()) global_dw.assign(slots, T{0});
        dw = &global_dw;
      } else {
        local_dw.assign(slots, T{0});
        dw = &local_dw;
      }
    }
    for (std::size_t e = 0; e < bc.experts.size(); ++e) {
      const auto& ec = bc.experts[e];
      if (ec.rows.empty()) continue;
      Matrix<T> d_out(ec.rows.size(), d);
      for (std::size_t i = 0; i < ec.rows.size(); ++i) {
        const T* dyr = dy.ptr() + ec.rows[i] * d;
        const T w = moe ? dec->weights_for(ec.units[i])[ec.slots[i]] : T{1};
        T* dor = d_out.ptr() + i * d;
        for (std::size_t j = 0; j < d; ++j) dor[j] = w * dyr[j];
        if (moe) {
          const std::size_t slot = ec.units[i] * static_cast<std::size_t>(dec->top_k) + ec.slots[i];
          (*dw)[slot] += kernels::dot<T>(d, dyr, ec.out.ptr() + i * d);
        }
      }
      const Matrix<T> dxe = expert_backward(bp.experts[e], ec, d_out, bg.experts[e]);
      for (std::size_t i = 0; i < ec.rows.size(); ++i) {
        kernels::axpy<T>(d, T{1}, dxe.ptr() + i * d, dm.ptr() + ec.rows[i] * d);
      }
    }

    if (moe && bc.routes_here && cfg.routing->strategy != RoutingStrategy::language) {
      const auto& rc = *cfg.routing;
      const auto& tr = bc.trace;
      const std::size_t units = dec->unit_count();
      const auto k = static_cast<std::size_t>(dec->top_k);
      const auto N = static_cast<std::size_t>(rc.n_experts);
      Matrix<T> d_router_logits(units, N);
      std::vector<T> d_probs(N, T{0});
      const T bal_scale = static_cast<T>(rc.lambda_balance) * static_cast<T>(N) / static_cast<T>(units) * loss_scale;
      for (std::size_t u = 0; u < units; ++u) {
        for (std::size_t e = 0; e < N; ++e) d_probs[e] = bal_scale * bc.routed_fraction[e];
        const std::span<const T> dwu(dw->data() + u * k, k);
        gate_backward<T>(tr.gates[u], tr.logits.row(u), dec->top_k, rc.unit, dwu, d_probs, d_router_logits.row(u));
      }
      const std::size_t router_index = rc.scope == RoutingScope::global ? 0 : li;
      Matrix<T> d_router_input;
      p.routers[router_index].backward(tr.router_input, tr.router_cache, d_router_logits,
                                       grads.routers[router_index], &d_router_input);
      if (rc.unit == RoutingUnit::token) {
        add_into(dm, d_router_input);
      } else {
        const T inv = T{1} / static_cast<T>(S);
        for (std::size_t b = 0; b < c.batch; ++b) {
          for (std::size_t t = 0; t < S; ++t) {
            kernels::axpy<T>(d, inv, d_router_input.ptr() + b * d, dm.ptr() + (b * S + t) * d);
          }
        }
      }
    }

    layer_norm_backward(bc.ln2, bp.ln2_g, dm, bg.ln2_g, bg.ln2_b, dx);

    // attention: x_mid = x_in + drop(att_concat · Wp + bp)
    Matrix<T> d_attn = dx;
    apply_mask(d_attn, bc.attn_mask);
    linalg::matmul_tn(bc.att_concat, d_attn, bg.proj_w, true);
    linalg::accumulate_column_sums(d_attn, bg.proj_b);
    Matrix<T> d_concat;
    linalg::matmul_nt(d_attn, bp.proj_w, d_concat);
    Matrix<T> d_qkv;
    attention_backward(bc.qkv, bc.att_probs, d_concat, c.batch, S, mc.n_heads, d_qkv);
    linalg::matmul_tn(bc.a, d_qkv, bg.attn_w, true);
    linalg::accumulate_column_sums(d_qkv, bg.attn_b);
    Matrix<T> d_a;
    linalg::matmul_nt(d_qkv, bp.attn_w, d_a);
    layer_norm_backward(bc.ln1, bp.ln1_g, d_a, bg.ln1_g, bg.ln1_b, dx);

    for (const auto* g : {&bg.attn_w, &bg.proj_w, &bg.ln1_g, &bg.ln2_g}) {
      check_finite("layer " + std::to_string(li), *g);
    }
    for (std::size_t e = 0; e < bg.experts.size(); ++e) {
      check_finite("layer " + std::to_string(li) + " expert " + std::to_string(e), bg.experts[e].fc_w);
    }
  }

  apply_mask(dx, c.emb_mask);
  for (std::size_t b = 0; b < c.batch; ++b) {
    for (std::size_t t = 0; t < S; ++t) {
      const std::size_t r = b * S + t;
      const T* dxr = dx.ptr() + r * d;
      kernels::axpy<T>(d, T{1}, dxr, grads.wte.ptr() + static_cast<std::size_t>(c.tokens[r]) * d);
      kernels::axpy<T>(d, T{1}, dxr, grads.wpe.ptr() + t * d);
    }
  }
  check_finite("wte", grads.wte);
  for (std::size_t r = 0; r < grads.routers.size(); ++r) check_finite("router " + std::to_string(r), grads.routers[r].w1);
}

#define MOELAB_INSTANTIATE_MODEL(T)                                                                         \
  template struct ModelParams<T>;                                                                           \
  template ModelState<T> build_model<T>(const ExperimentConfig&, std::uint64_t);                            \
  template ForwardResult<T> forward<T>(const ModelState<T>&, const Batch&, const ForwardOptions&,           \
                                       ForwardCache<T>*);                                                   \
  template void backward<T>(const ModelState<T>&, const ForwardCache<T>&, ModelParams<T>&, T);              \
  template Matrix<T> cross_entropy_logit_grad<T>(const ForwardCache<T>&);

MOELAB_INSTANTIATE_MODEL(float)
MOELAB_INSTANTIATE_MODEL(double)

}  // namespace moelab
