// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "moelab/error.hpp"
#include "moelab/model.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

namespace moelab {
namespace {

using testing::all_scalars;
using testing::gradient_check;
using testing::jitter_vectors;
using testing::random_batch;
using testing::scale_weights;
using testing::tiny_config;

struct GradCase {
  RoutingUnit unit;
  int k;
  RoutingScope scope;
};

class GradientCheck : public ::testing::TestWithParam<GradCase> {};

TEST_P(GradientCheck, AnalyticMatchesCentralDifferences) {
  const auto c = GetParam();
  const auto config = tiny_config(3, c.k, c.unit, c.scope);
  const auto outcome = gradient_check(config, 25, 10, 17 + c.k);
  EXPECT_GE(outcome.checked, 25);
  EXPECT_GE(outcome.router_checked, 5);
  EXPECT_LT(outcome.worst, 1e-4) << outcome.worst_name;
}

INSTANTIATE_TEST_SUITE_P(AllRoutingCells, GradientCheck,
                         ::testing::Values(GradCase{RoutingUnit::token, 1, RoutingScope::layer_wise},
                                           GradCase{RoutingUnit::token, 1, RoutingScope::global},
                                           GradCase{RoutingUnit::token, 2, RoutingScope::layer_wise},
                                           GradCase{RoutingUnit::token, 2, RoutingScope::global},
                                           GradCase{RoutingUnit::sequence, 1, RoutingScope::layer_wise},
                                           GradCase{RoutingUnit::sequence, 1, RoutingScope::global},
                                           GradCase{RoutingUnit::sequence, 2, RoutingScope::layer_wise},
                                           GradCase{RoutingUnit::sequence, 2, RoutingScope::global}),
                         [](const auto& info) {
                           return std::string(to_string(info.param.unit)) + "_k" + std::to_string(info.param.k) +
                                  "_" + std::string(to_string(info.param.scope));
                         });

TEST(GradientCheckExtra, TwoLayerRouterAndDense) {
  auto config = tiny_config(3, 2, RoutingUnit::sequence);
  config.routing->router_depth = RouterDepth::two_layer;
  auto outcome = gradient_check(config, 25, 10, 31);
  EXPECT_LT(outcome.worst, 1e-4) << outcome.worst_name;
  EXPECT_GE(outcome.router_checked, 5);

  auto dense = tiny_config();
  dense.routing.reset();
  dense.model.ffn_width_multiplier = 2;
  outcome = gradient_check(dense, 30, 0, 32);
  EXPECT_EQ(outcome.checked, 30);
  EXPECT_LT(outcome.worst, 1e-4) << outcome.worst_name;

  auto no_bias = tiny_config(3, 2);
  no_bias.model.biases_enabled = false;
  outcome = gradient_check(no_bias, 25, 5, 33);
  EXPECT_LT(outcome.worst, 1e-4) << outcome.worst_name;
}

TEST(GradientCheckExtra, LanguageRouting) {
  auto config = tiny_config(4, 1, RoutingUnit::sequence, RoutingScope::global);
  config.routing->strategy = RoutingStrategy::language;
  config.routing->language_map = LanguageMap::parse("en:0,de:1,fr:2");
  config.validate();
  auto model = build_model<double>(config, 3);
  scale_weights(model, 10.0);
  auto batch = random_batch(3, 6, 11, 4);
  batch.labels = {"fr", "en", "fr"};
  ForwardCache<double> cache;
  forward(model, batch, {}, &cache);
  auto grads = model.params.zeros_like();
  backward(model, cache, grads);
  // Expert 1 (de) and 3 (unmapped) see no data.
  for (std::size_t l = 0; l < 2; ++l) {
    for (const double g : grads.blocks[l].experts[1].fc_w.data) EXPECT_EQ(g, 0.0);
    for (const double g : grads.blocks[l].experts[3].fc_w.data) EXPECT_EQ(g, 0.0);
  }
  auto refs = all_scalars(model.params);
  auto grad_refs = all_scalars(grads);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 25; ++i) {
    const std::size_t id = rng() % refs.size();
    double& w = refs[id].tensor->data[refs[id].index];
    const double keep = w;
    w = keep + 1e-5;
    const double lp = forward(model, batch).total_loss();
    w = keep - 1e-5;
    const double lm = forward(model, batch).total_loss();
    w = keep;
    const double fd = (lp - lm) / 2e-5;
    const double an = grad_refs[id].tensor->data[grad_refs[id].index];
    EXPECT_LT(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}), 1e-4) << refs[id].name;
  }
}

ModelState<double> dense_copy(const ModelState<double>& moe) {
  auto config = moe.config;
  config.routing.reset();
  auto dense = build_model<double>(config, 0);
  dense.params.wte = moe.params.wte;
  dense.params.wpe = moe.params.wpe;
  dense.params.lnf_g = moe.params.lnf_g;
  dense.params.lnf_b = moe.params.lnf_b;
  dense.params.blocks = moe.params.blocks;
  return dense;
}

TEST(Degenerate, SingleExpertEqualsDenseBitForBit) {
  for (const auto unit : {RoutingUnit::token, RoutingUnit::sequence}) {
    for (const auto scope : {RoutingScope::layer_wise, RoutingScope::global}) {
      const auto config = tiny_config(1, 1, unit, scope);
      auto moe = build_model<double>(config, 8);
      jitter_vectors(moe, 9, 0.2);
      const auto dense = dense_copy(moe);
      ASSERT_EQ(dense.params.parameter_count() + moe.params.routers.size() * 16, moe.params.parameter_count());
      const auto batch = random_batch(3, 6, 11, 10);
      const auto a = forward(moe, batch);
      const auto b = forward(dense, batch);
      EXPECT_EQ(a.logits, b.logits);
      EXPECT_EQ(a.lm_loss, b.lm_loss);
      for (const auto& d : a.decisions) {
        for (double w : d.combine_weights) EXPECT_EQ(w, 1.0);
      }
      // float32 too.
      auto moe32 = build_model<float>(config, 8);
      auto dense_cfg = config;
      dense_cfg.routing.reset();
      auto dense32 = build_model<float>(dense_cfg, 0);
      dense32.params.wte = moe32.params.wte;
      dense32.params.wpe = moe32.params.wpe;
      dense32.params.blocks = moe32.params.blocks;
      EXPECT_EQ(forward(moe32, batch).logits, forward(dense32, batch).logits);
    }
  }
}

TEST(Forward, ZeroedHeadGivesUniformPrediction) {
  auto config = tiny_config();
  config.model.vocab_size = 256;
  config.validate();
  auto model = build_model<double>(config, 11);
  model.params.wte.fill(0.0);
  const auto batch = random_batch(2, 6, 256, 12);
  const auto r = forward(model, batch);
  EXPECT_NEAR(r.lm_loss, std::log(256.0), 1e-12);
  EXPECT_NEAR(r.lm_loss, 5.545, 1e-3);
  EXPECT_EQ(r.logits.rows, 12u);
  EXPECT_EQ(r.logits.cols, 256u);
}

TEST(Forward, RejectsBadInput) {
  const auto config = tiny_config();
  auto model = build_model<double>(config, 1);
  auto batch = random_batch(1, 6, 11, 1);
  batch.tokens[2] = 11;
  EXPECT_THROW(forward(model, batch), DataError);
  batch.tokens[2] = -1;
  EXPECT_THROW(forward(model, batch), DataError);
  EXPECT_THROW(forward(model, random_batch(1, 9, 11, 1)), DataError);
}

TEST(Forward, CausalForTokenRoutingAndDense) {
  auto dense = tiny_config();
  dense.routing.reset();
  for (const auto& config : {tiny_config(3, 2, RoutingUnit::token), tiny_config(3, 1, RoutingUnit::token,
                                                                                 RoutingScope::global), dense}) {
    auto model = build_model<double>(config, 13);
    scale_weights(model, 5.0);
    auto batch = random_batch(2, 8, 11, 14);
    const auto base = forward(model, batch);
    for (std::size_t t = 0; t < 8; ++t) {
      auto changed = batch;
      changed.tokens[t] = (changed.tokens[t] + 3) % 11;
      const auto r = forward(model, changed);
      for (std::size_t pos = 0; pos < 8; ++pos) {
        const auto row_a = base.logits.row(pos);
        const auto row_b = r.logits.row(pos);
        const bool same = std::equal(row_a.begin(), row_a.end(), row_b.begin());
        if (pos < t) {
          EXPECT_TRUE(same) << "position " << pos << " saw token " << t;
        } else if (pos == t) {
          EXPECT_FALSE(same);
        }
      }
      // The second sequence is untouched.
      for (std::size_t pos = 8; pos < 16; ++pos) {
        const auto row_a = base.logits.row(pos);
        const auto row_b = r.logits.row(pos);
        EXPECT_TRUE(std::equal(row_a.begin(), row_a.end(), row_b.begin()));
      }
    }
  }
}

TEST(Forward, TokenRoutingBatchPermutationEquivariant) {
  const auto config = tiny_config(3, 2, RoutingUnit::token);
  auto model = build_model<double>(config, 15);
  scale_weights(model, 5.0);
  const auto batch = random_batch(3, 6, 11, 16);
  const std::vector<std::size_t> perm{2, 0, 1};
  Batch permuted = batch;
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t t = 0; t < 6; ++t) {
      permuted.tokens[b * 6 + t] = batch.tokens[perm[b] * 6 + t];
      permuted.targets[b * 6 + t] = batch.targets[perm[b] * 6 + t];
    }
  }
  const auto a = forward(model, batch);
  const auto p = forward(model, permuted);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t t = 0; t < 6; ++t) {
      const auto ra = a.logits.row(perm[b] * 6 + t);
      const auto rp = p.logits.row(b * 6 + t);
      ASSERT_TRUE(std::equal(ra.begin(), ra.end(), rp.begin()));
      for (std::size_t l = 0; l < a.decisions.size(); ++l) {
        const auto sa = a.decisions[l].selected_for(perm[b] * 6 + t);
        const auto sp = p.decisions[l].selected_for(b * 6 + t);
        ASSERT_TRUE(std::equal(sa.begin(), sa.end(), sp.begin()));
      }
    }
  }
  EXPECT_NEAR(a.lm_loss, p.lm_loss, 1e-12);
  EXPECT_NEAR(a.balance_loss, p.balance_loss, 1e-12);
}

TEST(Backward, LogitGradientSumsToZeroPerRow) {
  const auto config = tiny_config();
  auto model = build_model<double>(config, 17);
  scale_weights(model, 5.0);
  ForwardCache<double> cache;
  forward(model, random_batch(3, 6, 11, 18), {}, &cache);
  const auto g = cross_entropy_logit_grad(cache);
  for (std::size_t r = 0; r < g.rows; ++r) {
    const auto row = g.row(r);
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 0.0, 1e-15);
  }
}

// With λ = 0 the balance term contributes exactly nothing: the loss equals the
// LM loss and the gradient equals central differences of the LM loss alone.
TEST(Backward, ZeroLambdaMeansNoBalanceTerm) {
  auto config = tiny_config(3, 2, RoutingUnit::sequence);
  config.routing->lambda_balance = 0;
  auto model = build_model<double>(config, 19);
  scale_weights(model, 10.0);
  const auto batch = random_batch(3, 6, 11, 20);
  ForwardCache<double> cache;
  const auto r = forward(model, batch, {}, &cache);
  EXPECT_EQ(r.balance_loss, 0.0);
  EXPECT_EQ(r.total_loss(), r.lm_loss);
  auto grads = model.params.zeros_like();
  backward(model, cache, grads);
  auto& w = model.params.routers[1].w1.data[5];
  const double keep = w;
  w = keep + 1e-5;
  const double lp = forward(model, batch).lm_loss;
  w = keep - 1e-5;
  const double lm = forward(model, batch).lm_loss;
  w = keep;
  EXPECT_NEAR(grads.routers[1].w1.data[5], (lp - lm) / 2e-5, 1e-8);

  // The same model with λ > 0 differs only through the router path.
  auto with = model;
  with.config.routing->lambda_balance = 0.5;
  ForwardCache<double> cache2;
  const auto r2 = forward(with, batch, {}, &cache2);
  EXPECT_EQ(r2.lm_loss, r.lm_loss);
  EXPECT_GT(r2.balance_loss, 0.0);
  auto grads2 = with.params.zeros_like();
  backward(with, cache2, grads2);
  EXPECT_NE(grads2.routers, grads.routers);
}

TEST(Backward, LossScaleIsLinear) {
  const auto config = tiny_config();
  auto model = build_model<double>(config, 21);
  ForwardCache<double> cache;
  forward(model, random_batch(3, 6, 11, 22), {}, &cache);
  auto g1 = model.params.zeros_like();
  auto g2 = model.params.zeros_like();
  backward(model, cache, g1, 1.0);
  backward(model, cache, g2, 0.5);
  backward(model, cache, g2, 0.5);
  auto a = all_scalars(g1);
  auto b = all_scalars(g2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_NEAR(a[i].tensor->data[a[i].index], b[i].tensor->data[b[i].index], 1e-14);
  }
}

TEST(Backward, ReportsNonFiniteGradient) {
  const auto config = tiny_config();
  auto model = build_model<double>(config, 23);
  ForwardCache<double> cache;
  forward(model, random_batch(3, 6, 11, 24), {}, &cache);
  auto grads = model.params.zeros_like();
  EXPECT_THROW(backward(model, cache, grads, std::numeric_limits<double>::quiet_NaN()), NumericError);
}

TEST(BuildModel, DeterministicAndCountConsistent) {
  for (const auto& config : {tiny_config(), tiny_config(4, 1, RoutingUnit::sequence, RoutingScope::global),
                             desk_preset()}) {
    const auto a = build_model<float>(config, 5);
    const auto b = build_model<float>(config, 5);
    const auto c = build_model<float>(config, 6);
    EXPECT_EQ(a.params, b.params);
    EXPECT_NE(a.params, c.params);
    EXPECT_EQ(static_cast<std::int64_t>(a.params.parameter_count()), count_parameters(config).total);
  }
  auto dense = desk_preset();
  dense.routing.reset();
  dense.model.ffn_width_multiplier = 4;
  EXPECT_EQ(static_cast<std::int64_t>(build_model<float>(dense, 1).params.parameter_count()),
            count_parameters(dense).total);
}

TEST(BuildModel, InitialisationStatistics) {
  auto config = desk_preset();
  const auto m = build_model<double>(config, 1);
  double sum = 0, sq = 0;
  for (double v : m.params.blocks[0].attn_w.data) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(m.params.blocks[0].attn_w.size());
  EXPECT_NEAR(sum / n, 0.0, 0.001);
  EXPECT_NEAR(std::sqrt(sq / n), 0.02, 0.001);
  for (double v : m.params.blocks[0].attn_b.data) EXPECT_EQ(v, 0.0);
  for (double v : m.params.lnf_g.data) EXPECT_EQ(v, 1.0);
}

TEST(Forward, DropoutOnlyWhenTraining) {
  auto config = tiny_config();
  config.model.dropout = 0.3;
  config.validate();
  auto model = build_model<double>(config, 25);
  const auto batch = random_batch(3, 6, 11, 26);
  const auto eval_a = forward(model, batch);
  const auto eval_b = forward(model, batch);
  EXPECT_EQ(eval_a.logits, eval_b.logits);
  ForwardOptions train{true, 7};
  const auto t1 = forward(model, batch, train);
  const auto t2 = forward(model, batch, train);
  EXPECT_EQ(t1.logits, t2.logits);
  EXPECT_NE(t1.logits, eval_a.logits);
  EXPECT_NE(forward(model, batch, ForwardOptions{true, 8}).logits, t1.logits);
}

}  // namespace
}  // namespace moelab
