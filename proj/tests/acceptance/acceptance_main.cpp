// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "gradcheck.hpp"
#include "moelab/cli.hpp"
#include "moelab/data.hpp"
#include "moelab/error.hpp"
#include "moelab/gating.hpp"
#include "moelab/routing.hpp"
#include "moelab/telemetry.hpp"
#include "moelab/train.hpp"
#include "test_util.hpp"

namespace moelab {
namespace {

namespace fs = std::filesystem;
using testing::random_batch;
using testing::tiny_config;

// Tolerances.
constexpr double kCountTolerance = 1e6;
constexpr double kClosedFormTolerance = 1e-4;
constexpr double kSimplexTolerance = 1e-6;
constexpr double kGradTolerance = 1e-4;
constexpr double kProfileTolerance = 0.05;
constexpr double kResumeTolerance = 1e-6;
constexpr double kBalancePerplexitySlack = 0.15;
constexpr double kOrderingSlack = 0.03;
constexpr std::size_t kCollapseWindow = 100;

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void info(const std::string& what) { notes.push_back("     " + what); }
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. parameter counts

Verdict criterion_param_counts(const fs::path& work) {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path cfg = work / "paper.txt";
  testing::write_file(cfg, "preset = paper\n");
  struct Row {
    const char* name;
    std::vector<std::string> sets;
    double total, active;
  };
  const std::vector<Row> rows{
      {"MoE N=4 K=2", {"n_experts=4", "top_k=2"}, 295e6, 182e6},
      {"MoE N=4 K=1", {"n_experts=4", "top_k=1"}, 295e6, 124e6},
      {"dense 1x", {"moe=false", "ffn_width_multiplier=1"}, 124e6, 124e6},
      {"dense 2x", {"moe=false", "ffn_width_multiplier=2"}, 182e6, 182e6},
      {"dense 4x", {"moe=false", "ffn_width_multiplier=4"}, 295e6, 295e6},
  };
  for (const auto& row : rows) {
    std::vector<std::string> args{"count-params", "--config", cfg.string()};
    for (const auto& s : row.sets) {
      args.push_back("--set");
      args.push_back(s);
    }
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    long long total = -1, active = -1;
    std::istringstream in(out.str());
    std::string word;
    while (in >> word) {
      if (word == "total") in >> total;
      if (word == "active") in >> active;
    }
    v.check(code == 0 && std::abs(total - row.total) <= kCountTolerance &&
                std::abs(active - row.active) <= kCountTolerance,
            std::string(row.name) + ": total " + std::to_string(total) + " active " + std::to_string(active) +
                " (target " + fmt("%.0fM", row.total / 1e6) + "/" + fmt("%.0fM", row.active / 1e6) + ")");
  }
  const double secs = seconds_since(t0);
  v.check(secs < 1.0, "runtime " + fmt("%.3f s", secs));
  return v;
}

// ---------------------------------------------------------------------------
// 2. gating math

Verdict criterion_gating(const fs::path&) {
  Verdict v;
  using Vec = std::vector<double>;
  auto near = [](const std::vector<double>& got, const Vec& want, double tol) {
    if (got.size() != want.size()) return false;
    for (std::size_t i = 0; i < got.size(); ++i) {
      if (std::abs(got[i] - want[i]) > tol) return false;
    }
    return true;
  };
  const auto s = softmax<double>(Vec{1, 0});
  v.check(near(s, {0.7311, 0.2689}, kClosedFormTolerance), "softmax(1,0) = (0.7311, 0.2689)");
  v.check(near(softmax<double>(Vec{0, 0, 0, 0}), {0.25, 0.25, 0.25, 0.25}, 1e-15), "softmax of equal logits");

  const auto t1 = gate_top1<double>(Vec{1, 0});
  v.check(t1.selected == std::vector<int>{0} && near(t1.combine_weights, {0.7311}, kClosedFormTolerance),
          "top1(1,0) selects 0 with weight 0.7311");
  const auto tie = gate_top1<double>(Vec{0, 0, 0, 0});
  v.check(tie.selected == std::vector<int>{0} && near(tie.combine_weights, {0.25}, 1e-15),
          "top1 uniform tie picks expert 0 with weight 0.25");

  const auto tk = gate_topk_token<double>(Vec{2, 1, 0, 0}, 2);
  v.check(tk.selected == std::vector<int>{0, 1} && near(tk.combine_weights, {0.7311, 0.2689}, kClosedFormTolerance),
          "token top2(2,1,0,0) = {0,1} (0.7311, 0.2689)");
  v.check(near(gate_topk_token<double>(Vec{0, 0}, 2).combine_weights, {0.5, 0.5}, 1e-15), "token K=N=2 uniform");

  const auto sk = gate_topk_sequence<double>(Vec{2, 1, 0, 0}, 2);
  v.check(sk.selected == std::vector<int>{0, 1} &&
              near(sk.probabilities, {0.6103, 0.2245, 0.0826, 0.0826}, kClosedFormTolerance) &&
              near(sk.combine_weights, {0.5953, 0.4047}, kClosedFormTolerance),
          "sequence top2(2,1,0,0) p=(0.6103,0.2245,0.0826,0.0826) w=(0.5953,0.4047)");
  // Independent two-pass evaluation of the double softmax.
  {
    const long double e2 = std::exp(2.0L), e1 = std::exp(1.0L);
    const long double z = e2 + e1 + 2;
    const long double p0 = e2 / z, p1 = e1 / z;
    const long double w0 = std::exp(p0) / (std::exp(p0) + std::exp(p1));
    v.check(std::abs(sk.combine_weights[0] - static_cast<double>(w0)) < 1e-12, "double softmax matches oracle");
  }
  v.check(near(gate_topk_sequence<double>(Vec{0.3, 0.3}, 2).combine_weights, {0.5, 0.5}, 1e-15),
          "sequence K=N=2 uniform");

  std::mt19937_64 rng(2024);
  std::normal_distribution<double> nd(0.0, 3.0);
  int bad_norm = 0, bad_order = 0, bad_tie = 0, bad_shift = 0;
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    const int n = 1 + static_cast<int>(rng() % 8);
    const int k = 1 + static_cast<int>(rng() % n);
    Vec h(n);
    for (auto& x : h) x = nd(rng);
    if (t % 7 == 0 && n > 1) h[rng() % n] = h[0];  // force ties now and then
    const double c = nd(rng) * 10;
    Vec shifted = h;
    for (auto& x : shifted) x += c;
    const auto p = softmax<double>(h);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return p[a] > p[b]; });
    const std::vector<int> want(order.begin(), order.begin() + k);
    const auto top1 = gate_top1<double>(h);
    const auto token = gate_topk_token<double>(h, k);
    const auto seq = gate_topk_sequence<double>(h, k);
    for (const auto* g : {&top1, &token, &seq}) {
      const double sp = std::accumulate(g->probabilities.begin(), g->probabilities.end(), 0.0);
      const double sw = std::accumulate(g->combine_weights.begin(), g->combine_weights.end(), 0.0);
      if (std::abs(sp - 1) > kSimplexTolerance) ++bad_norm;
      for (const double w : g->combine_weights) {
        if (!(w > 0)) ++bad_norm;
      }
      const bool max_weight = g == &top1 || (g == &seq && k == 1);
      if (!max_weight && std::abs(sw - 1) > kSimplexTolerance) ++bad_norm;
    }
    if (token.selected != want || seq.selected != want || top1.selected != std::vector<int>{want[0]}) ++bad_order;
    if (gate_topk_token<double>(h, k).selected != token.selected) ++bad_tie;
    if (gate_top1<double>(shifted).selected != top1.selected) ++bad_shift;
  }
  v.check(bad_norm == 0, "normalization and positivity over 10^4 vectors (" + std::to_string(bad_norm) + " violations)");
  v.check(bad_order == 0, "top-K order with lowest-index ties (" + std::to_string(bad_order) + " violations)");
  v.check(bad_tie == 0, "deterministic repeat (" + std::to_string(bad_tie) + " violations)");
  v.check(bad_shift == 0, "argmax shift invariance (" + std::to_string(bad_shift) + " violations)");
  return v;
}

// ---------------------------------------------------------------------------
// 3. gradients

Verdict criterion_gradients(const fs::path&) {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto unit : {RoutingUnit::token, RoutingUnit::sequence}) {
    for (const int k : {1, 2}) {
      for (const auto scope : {RoutingScope::layer_wise, RoutingScope::global}) {
        const auto config = tiny_config(3, k, unit, scope);
        const auto g = testing::gradient_check(config, 25, 10, 17 + k);
        v.check(g.checked >= 25 && g.router_checked >= 5 && g.worst < kGradTolerance,
                std::string(to_string(unit)) + " K=" + std::to_string(k) + " " + std::string(to_string(scope)) +
                    ": " + std::to_string(g.checked) + " scalars (" + std::to_string(g.router_checked) +
                    " router), worst rel " + fmt("%.2e", g.worst) + " at " + g.worst_name);
      }
    }
  }
  const double secs = seconds_since(t0);
  v.check(secs < 120, "runtime " + fmt("%.1f s", secs));
  return v;
}

// ---------------------------------------------------------------------------
// 4. routing strategies

Verdict criterion_strategies(const fs::path&) {
  Verdict v;
  const BatchSource source = [](std::mt19937_64& rng) { return random_batch(3, 6, 11, rng()); };

  bool global_ok = true;
  for (const auto unit : {RoutingUnit::token, RoutingUnit::sequence}) {
    auto config = tiny_config(4, 2, unit, RoutingScope::global);
    config.model.n_layers = 4;
    config.validate();
    const auto model = build_model<double>(config, 3);
    for (int trial = 0; trial < 20; ++trial) {
      const auto r = forward(model, random_batch(4, 6, 11, 100 + trial));
      for (const auto& d : r.decisions) {
        global_ok = global_ok && d.selected == r.decisions[0].selected &&
                    d.combine_weights == r.decisions[0].combine_weights;
      }
    }
  }
  v.check(global_ok, "global scope: identical decisions in every layer");

  {
    auto config = tiny_config(4, 2);
    config.routing->strategy = RoutingStrategy::frozen;
    config.train.iterations = 500;
    config.validate();
    auto run = TrainRun<double>::create(config);
    const auto routers0 = run.model.params.routers;
    const auto wte0 = run.model.params.wte;
    for (int i = 0; i < 500; ++i) train_step(run, source);
    v.check(run.model.params.routers == routers0 && !(run.model.params.wte == wte0),
            "frozen: routers bitwise constant over 500 iterations, embeddings moved");
  }

  for (const int k : {1, 2}) {
    const int n = 4;
    const auto config = tiny_config(n, k);
    const int draws = 10000;
    std::vector<double> counts(n, 0.0);
    std::mt19937_64 rng(99);
    std::normal_distribution<double> nd(0.0, 1.0);
    Matrix<double> x(1, 16);
    for (int i = 0; i < draws; ++i) {
      for (auto& e : x.data) e = nd(rng);
      const std::vector<RouterNetwork<double>> routers{
          apply_strategy_random<double>(config.model, *config.routing, 5, i, 0)};
      const auto d = route<double>(x, 1, 1, 0, *config.routing, routers, {}, nullptr);
      for (const int e : d.selected) counts[e] += 1;
    }
    const double tol = 5 * std::sqrt(double(n) / draws);
    double worst = 0;
    for (int e = 0; e < n; ++e) worst = std::max(worst, std::abs(counts[e] / (draws * k) - 1.0 / n));
    v.check(worst <= tol, "random K=" + std::to_string(k) + ": max |freq - 1/N| " + fmt("%.4f", worst) +
                              " (tolerance " + fmt("%.3f", tol) + ")");
  }

  {
    auto config = tiny_config(4, 1, RoutingUnit::sequence, RoutingScope::global);
    config.routing->strategy = RoutingStrategy::language;
    config.routing->language_map = LanguageMap::parse("en:0,de:1,fr:2,it:3");
    config.validate();
    const auto model = build_model<double>(config, 7);
    const std::vector<std::string> langs{"en", "de", "fr", "it"};
    std::vector<std::vector<int>> confusion(4, std::vector<int>(4, 0));
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 100; ++trial) {
      auto batch = random_batch(4, 6, 11, 500 + trial);
      for (int b = 0; b < 4; ++b) batch.labels.push_back(langs[rng() % 4]);
      for (const auto& d : forward(model, batch).decisions) {
        for (int b = 0; b < 4; ++b) {
          const auto lang = std::find(langs.begin(), langs.end(), batch.labels[b]) - langs.begin();
          ++confusion[lang][d.selected[b]];
        }
      }
    }
    bool diagonal = true;
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) diagonal = diagonal && ((i == j) == (confusion[i][j] > 0));
    }
    v.check(diagonal, "language: confusion matrix exactly diagonal");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Shared desk-scale runs for criteria 5, 6 and 7.

struct DeskRun {
  std::string name;
  double window_perplexity = 0;
  double final_perplexity = 0;
  double loss_early = 0;  // mean train loss over iterations 90..109
  double loss_late = 0;   // mean train loss over the last 20 iterations
  std::vector<CollapseMetric> final_window;
  std::optional<ModelState<float>> model;
};

class DeskRuns {
 public:
  explicit DeskRuns(fs::path work) : work_(std::move(work)) {}

  const PreparedShards& shards() {
    if (!shards_) {
      ToyCorpusOptions opts;
      auto docs = generate_toy_corpus(opts);
      shards_ = split_documents(std::move(docs), 0.9, 256);
      std::cout << "  toy corpus: " << shards_->train.tokens.size() << " train tokens, "
                << shards_->val.tokens.size() << " val tokens\n"
                << std::flush;
    }
    return *shards_;
  }

  const fs::path& corpus_dir() {
    if (!fs::exists(work_ / "toy" / "en")) write_toy_corpus(work_ / "toy", ToyCorpusOptions{});
    return toy_dir_ = work_ / "toy";
  }

  const DeskRun& get(const std::string& name, RoutingUnit unit, RoutingScope scope, double lambda) {
    if (auto it = runs_.find(name); it != runs_.end()) return it->second;
    auto config = desk_preset();
    config.routing->unit = unit;
    config.routing->scope = scope;
    config.routing->lambda_balance = lambda;
    config.validate();
    const auto& data = shards();
    auto run = TrainRun<float>::create(config);
    std::vector<ActivationRecord> records;
    std::vector<double> losses;
    TrainOptions options;
    const auto t0 = std::chrono::steady_clock::now();
    options.on_step = [&](const StepResult& s) {
      losses.push_back(s.lm_loss);
      records.insert(records.end(), s.activations.begin(), s.activations.end());
    };
    options.on_eval = [&](const EvalResult& e) {
      if (e.iteration % 500 == 0) {
        std::cout << "  " << name << " iter " << e.iteration << " val_ppl " << fmt("%.3f", e.perplexity) << " ("
                  << fmt("%.0f s", seconds_since(t0)) << ")\n"
                  << std::flush;
      }
    };
    train(run, data.train, data.val, options);
    DeskRun out;
    out.name = name;
    out.window_perplexity = headline_perplexity(run.evals, run.iteration, config.train.eval_window);
    out.final_perplexity = run.evals.back().perplexity;
    out.loss_early = std::accumulate(losses.begin() + 90, losses.begin() + 110, 0.0) / 20;
    out.loss_late = std::accumulate(losses.end() - 20, losses.end(), 0.0) / 20;
    out.final_window = final_window_metrics(records, kCollapseWindow);
    out.model = std::move(run.model);
    std::cout << "  " << name << " done: window_ppl " << fmt("%.3f", out.window_perplexity) << " in "
              << fmt("%.0f s", seconds_since(t0)) << "\n"
              << std::flush;
    return runs_.emplace(name, std::move(out)).first->second;
  }

  const DeskRun& sequence_balanced() {
    return get("sequence/layer_wise/lambda=0.01", RoutingUnit::sequence, RoutingScope::layer_wise, 0.01);
  }

 private:
  fs::path work_;
  fs::path toy_dir_;
  std::optional<PreparedShards> shards_;
  std::map<std::string, DeskRun> runs_;
};

DeskRuns* g_runs = nullptr;

std::string entropies(const DeskRun& r) {
  std::string s;
  for (const auto& m : r.final_window) s += (s.empty() ? "" : " ") + fmt("%.4f", m.entropy);
  return s;
}

// ---------------------------------------------------------------------------
// 5. load balancing

Verdict criterion_balance(const fs::path&) {
  Verdict v;
  const auto& on = g_runs->sequence_balanced();
  const auto& off = g_runs->get("sequence/layer_wise/lambda=0", RoutingUnit::sequence, RoutingScope::layer_wise, 0.0);
  int higher = 0;
  for (std::size_t l = 0; l < on.final_window.size(); ++l) {
    if (on.final_window[l].entropy > off.final_window[l].entropy) ++higher;
  }
  const auto layers = static_cast<int>(on.final_window.size());
  v.info("final-window entropy lambda=0.01: " + entropies(on));
  v.info("final-window entropy lambda=0:    " + entropies(off));
  v.check(2 * higher > layers, "entropy higher with balancing in " + std::to_string(higher) + " of " +
                                   std::to_string(layers) + " layers");
  const double rel = on.window_perplexity / off.window_perplexity - 1;
  v.info("validation perplexity lambda=0.01 " + fmt("%.4f", on.window_perplexity) + ", lambda=0 " +
         fmt("%.4f", off.window_perplexity) + " (relative " + fmt("%+.2f%%", 100 * rel) +
         (std::abs(rel) < 0.05 ? ", within 5%)" : ", outside 5%)"));
  v.check(rel <= kBalancePerplexitySlack, "balanced run no more than 15% worse");
  for (const auto* r : {&on, &off}) {
    v.check(r->loss_late < r->loss_early, r->name + ": train loss " + fmt("%.4f", r->loss_early) + " at 100 -> " +
                                              fmt("%.4f", r->loss_late) + " at 2000");
  }
  return v;
}

// ---------------------------------------------------------------------------
// 6. directional ablation

Verdict criterion_ablation(const fs::path&) {
  Verdict v;
  const auto& token = g_runs->get("token/layer_wise/lambda=0.01", RoutingUnit::token, RoutingScope::layer_wise, 0.01);
  const auto& seq = g_runs->sequence_balanced();
  const auto& global = g_runs->get("sequence/global/lambda=0.01", RoutingUnit::sequence, RoutingScope::global, 0.01);
  for (const auto* r : {&token, &seq, &global}) {
    v.info(r->name + ": window ppl " + fmt("%.4f", r->window_perplexity) + ", final ppl " +
           fmt("%.4f", r->final_perplexity));
  }
  auto ordered = [&](const DeskRun& better, const DeskRun& worse) {
    const double inversion = better.window_perplexity / worse.window_perplexity - 1;
    v.check(inversion <= kOrderingSlack, better.name + " <= " + worse.name + " (" +
                                             (inversion <= 0 ? std::string("holds") : "inverted by " + fmt("%.2f%%", 100 * inversion)) +
                                             ")");
  };
  ordered(token, seq);
  ordered(seq, global);
  for (const auto* r : {&token, &global}) {
    v.check(r->loss_late < r->loss_early, r->name + ": train loss " + fmt("%.4f", r->loss_early) + " at 100 -> " +
                                              fmt("%.4f", r->loss_late) + " at 2000");
  }
  return v;
}

// ---------------------------------------------------------------------------
// 7. assignment profiles

double worst_cell(const AssignmentProfile& a, const AssignmentProfile& b) {
  double w = 0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    for (std::size_t e = 0; e < a.layers[l].size(); ++e) w = std::max(w, std::abs(a.layers[l][e] - b.layers[l][e]));
  }
  return w;
}

Verdict criterion_profiles(const fs::path&) {
  Verdict v;
  const auto set = EvalCategorySet::load(g_runs->corpus_dir(), 64);

  {
    auto config = desk_preset();
    config.routing->strategy = RoutingStrategy::random;
    config.validate();
    const auto model = build_model<float>(config, 11);
    double worst = 0;
    for (const auto& p : assignment_profile(model, set)) {
      for (const auto& row : p.layers) {
        for (const double m : row) worst = std::max(worst, std::abs(m - 0.25));
      }
    }
    v.check(worst <= kProfileTolerance, "random: max |mass - 1/4| " + fmt("%.4f", worst));
  }

  {
    auto config = desk_preset();
    config.routing->strategy = RoutingStrategy::language;
    config.routing->top_k = 1;
    config.routing->scope = RoutingScope::global;
    config.routing->language_map = LanguageMap::parse("en:0,de:1,fr:2,it:3");
    config.validate();
    const auto model = build_model<float>(config, 12);
    const auto profiles = assignment_profile(model, set);
    bool diagonal = true;
    for (const auto& p : profiles) {
      const int expert = config.routing->language_map.find(p.category).value_or(-1);
      for (const auto& row : p.layers) {
        for (std::size_t e = 0; e < row.size(); ++e) diagonal = diagonal && row[e] == (int(e) == expert ? 1.0 : 0.0);
      }
    }
    v.check(diagonal, "language: every profile exactly one-hot on its mapped expert");
  }

  {
    const auto& trained = g_runs->sequence_balanced();
    EvalCategorySet first = set, second = set;
    for (std::size_t c = 0; c < set.categories.size(); ++c) {
      const auto& seqs = set.categories[c].sequences;
      const auto half = seqs.size() / 2;
      first.categories[c].sequences.assign(seqs.begin(), seqs.begin() + static_cast<std::ptrdiff_t>(half));
      second.categories[c].sequences.assign(seqs.begin() + static_cast<std::ptrdiff_t>(half), seqs.end());
    }
    const auto a = assignment_profile(*trained.model, first);
    const auto b = assignment_profile(*trained.model, second);
    double worst = 0;
    for (std::size_t c = 0; c < a.size(); ++c) {
      worst = std::max(worst, worst_cell(a[c], b[c]));
      v.info(a[c].category + " distance from uniform " + fmt("%.4f", a[c].distance_from_uniform()));
    }
    v.check(worst <= kProfileTolerance, "learned split-half: max cell difference " + fmt("%.4f", worst));
  }
  return v;
}

// ---------------------------------------------------------------------------
// 8. infrastructure round trips

Verdict criterion_infrastructure(const fs::path& work) {
  Verdict v;
  {
    std::vector<ExperimentConfig> configs{paper_preset(), desk_preset(), tiny_config(3, 1, RoutingUnit::sequence)};
    auto lang = tiny_config(4, 1, RoutingUnit::sequence, RoutingScope::global);
    lang.routing->strategy = RoutingStrategy::language;
    lang.routing->language_map = LanguageMap::parse("en:0,de:1,fr:2,it:3");
    lang.data.train_data = "/data/x y/train.bin";
    lang.train.learning_rate = 0.1 + 0.2;
    configs.push_back(lang);
    auto dense = desk_preset();
    dense.routing.reset();
    dense.model.ffn_width_multiplier = 4;
    configs.push_back(dense);
    bool ok = true;
    for (const auto& c : configs) ok = ok && parse_config(serialize_config(c)) == c;
    v.check(ok, "config parse(serialize(c)) == c for " + std::to_string(configs.size()) + " configs");
  }
  {
    PrepareOptions opts;
    opts.labels = true;
    ToyCorpusOptions toy;
    toy.total_bytes = 40000;
    write_toy_corpus(work / "small", toy);
    const auto shards = prepare(work / "small", opts);
    shards.train.write(work / "train.bin");
    const auto back = TokenShard::read(work / "train.bin");
    back.write(work / "train2.bin");
    v.check(back == shards.train && testing::read_file(work / "train.bin") == testing::read_file(work / "train2.bin"),
            "token shard write/read bit-exact");
  }
  {
    auto config = tiny_config(3, 2, RoutingUnit::sequence);
    config.model.dropout = 0.1;
    config.validate();
    TokenShard shard;
    shard.vocab_size = 11;
    std::mt19937_64 rng(5);
    for (int i = 0; i < 2000; ++i) shard.tokens.push_back(static_cast<std::int32_t>(rng() % 11));
    shard.documents = {{0, 2000, kNoLabel}};
    const auto source = shard_source(shard, config);
    auto straight = TrainRun<double>::create(config);
    for (int i = 0; i < 5; ++i) train_step(straight, source);
    const auto bytes = checkpoint_bytes(straight);
    auto resumed = checkpoint_from_bytes<double>(bytes);
    v.check(checkpoint_bytes(resumed) == bytes && resumed.model.params == straight.model.params,
            "checkpoint bytes round trip bit-exact");
    double worst = 0;
    for (int i = 0; i < 10; ++i) {
      const double a = train_step(straight, source).lm_loss;
      const double b = train_step(resumed, source).lm_loss;
      worst = std::max(worst, std::abs(a - b));
    }
    v.check(worst <= kResumeTolerance, "resume continuation: max loss difference " + fmt("%.3g", worst) +
                                           " over 10 steps");
  }
  {
    std::vector<ActivationRecord> recs;
    std::mt19937_64 rng(3);
    for (int it = 0; it < 50; ++it) {
      for (int l = 0; l < 6; ++l) {
        ActivationRecord r{it, l, {}};
        for (int e = 0; e < 4; ++e) r.counts.push_back(static_cast<std::int64_t>(rng() % 100));
        recs.push_back(r);
      }
    }
    std::stringstream csv;
    write_activations_csv(csv, recs);
    const bool acts = read_activations_csv(csv) == recs;
    const auto metrics = collapse_metrics(recs, 10);
    std::stringstream mcsv;
    write_collapse_csv(mcsv, metrics);
    v.check(acts && read_collapse_csv(mcsv) == metrics, "telemetry CSV round trips");
    std::vector<Heatmap> maps;
    for (int l = 0; l < 6; ++l) maps.push_back(activation_heatmap(recs, l));
    v.check(render_heatmaps(maps) == render_heatmaps(maps), "SVG output deterministic");
  }
  return v;
}

// ---------------------------------------------------------------------------
// 9. degenerate equivalence

Verdict criterion_degenerate(const fs::path&) {
  Verdict v;
  for (const auto unit : {RoutingUnit::token, RoutingUnit::sequence}) {
    const auto config = tiny_config(1, 1, unit);
    auto moe = build_model<double>(config, 8);
    testing::jitter_vectors(moe, 9, 0.2);
    auto dense_config = config;
    dense_config.routing.reset();
    auto dense = build_model<double>(dense_config, 0);
    dense.params.wte = moe.params.wte;
    dense.params.wpe = moe.params.wpe;
    dense.params.lnf_g = moe.params.lnf_g;
    dense.params.lnf_b = moe.params.lnf_b;
    dense.params.blocks = moe.params.blocks;
    const auto batch = random_batch(4, 6, 11, 10);
    const auto a = forward(moe, batch);
    const auto b = forward(dense, batch);
    v.check(a.logits == b.logits && a.lm_loss == b.lm_loss,
            std::string("N=1 K=1 ") + std::string(to_string(unit)) + " routing equals dense bit-for-bit");
  }
  std::mt19937_64 rng(31);
  std::normal_distribution<double> nd(0.0, 2.0);
  int mismatches = 0;
  for (int t = 0; t < 10000; ++t) {
    std::vector<double> h(1 + rng() % 8);
    for (auto& x : h) x = nd(rng);
    const auto s = gate_topk_sequence<double>(h, 1);
    const auto g = gate_top1<double>(h);
    if (s.selected != g.selected || s.combine_weights != g.combine_weights || s.probabilities != g.probabilities) {
      ++mismatches;
    }
  }
  v.check(mismatches == 0, "sequence K=1 equals top1 on 10^4 vectors");
  return v;
}

}  // namespace
}  // namespace moelab

int main(int argc, char** argv) {
  using namespace moelab;
  CLI::App app{"moelab acceptance checks"};
  std::vector<int> only;
  std::string workdir;
  app.add_option("--only", only, "Run only these criteria (1-9)")->check(CLI::Range(1, 9));
  app.add_option("--workdir", workdir, "Scratch directory (default: under the system temp dir)");
  CLI11_PARSE(app, argc, argv);

  const fs::path work = workdir.empty() ? fs::temp_directory_path() / "moelab_acceptance" : fs::path(workdir);
  fs::create_directories(work);
  DeskRuns runs(work);
  g_runs = &runs;

  const std::vector<std::pair<const char*, std::function<Verdict(const fs::path&)>>> criteria{
      {"parameter counts", criterion_param_counts},
      {"gating math", criterion_gating},
      {"gradient correctness", criterion_gradients},
      {"routing strategy contracts", criterion_strategies},
      {"load balancing", criterion_balance},
      {"directional ablation", criterion_ablation},
      {"assignment profiles", criterion_profiles},
      {"infrastructure round trips", criterion_infrastructure},
      {"degenerate equivalence", criterion_degenerate},
  };

  std::vector<std::string> summary;
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    std::cout << "criterion " << id << ": " << criteria[i].first << "\n" << std::flush;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict verdict;
    try {
      verdict = criteria[i].second(work);
    } catch (const std::exception& e) {
      verdict.check(false, std::string("exception: ") + e.what());
    }
    for (const auto& note : verdict.notes) std::cout << "  " << note << "\n";
    char line[160];
    std::snprintf(line, sizeof(line), "%s criterion %d: %s (%.1f s)", verdict.pass ? "PASS" : "FAIL", id,
                  criteria[i].first, seconds_since(t0));
    std::cout << line << "\n\n" << std::flush;
    summary.push_back(line);
    all = all && verdict.pass;
  }
  std::cout << "summary\n";
  for (const auto& s : summary) std::cout << "  " << s << "\n";
  return all ? 0 : 1;
}
