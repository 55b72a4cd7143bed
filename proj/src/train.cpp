// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "moelab/error.hpp"
#include "moelab/routing.hpp"

namespace moelab {

namespace {

constexpr std::uint64_t kEvalSeed = 0x5eed0e7a1ULL;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

bool within_documents(const ExperimentConfig& config) {
  return config.routing && config.routing->strategy == RoutingStrategy::language;
}

std::size_t window_length(const ExperimentConfig& config) {
  return static_cast<std::size_t>(std::min(config.train.sequence_length, config.model.context_length));
}

}  // namespace

double learning_rate_at(const TrainConfig& train, std::int64_t iteration) {
  const double lr = train.learning_rate;
  const double lo = train.min_learning_rate;
  const std::int64_t warmup = train.warmup_iterations;
  const std::int64_t total = train.iterations;
  if (iteration < warmup) return lr * static_cast<double>(iteration + 1) / static_cast<double>(warmup);
  if (iteration >= total) return lo;
  const double progress = static_cast<double>(iteration - warmup) / static_cast<double>(std::max<std::int64_t>(1, total - warmup));
  return lo + 0.5 * (lr - lo) * (1.0 + std::cos(std::numbers::pi * progress));
}

bool updates_role(ParamRole role, const ExperimentConfig& config) {
  if (role != ParamRole::router) return true;
  return config.routing && router_trainable(config.routing->strategy);
}

template <typename T>
double clip_grad_norm(ModelParams<T>& grads, const ExperimentConfig& config, double max_norm) {
  double sq = 0;
  grads.for_each([&](const std::string&, const Matrix<T>& g, ParamRole role) {
    if (!updates_role(role, config)) return;
    for (const T v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
  });
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-6));
    grads.for_each([&](const std::string&, Matrix<T>& g, ParamRole role) {
      if (!updates_role(role, config)) return;
      for (T& v : g.data) v *= scale;
    });
  }
  return norm;
}

template <typename T>
void adamw_update(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state,
                  const ExperimentConfig& config, double learning_rate) {
  const auto& tc = config.train;
  if (state.m.wte.empty()) {
    state.m = params.zeros_like();
    state.v = params.zeros_like();
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(state.step));

  std::vector<Matrix<T>*> ps, ms, vs;
  std::vector<const Matrix<T>*> gs;
  std::vector<ParamRole> roles;
  params.for_each([&](const std::string&, Matrix<T>& p, ParamRole role) {
    ps.push_back(&p);
    roles.push_back(role);
  });
  grads.for_each([&](const std::string&, const Matrix<T>& g, ParamRole) { gs.push_back(&g); });
  state.m.for_each([&](const std::string&, Matrix<T>& m, ParamRole) { ms.push_back(&m); });
  state.v.for_each([&](const std::string&, Matrix<T>& v, ParamRole) { vs.push_back(&v); });
  if (gs.size() != ps.size() || ms.size() != ps.size() || vs.size() != ps.size()) {
    throw NumericError("optimizer state does not match the model parameters");
  }

  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!updates_role(roles[i], config)) continue;
    const bool decay = roles[i] != ParamRole::vector && tc.weight_decay != 0;
    auto& p = ps[i]->data;
    const auto& g = gs[i]->data;
    auto& m = ms[i]->data;
    auto& v = vs[i]->data;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = tc.beta1 * static_cast<double>(m[j]) + (1.0 - tc.beta1) * gj;
      const double vj = tc.beta2 * static_cast<double>(v[j]) + (1.0 - tc.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double pj = p[j];
      if (decay) pj -= learning_rate * tc.weight_decay * pj;
      pj -= learning_rate * (mj / bc1) / (std::sqrt(vj / bc2) + tc.adam_epsilon);
      p[j] = static_cast<T>(pj);
    }
  }
}

template <typename T>
TrainRun<T> TrainRun<T>::create(const ExperimentConfig& config) {
  config.validate();
  TrainRun run;
  run.config = config;
  const auto seed = static_cast<std::uint64_t>(config.train.seed);
  run.model = build_model<T>(config, seed);
  run.optimizer.m = run.model.params.zeros_like();
  run.optimizer.v = run.model.params.zeros_like();
  run.rng.seed(mix(seed, 0xda7a));
  return run;
}

BatchSource shard_source(const TokenShard& shard, const ExperimentConfig& config) {
  const auto batch = static_cast<std::size_t>(config.train.batch_size);
  const auto seq = window_length(config);
  const bool docs = within_documents(config);
  return [&shard, batch, seq, docs](std::mt19937_64& rng) { return sample_batch(shard, batch, seq, docs, rng); };
}

template <typename T>
StepResult train_step(TrainRun<T>& run, const BatchSource& source) {
  const auto& cfg = run.config;
  const auto saved_rng = run.rng;
  if (cfg.routing && cfg.routing->strategy == RoutingStrategy::random) {
    for (std::size_t r = 0; r < run.model.params.routers.size(); ++r) {
      run.model.params.routers[r] =
          apply_strategy_random<T>(cfg.model, *cfg.routing, cfg.train.seed, run.iteration, static_cast<int>(r));
    }
  }

  StepResult out;
  out.iteration = run.iteration;
  const int steps = cfg.train.grad_accumulation_steps;
  auto grads = run.model.params.zeros_like();
  try {
    for (int micro = 0; micro < steps; ++micro) {
      const Batch batch = source(run.rng);
      ForwardOptions options;
      options.training = true;
      options.dropout_seed = mix(mix(static_cast<std::uint64_t>(cfg.train.seed), static_cast<std::uint64_t>(run.iteration)),
                                 static_cast<std::uint64_t>(micro));
      ForwardCache<T> cache;
      const auto result = forward(run.model, batch, options, &cache);
      if (!std::isfinite(static_cast<double>(result.lm_loss)) || !std::isfinite(static_cast<double>(result.balance_loss))) {
        throw NumericError("loss is not finite at iteration " + std::to_string(run.iteration));
      }
      backward(run.model, cache, grads, static_cast<T>(1.0 / steps));
      out.lm_loss += static_cast<double>(result.lm_loss) / steps;
      out.balance_loss += static_cast<double>(result.balance_loss) / steps;
      merge_activations(out.activations, record_activations(result.decisions, run.iteration));
    }
  } catch (...) {
    run.rng = saved_rng;
    throw;
  }

  out.grad_norm = clip_grad_norm(grads, cfg, cfg.train.grad_clip);
  out.learning_rate = learning_rate_at(cfg.train, run.iteration);
  adamw_update(run.model.params, grads, run.optimizer, cfg, out.learning_rate);
  ++run.iteration;
  return out;
}

template <typename T>
EvalResult evaluate(const ModelState<T>& model, const TokenShard& val, int eval_batches, std::int64_t iteration) {
  if (val.tokens.empty()) throw DataError("validation shard is empty");
  if (eval_batches < 1) throw DataError("eval_batches must be positive");
  std::mt19937_64 rng(kEvalSeed);
  const auto batch = static_cast<std::size_t>(model.config.train.batch_size);
  const auto seq = window_length(model.config);
  double total = 0;
  for (int i = 0; i < eval_batches; ++i) {
    const Batch b = sample_batch(val, batch, seq, within_documents(model.config), rng);
    const auto result = forward(model, b);
    total += static_cast<double>(result.lm_loss);
  }
  EvalResult r;
  r.iteration = iteration;
  r.cross_entropy = total / eval_batches;
  r.perplexity = std::exp(r.cross_entropy);
  if (!std::isfinite(r.perplexity)) throw NumericError("validation perplexity is not finite");
  return r;
}

double headline_perplexity(const std::vector<EvalResult>& evals, std::int64_t final_iteration, int window) {
  double sum = 0;
  int n = 0;
  for (const auto& e : evals) {
    if (e.iteration > final_iteration - window) {
      sum += e.perplexity;
      ++n;
    }
  }
  if (n == 0) {
    if (evals.empty()) throw DataError("no evaluations recorded");
    return evals.back().perplexity;
  }
  return sum / n;
}

template <typename T>
void train(TrainRun<T>& run, const TokenShard& train_shard, const TokenShard& val_shard, const TrainOptions& options) {
  const auto source = shard_source(train_shard, run.config);
  const auto total = static_cast<std::int64_t>(run.config.train.iterations);
  const auto interval = static_cast<std::int64_t>(std::max(1, run.config.train.eval_interval));
  if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);
  while (run.iteration < total) {
    StepResult step;
    try {
      step = train_step(run, source);
    } catch (const NumericError&) {
      if (options.checkpoint_dir) save_checkpoint(*options.checkpoint_dir / "diagnostic.ckpt", run);
      throw;
    }
    if (run.sink != nullptr) {
      run.sink->activations(step.activations);
      run.sink->step(step.iteration, step.lm_loss, step.balance_loss, step.learning_rate, step.grad_norm);
    }
    if (options.on_step) options.on_step(step);
    if (run.iteration % interval == 0 || run.iteration == total) {
      const auto result = evaluate(run.model, val_shard, run.config.train.eval_batches, run.iteration);
      run.evals.push_back(result);
      if (run.sink != nullptr) run.sink->eval(result.iteration, result.cross_entropy, result.perplexity);
      if (options.on_eval) options.on_eval(result);
    }
  }
  if (options.checkpoint_dir) save_checkpoint(*options.checkpoint_dir / "final.ckpt", run);
}

#define MOELAB_INSTANTIATE_TRAIN(T)                                                                          \
  template double clip_grad_norm<T>(ModelParams<T>&, const ExperimentConfig&, double);                       \
  template void adamw_update<T>(ModelParams<T>&, const ModelParams<T>&, AdamState<T>&,                       \
                                const ExperimentConfig&, double);                                            \
  template struct TrainRun<T>;                                                                               \
  template StepResult train_step<T>(TrainRun<T>&, const BatchSource&);                                       \
  template EvalResult evaluate<T>(const ModelState<T>&, const TokenShard&, int, std::int64_t);               \
  template void train<T>(TrainRun<T>&, const TokenShard&, const TokenShard&, const TrainOptions&);

MOELAB_INSTANTIATE_TRAIN(float)
MOELAB_INSTANTIATE_TRAIN(double)

}  // namespace moelab
