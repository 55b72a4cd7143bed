// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/cli.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "moelab/data.hpp"
#include "moelab/error.hpp"
#include "moelab/telemetry.hpp"

namespace moelab {

namespace fs = std::filesystem;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string sanitize(std::string_view s) {
  std::string out;
  for (const char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') ? c : '_';
  return out;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("error writing '" + path.string() + "'");
}

std::string millions(std::int64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2fM", static_cast<double>(n) / 1e6);
  return buf;
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  auto config = load_config_file(path);
  if (!overrides.empty()) apply_overrides(config, overrides);
  if (const char* seed = std::getenv("MOELAB_SEED"); seed != nullptr && *seed != '\0') {
    apply_overrides(config, {std::string("seed=") + seed});
  }
  return config;
}

template <typename T>
RunSummary train_run_typed(const ExperimentConfig& config, const fs::path& run_dir, std::ostream* log) {
  if (config.data.train_data.empty() || config.data.val_data.empty()) {
    throw DataError("config must set train_data and val_data");
  }
  const auto train_shard = TokenShard::read(config.data.train_data);
  const auto val_shard = TokenShard::read(config.data.val_data);
  if (train_shard.vocab_size > static_cast<std::uint32_t>(config.model.vocab_size)) {
    throw DataError("shard vocabulary " + std::to_string(train_shard.vocab_size) + " exceeds model vocab_size " +
                    std::to_string(config.model.vocab_size));
  }
  fs::create_directories(run_dir / "checkpoints");
  write_text(run_dir / "config.txt", serialize_config(config));
  TelemetrySink sink(run_dir / "telemetry");

  auto run = TrainRun<T>::create(config);
  run.sink = &sink;
  TrainOptions options;
  options.checkpoint_dir = run_dir / "checkpoints";
  double last_loss = 0;
  options.on_step = [&](const StepResult& s) { last_loss = s.lm_loss; };
  if (log != nullptr) {
    options.on_eval = [&](const EvalResult& e) {
      char line[128];
      std::snprintf(line, sizeof(line), "iter %lld  train_loss %.4f  val_loss %.4f  val_ppl %.3f\n",
                    static_cast<long long>(e.iteration), last_loss, e.cross_entropy, e.perplexity);
      *log << line << std::flush;
    };
  }
  train(run, train_shard, val_shard, options);

  RunSummary summary;
  summary.name = run_dir.filename().string();
  summary.config = config;
  summary.params = count_parameters(config);
  summary.final_eval = evaluate(run.model, val_shard, config.train.eval_batches, run.iteration);
  summary.window_perplexity = headline_perplexity(run.evals, run.iteration, config.train.eval_window);
  return summary;
}

template <typename T>
EvalResult eval_checkpoint(const fs::path& checkpoint, const std::string& val_override, int batches) {
  const auto run = load_checkpoint<T>(checkpoint);
  const std::string val = val_override.empty() ? run.config.data.val_data : val_override;
  if (val.empty()) throw DataError("checkpoint config has no val_data; pass --val");
  const auto shard = TokenShard::read(val);
  return evaluate(run.model, shard, batches > 0 ? batches : run.config.train.eval_batches, run.iteration);
}

template <typename T>
std::vector<AssignmentProfile> profiles_from_checkpoint(const fs::path& checkpoint, const fs::path& eval_set) {
  const auto run = load_checkpoint<T>(checkpoint);
  const auto set = EvalCategorySet::load(eval_set, static_cast<std::size_t>(run.config.model.context_length));
  return assignment_profile(run.model, set);
}

int report(std::ostream& err, const char* kind, const std::exception& e, int code) {
  err << "moelab: " << kind << ": " << e.what() << '\n';
  return code;
}

}  // namespace

std::vector<GridPoint> expand_grid(std::string_view text) {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(line_no, "expected 'key = value[, value...]'");
    const std::string key(trim(line.substr(0, eq)));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(line_no, "missing key before '='");
    for (const auto& a : axes) {
      if (a.first == key) throw ParseError(line_no, "duplicate key '" + key + "'");
    }
    std::vector<std::string> values;
    if (key == "language_map") {
      values.emplace_back(value);
    } else {
      std::size_t p = 0;
      while (p <= value.size()) {
        const auto comma = value.find(',', p);
        const auto item = trim(value.substr(p, comma == std::string_view::npos ? std::string_view::npos : comma - p));
        p = comma == std::string_view::npos ? value.size() + 1 : comma + 1;
        if (item.empty()) throw ParseError(line_no, "empty value in list for '" + key + "'");
        values.emplace_back(item);
      }
    }
    axes.emplace_back(key, std::move(values));
  }

  std::size_t total = 1;
  for (const auto& a : axes) total *= a.second.size();
  std::vector<GridPoint> out;
  for (std::size_t index = 0; index < total; ++index) {
    GridPoint point;
    char prefix[32];
    std::snprintf(prefix, sizeof(prefix), "r%03zu", index);
    point.name = prefix;
    std::size_t rest = index;
    std::vector<std::size_t> choice(axes.size());
    for (std::size_t i = axes.size(); i-- > 0;) {
      choice[i] = rest % axes[i].second.size();
      rest /= axes[i].second.size();
    }
    for (std::size_t i = 0; i < axes.size(); ++i) {
      const auto& [key, values] = axes[i];
      point.config_text += key + " = " + values[choice[i]] + "\n";
      if (values.size() > 1) point.name += "-" + sanitize(key) + "-" + sanitize(values[choice[i]]);
    }
    out.push_back(std::move(point));
  }
  return out;
}

RunSummary train_run(const ExperimentConfig& config, const fs::path& run_dir, std::ostream* log) {
  config.validate();
  if (config.train.precision == Precision::float64) return train_run_typed<double>(config, run_dir, log);
  return train_run_typed<float>(config, run_dir, log);
}

void write_results_csv(std::ostream& out, const std::vector<RunSummary>& runs) {
  out << "run,moe,n_experts,top_k,unit,scope,strategy,router_depth,lambda_balance,ffn_width_multiplier,"
         "total_params,active_params,window_perplexity,final_perplexity\n";
  for (const auto& r : runs) {
    const auto& c = r.config;
    char ppl[64];
    std::snprintf(ppl, sizeof(ppl), "%.6f,%.6f", r.window_perplexity, r.final_eval.perplexity);
    out << r.name << ',' << (c.routing ? "true" : "false") << ',';
    if (c.routing) {
      const auto& g = *c.routing;
      out << g.n_experts << ',' << g.top_k << ',' << to_string(g.unit) << ',' << to_string(g.scope) << ','
          << to_string(g.strategy) << ',' << to_string(g.router_depth) << ',' << g.lambda_balance << ',';
    } else {
      out << ",,,,,,,";
    }
    out << c.model.ffn_width_multiplier << ',' << r.params.total << ',' << r.params.active << ',' << ppl << '\n';
  }
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, out, err);
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mixture-of-experts language model experiments", "moelab"};
  app.require_subcommand(1);

  std::vector<std::string> overrides;
  bool force = false;
  std::string config_path, run_name, runs_dir = "runs", corpus, out_path, checkpoint, eval_set, grid, val_path;
  bool labels = false;
  double split = 0.9;
  std::uint32_t vocab_size = 0;
  int batches = 0;
  int jobs = 1;
  std::size_t window = 100;

  auto* prepare_cmd = app.add_subcommand("prepare", "Tokenize a corpus directory into train/val shards");
  prepare_cmd->add_option("--corpus", corpus, "Directory of .txt or .ids documents")->required();
  prepare_cmd->add_option("--out", out_path, "Output directory for train.bin and val.bin")->required();
  prepare_cmd->add_flag("--labels", labels, "Label documents by their top-level subdirectory");
  prepare_cmd->add_option("--split", split, "Fraction of documents used for training");
  prepare_cmd->add_option("--vocab-size", vocab_size, "Vocabulary size (required for .ids input)");

  auto* train_cmd = app.add_subcommand("train", "Train a model into runs/<name>");
  train_cmd->add_option("--config", config_path, "Configuration file")->required();
  train_cmd->add_option("--run", run_name, "Run name")->required();
  train_cmd->add_option("--runs-dir", runs_dir, "Parent directory of runs");
  train_cmd->add_option("--set", overrides, "Override a config key (key=value)");
  train_cmd->add_flag("--force", force, "Overwrite an existing run directory");

  auto* eval_cmd = app.add_subcommand("eval", "Validation perplexity of a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--val", val_path, "Validation shard (default: from the checkpoint config)");
  eval_cmd->add_option("--batches", batches, "Evaluation batches (default: eval_batches)");

  auto* count_cmd = app.add_subcommand("count-params", "Print total and active parameter counts");
  count_cmd->add_option("--config", config_path, "Configuration file")->required();
  count_cmd->add_option("--set", overrides, "Override a config key (key=value)");

  auto* act_cmd = app.add_subcommand("analyze-activations", "Expert activation heatmap and collapse metrics");
  act_cmd->add_option("--run", run_name, "Run name")->required();
  act_cmd->add_option("--runs-dir", runs_dir, "Parent directory of runs");
  act_cmd->add_option("--out", out_path, "Output SVG file")->required();
  act_cmd->add_option("--window", window, "Sliding window length in iterations");

  auto* assign_cmd = app.add_subcommand("analyze-assignments", "Expert assignment profiles over labeled categories");
  assign_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  assign_cmd->add_option("--eval-set", eval_set, "Directory of category/*.txt")->required();
  assign_cmd->add_option("--out", out_path, "Output directory")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "Train every point of a configuration grid");
  ablate_cmd->add_option("--grid", grid, "Grid file (key = v1, v2, ...)")->required();
  ablate_cmd->add_option("--runs", runs_dir, "Output directory for runs and results.csv")->required();
  ablate_cmd->add_option("--jobs", jobs, "Runs trained concurrently")->check(CLI::PositiveNumber);

  std::vector<const char*> argv{"moelab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "moelab: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (*prepare_cmd) {
      PrepareOptions options;
      options.labels = labels;
      options.split_fraction = split;
      if (vocab_size > 0) options.vocab_size = vocab_size;
      const auto shards = prepare(corpus, options);
      fs::create_directories(out_path);
      shards.train.write(fs::path(out_path) / "train.bin");
      shards.val.write(fs::path(out_path) / "val.bin");
      out << "train: " << shards.train.tokens.size() << " tokens in " << shards.train.documents.size()
          << " documents\nval: " << shards.val.tokens.size() << " tokens in " << shards.val.documents.size()
          << " documents\n";
      if (shards.train.has_labels()) {
        out << "labels:";
        for (const auto& l : shards.train.labels) out << ' ' << l;
        out << '\n';
      }
      return kExitOk;
    }

    if (*count_cmd) {
      const auto config = load_config(config_path, overrides);
      const auto count = count_parameters(config);
      out << "total " << count.total << " (" << millions(count.total) << ")\n";
      out << "active " << count.active << " (" << millions(count.active) << ")\n";
      return kExitOk;
    }

    if (*train_cmd) {
      const auto config = load_config(config_path, overrides);
      const fs::path run_dir = fs::path(runs_dir) / run_name;
      if (run_name.empty() || run_name.find('/') != std::string::npos || run_name == "." || run_name == "..") {
        err << "moelab: run name must be a single path component\n";
        return kExitUsage;
      }
      if (fs::exists(run_dir)) {
        if (!force) {
          err << "moelab: run directory '" << run_dir.string() << "' exists; pass --force to overwrite\n";
          return kExitUsage;
        }
        fs::remove_all(run_dir);
      }
      const auto summary = train_run(config, run_dir, &out);
      char line[160];
      std::snprintf(line, sizeof(line), "final val_loss %.6f  val_ppl %.6f  window_ppl %.6f\n",
                    summary.final_eval.cross_entropy, summary.final_eval.perplexity, summary.window_perplexity);
      out << line << "checkpoint " << (run_dir / "checkpoints" / "final.ckpt").string() << '\n';
      return kExitOk;
    }

    if (*eval_cmd) {
      const auto precision = checkpoint_precision(checkpoint);
      const auto result = precision == Precision::float64 ? eval_checkpoint<double>(checkpoint, val_path, batches)
                                                          : eval_checkpoint<float>(checkpoint, val_path, batches);
      char line[160];
      std::snprintf(line, sizeof(line), "iteration %lld  val_loss %.6f  val_ppl %.6f\n",
                    static_cast<long long>(result.iteration), result.cross_entropy, result.perplexity);
      out << line;
      return kExitOk;
    }

    if (*act_cmd) {
      const auto records = read_activations_csv(fs::path(runs_dir) / run_name / "telemetry" / "activations.csv");
      int max_layer = -1;
      for (const auto& r : records) max_layer = std::max(max_layer, r.layer);
      std::vector<Heatmap> maps;
      for (int l = 0; l <= max_layer; ++l) maps.push_back(activation_heatmap(records, l));
      write_text(out_path, render_heatmaps(maps));
      const auto metrics = collapse_metrics(records, std::min<std::size_t>(window, records.size() / (max_layer + 1)));
      std::ostringstream csv;
      write_collapse_csv(csv, metrics);
      auto csv_path = fs::path(out_path);
      csv_path.replace_extension(".collapse.csv");
      write_text(csv_path, csv.str());
      for (const auto& m : final_window_metrics(records, std::min<std::size_t>(window, records.size() / (max_layer + 1)))) {
        char line[128];
        std::snprintf(line, sizeof(line), "layer %d  entropy %.4f  ratio %s\n", m.layer, m.entropy,
                      std::isinf(m.ratio) ? "inf" : std::to_string(m.ratio).c_str());
        out << line;
      }
      return kExitOk;
    }

    if (*assign_cmd) {
      const auto precision = checkpoint_precision(checkpoint);
      const auto profiles = precision == Precision::float64 ? profiles_from_checkpoint<double>(checkpoint, eval_set)
                                                            : profiles_from_checkpoint<float>(checkpoint, eval_set);
      std::ostringstream csv;
      write_profiles_csv(csv, profiles);
      write_text(fs::path(out_path) / "profiles.csv", csv.str());
      std::vector<Heatmap> maps;
      for (const auto& p : profiles) maps.push_back(profile_heatmap(p));
      write_text(fs::path(out_path) / "assignments.svg", render_heatmaps(maps));
      for (const auto& p : profiles) {
        char line[160];
        std::snprintf(line, sizeof(line), "%s  units %zu  distance_from_uniform %.4f\n", p.category.c_str(), p.samples,
                      p.distance_from_uniform());
        out << line;
      }
      return kExitOk;
    }

    if (*ablate_cmd) {
      const auto points = expand_grid(read_text(grid));
      std::vector<ExperimentConfig> configs;
      for (const auto& p : points) {
        auto config = parse_config(p.config_text);
        if (const char* seed = std::getenv("MOELAB_SEED"); seed != nullptr && *seed != '\0') {
          apply_overrides(config, {std::string("seed=") + seed});
        }
        configs.push_back(std::move(config));
      }
      fs::create_directories(runs_dir);
      std::vector<RunSummary> summaries(points.size());
      std::vector<std::exception_ptr> failures(points.size());
      std::atomic<std::size_t> next{0};
      std::mutex log_mutex;
      auto worker = [&] {
        for (std::size_t i; (i = next++) < points.size();) {
          try {
            const fs::path dir = fs::path(runs_dir) / points[i].name;
            fs::remove_all(dir);
            std::ostringstream log;
            summaries[i] = train_run(configs[i], dir, jobs == 1 ? &out : &log);
            summaries[i].name = points[i].name;
            std::lock_guard lock(log_mutex);
            char line[160];
            std::snprintf(line, sizeof(line), "%s  window_ppl %.6f  final_ppl %.6f\n", points[i].name.c_str(),
                          summaries[i].window_perplexity, summaries[i].final_eval.perplexity);
            out << line << std::flush;
          } catch (...) {
            failures[i] = std::current_exception();
          }
        }
      };
      std::vector<std::thread> threads;
      for (int t = 1; t < std::min<int>(jobs, static_cast<int>(points.size())); ++t) threads.emplace_back(worker);
      worker();
      for (auto& t : threads) t.join();
      for (const auto& f : failures) {
        if (f) std::rethrow_exception(f);
      }
      std::ostringstream csv;
      write_results_csv(csv, summaries);
      write_text(fs::path(runs_dir) / "results.csv", csv.str());
      out << csv.str();
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    return report(err, "configuration error", e, kExitUsage);
  } catch (const NumericError& e) {
    return report(err, "numeric failure", e, kExitNumeric);
  } catch (const Error& e) {
    return report(err, "data error", e, kExitData);
  } catch (const fs::filesystem_error& e) {
    return report(err, "data error", e, kExitData);
  }
  return kExitUsage;
}

}  // namespace moelab
