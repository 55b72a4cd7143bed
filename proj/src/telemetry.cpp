// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/telemetry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const auto comma = line.find(',', pos);
    out.push_back(line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

template <typename I>
I parse_integer(const std::string& s, std::size_t line) {
  I v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw DataError("line " + std::to_string(line) + ": expected an integer, got '" + s + "'");
  }
  return v;
}

double parse_real(const std::string& s, std::size_t line) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw DataError("line " + std::to_string(line) + ": expected a number, got '" + s + "'");
  }
  return v;
}

std::string format_real(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<double> normalized(const std::vector<double>& w) {
  double sum = 0;
  for (const double v : w) sum += v;
  std::vector<double> p(w.size(), 0.0);
  if (sum <= 0) return p;
  for (std::size_t i = 0; i < w.size(); ++i) p[i] = w[i] / sum;
  return p;
}

}  // namespace

template <typename T>
std::vector<ActivationRecord> record_activations(const std::vector<RoutingDecision<T>>& decisions,
                                                 std::int64_t iteration) {
  std::vector<ActivationRecord> out;
  out.reserve(decisions.size());
  for (const auto& d : decisions) out.push_back({iteration, d.layer, d.expert_counts()});
  return out;
}

template std::vector<ActivationRecord> record_activations<float>(const std::vector<RoutingDecision<float>>&,
                                                                 std::int64_t);
template std::vector<ActivationRecord> record_activations<double>(const std::vector<RoutingDecision<double>>&,
                                                                  std::int64_t);

void merge_activations(std::vector<ActivationRecord>& into, const std::vector<ActivationRecord>& more) {
  if (into.empty()) {
    into = more;
    return;
  }
  if (into.size() != more.size()) throw DataError("cannot merge activation records of different layer counts");
  for (std::size_t i = 0; i < into.size(); ++i) {
    if (into[i].layer != more[i].layer || into[i].counts.size() != more[i].counts.size()) {
      throw DataError("cannot merge activation records with different shapes");
    }
    for (std::size_t e = 0; e < into[i].counts.size(); ++e) into[i].counts[e] += more[i].counts[e];
  }
}

void write_activations_csv(std::ostream& out, const std::vector<ActivationRecord>& records, bool header) {
  if (header) out << "iteration,layer,expert,count\n";
  for (const auto& r : records) {
    for (std::size_t e = 0; e < r.counts.size(); ++e) {
      out << r.iteration << ',' << r.layer << ',' << e << ',' << r.counts[e] << '\n';
    }
  }
}

std::vector<ActivationRecord> read_activations_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line) || line != "iteration,layer,expert,count") {
    throw DataError("activation CSV lacks the 'iteration,layer,expert,count' header");
  }
  std::vector<ActivationRecord> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw DataError("line " + std::to_string(line_no) + ": expected 4 fields");
    const auto it = parse_integer<std::int64_t>(f[0], line_no);
    const auto layer = parse_integer<int>(f[1], line_no);
    const auto expert = parse_integer<std::size_t>(f[2], line_no);
    const auto count = parse_integer<std::int64_t>(f[3], line_no);
    if (expert == 0) {
      out.push_back({it, layer, {}});
    } else if (out.empty() || out.back().iteration != it || out.back().layer != layer ||
               out.back().counts.size() != expert) {
      throw DataError("line " + std::to_string(line_no) + ": experts of a record must be contiguous from 0");
    }
    out.back().counts.push_back(count);
  }
  return out;
}

std::vector<ActivationRecord> read_activations_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  return read_activations_csv(in);
}

double distribution_entropy(const std::vector<double>& weights) {
  double h = 0;
  for (const double p : normalized(weights)) {
    if (p > 0) h -= p * std::log(p);
  }
  return h;
}

double max_min_ratio(const std::vector<double>& weights) {
  if (weights.empty()) throw DataError("ratio of an empty distribution");
  const auto [lo, hi] = std::minmax_element(weights.begin(), weights.end());
  if (*lo <= 0) return std::numeric_limits<double>::infinity();
  return *hi / *lo;
}

std::vector<CollapseMetric> collapse_metrics(const std::vector<ActivationRecord>& records, std::size_t window) {
  if (window == 0) throw DataError("collapse window must be positive");
  std::map<int, std::vector<const ActivationRecord*>> by_layer;
  for (const auto& r : records) by_layer[r.layer].push_back(&r);
  if (by_layer.empty()) throw DataError("no activation records");
  std::vector<CollapseMetric> out;
  for (auto& [layer, rs] : by_layer) {
    if (rs.size() < window) {
      throw DataError("layer " + std::to_string(layer) + " has " + std::to_string(rs.size()) +
                      " records, fewer than the window of " + std::to_string(window));
    }
    std::stable_sort(rs.begin(), rs.end(), [](const auto* a, const auto* b) { return a->iteration < b->iteration; });
    const std::size_t n = rs.front()->counts.size();
    std::vector<double> sum(n, 0.0);
    for (std::size_t i = 0; i < rs.size(); ++i) {
      if (rs[i]->counts.size() != n) throw DataError("activation records disagree on the expert count");
      for (std::size_t e = 0; e < n; ++e) sum[e] += static_cast<double>(rs[i]->counts[e]);
      if (i >= window) {
        for (std::size_t e = 0; e < n; ++e) sum[e] -= static_cast<double>(rs[i - window]->counts[e]);
      }
      if (i + 1 >= window) {
        const auto freq = normalized(sum);
        out.push_back({rs[i]->iteration, layer, distribution_entropy(freq), max_min_ratio(freq)});
      }
    }
  }
  return out;
}

std::vector<CollapseMetric> final_window_metrics(const std::vector<ActivationRecord>& records, std::size_t window) {
  const auto all = collapse_metrics(records, window);
  std::map<int, CollapseMetric> last;
  for (const auto& m : all) last[m.layer] = m;
  std::vector<CollapseMetric> out;
  for (const auto& [layer, m] : last) out.push_back(m);
  return out;
}

void write_collapse_csv(std::ostream& out, const std::vector<CollapseMetric>& rows) {
  out << "window_end,layer,entropy,ratio\n";
  for (const auto& r : rows) {
    out << r.window_end << ',' << r.layer << ',' << format_real(r.entropy) << ',' << format_real(r.ratio) << '\n';
  }
}

std::vector<CollapseMetric> read_collapse_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line) || line != "window_end,layer,entropy,ratio") {
    throw DataError("collapse CSV lacks the 'window_end,layer,entropy,ratio' header");
  }
  std::vector<CollapseMetric> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw DataError("line " + std::to_string(line_no) + ": expected 4 fields");
    out.push_back({parse_integer<std::int64_t>(f[0], line_no), parse_integer<int>(f[1], line_no),
                   parse_real(f[2], line_no), parse_real(f[3], line_no)});
  }
  return out;
}

std::vector<double> AssignmentProfile::layer_mean() const {
  if (layers.empty()) return {};
  std::vector<double> mean(layers.front().size(), 0.0);
  for (const auto& l : layers) {
    for (std::size_t e = 0; e < mean.size(); ++e) mean[e] += l[e];
  }
  for (double& v : mean) v /= static_cast<double>(layers.size());
  return mean;
}

double AssignmentProfile::distance_from_uniform() const {
  const auto mean = layer_mean();
  if (mean.empty()) return 0;
  const double u = 1.0 / static_cast<double>(mean.size());
  double tv = 0;
  for (const double v : mean) tv += std::abs(v - u);
  return 0.5 * tv;
}

template <typename T>
std::vector<AssignmentProfile> assignment_profile(const ModelState<T>& model, const EvalCategorySet& eval_set) {
  if (!model.config.routing) throw ConfigError("assignment profiles need a mixture-of-experts model");
  const auto& routing = *model.config.routing;
  const bool redraw = routing.strategy == RoutingStrategy::random;
  ModelState<T> redrawn;
  if (redraw) redrawn = model;
  std::int64_t draw = 0;

  std::vector<AssignmentProfile> out;
  for (const auto& category : eval_set.categories) {
    if (category.sequences.empty()) throw DataError("evaluation category '" + category.label + "' is empty");
    const auto n_layers = static_cast<std::size_t>(model.config.model.n_layers);
    const auto n_experts = static_cast<std::size_t>(routing.n_experts);
    std::vector<std::vector<double>> mass(n_layers, std::vector<double>(n_experts, 0.0));
    std::size_t units = 0;
    for (const auto& seq : category.sequences) {
      if (redraw) {
        for (std::size_t r = 0; r < redrawn.params.routers.size(); ++r) {
          redrawn.params.routers[r] = apply_strategy_random<T>(model.config.model, routing, model.config.train.seed,
                                                               -1 - draw, static_cast<int>(r));
        }
        ++draw;
      }
      Batch batch;
      batch.batch = 1;
      batch.seq_len = seq.size();
      batch.tokens = seq;
      batch.labels = {category.label};
      const auto result = forward(redraw ? redrawn : model, batch);
      for (const auto& d : result.decisions) {
        const auto counts = d.expert_counts();
        for (std::size_t e = 0; e < n_experts; ++e) mass[static_cast<std::size_t>(d.layer)][e] += static_cast<double>(counts[e]);
      }
      units += result.decisions.empty() ? 0 : result.decisions.front().unit_count();
    }
    AssignmentProfile p;
    p.category = category.label;
    p.samples = units;
    for (auto& row : mass) p.layers.push_back(normalized(row));
    out.push_back(std::move(p));
  }
  return out;
}

template std::vector<AssignmentProfile> assignment_profile<float>(const ModelState<float>&, const EvalCategorySet&);
template std::vector<AssignmentProfile> assignment_profile<double>(const ModelState<double>&, const EvalCategorySet&);

void write_profiles_csv(std::ostream& out, const std::vector<AssignmentProfile>& profiles) {
  out << "category,layer,expert,mass\n";
  for (const auto& p : profiles) {
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      for (std::size_t e = 0; e < p.layers[l].size(); ++e) {
        out << p.category << ',' << l << ',' << e << ',' << format_real(p.layers[l][e]) << '\n';
      }
    }
    const auto mean = p.layer_mean();
    for (std::size_t e = 0; e < mean.size(); ++e) {
      out << p.category << ",mean," << e << ',' << format_real(mean[e]) << '\n';
    }
  }
}

TelemetrySink::TelemetrySink(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw DataError("cannot create telemetry directory '" + dir_.string() + "': " + ec.message());
}

void TelemetrySink::append(const std::string& file, const std::string& header, const std::string& rows) {
  const auto path = dir_ / file;
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot append to '" + path.string() + "'");
  if (fresh) out << header << '\n';
  out << rows;
  if (!out) throw DataError("error writing '" + path.string() + "'");
}

void TelemetrySink::activations(const std::vector<ActivationRecord>& records) {
  std::ostringstream rows;
  write_activations_csv(rows, records, false);
  append("activations.csv", "iteration,layer,expert,count", rows.str());
}

void TelemetrySink::step(std::int64_t iteration, double lm_loss, double balance_loss, double learning_rate,
                         double grad_norm) {
  append("train.csv", "iteration,lm_loss,balance_loss,learning_rate,grad_norm",
         std::to_string(iteration) + ',' + format_real(lm_loss) + ',' + format_real(balance_loss) + ',' +
             format_real(learning_rate) + ',' + format_real(grad_norm) + '\n');
}

void TelemetrySink::eval(std::int64_t iteration, double cross_entropy, double perplexity) {
  append("eval.csv", "iteration,cross_entropy,perplexity",
         std::to_string(iteration) + ',' + format_real(cross_entropy) + ',' + format_real(perplexity) + '\n');
}

}  // namespace moelab
