// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab {

namespace {

template <typename Enum>
struct EnumName {
  Enum value;
  std::string_view name;
};

constexpr EnumName<RoutingUnit> kUnitNames[] = {{RoutingUnit::token, "token"},
                                                {RoutingUnit::sequence, "sequence"}};
constexpr EnumName<RoutingScope> kScopeNames[] = {{RoutingScope::layer_wise, "layer_wise"},
                                                  {RoutingScope::global, "global"}};
constexpr EnumName<RoutingStrategy> kStrategyNames[] = {{RoutingStrategy::learned, "learned"},
                                                        {RoutingStrategy::frozen, "frozen"},
                                                        {RoutingStrategy::random, "random"},
                                                        {RoutingStrategy::language, "language"}};
constexpr EnumName<RouterDepth> kDepthNames[] = {{RouterDepth::one_layer, "one_layer"},
                                                 {RouterDepth::two_layer, "two_layer"}};
constexpr EnumName<SequencePooling> kPoolingNames[] = {{SequencePooling::mean, "mean"}};
constexpr EnumName<Precision> kPrecisionNames[] = {{Precision::float32, "float32"},
                                                   {Precision::float64, "float64"}};

template <typename Enum, std::size_t N>
std::string_view enum_name(const EnumName<Enum> (&table)[N], Enum v) {
  for (const auto& e : table) {
    if (e.value == v) return e.name;
  }
  return "?";
}

template <typename Enum, std::size_t N>
std::optional<Enum> enum_parse(const EnumName<Enum> (&table)[N], std::string_view s) {
  for (const auto& e : table) {
    if (e.name == s) return e.value;
  }
  return std::nullopt;
}

template <typename Enum, std::size_t N>
std::string enum_choices(const EnumName<Enum> (&table)[N]) {
  std::string out;
  for (const auto& e : table) {
    if (!out.empty()) out += "|";
    out += e.name;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::optional<std::int64_t> parse_int(std::string_view s) {
  std::int64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end) return std::nullopt;
  return v;
}

std::optional<double> parse_real(std::string_view s) {
  if (s.empty()) return std::nullopt;
  std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (end != tmp.c_str() + tmp.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::optional<bool> parse_bool(std::string_view s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  return std::nullopt;
}

// Mutable view of a config while parsing. Routing fields are staged so that the
// order of `moe = ...` relative to routing keys does not matter.
struct Staging {
  ExperimentConfig config;
  RoutingConfig routing;
  bool moe = true;
  bool warmup_set = false;
  bool d_ffn_set = false;
  bool router_hidden_set = false;
};

using Setter = std::function<void(Staging&, std::string_view, std::size_t)>;

[[noreturn]] void type_error(std::size_t line, std::string_view key, std::string_view expected,
                             std::string_view got) {
  throw ParseError(line, "key '" + std::string(key) + "' expects " + std::string(expected) +
                             ", got '" + std::string(got) + "'");
}

template <typename Field>
Setter int_setter(std::string_view key, Field field) {
  return [key, field](Staging& s, std::string_view v, std::size_t line) {
    auto parsed = parse_int(v);
    if (!parsed) type_error(line, key, "an integer", v);
    field(s) = static_cast<std::remove_reference_t<decltype(field(s))>>(*parsed);
  };
}

template <typename Field>
Setter real_setter(std::string_view key, Field field) {
  return [key, field](Staging& s, std::string_view v, std::size_t line) {
    auto parsed = parse_real(v);
    if (!parsed) type_error(line, key, "a finite real", v);
    field(s) = *parsed;
  };
}

template <typename Field>
Setter bool_setter(std::string_view key, Field field) {
  return [key, field](Staging& s, std::string_view v, std::size_t line) {
    auto parsed = parse_bool(v);
    if (!parsed) type_error(line, key, "true|false", v);
    field(s) = *parsed;
  };
}

template <typename Enum, std::size_t N, typename Field>
Setter enum_setter(std::string_view key, const EnumName<Enum> (&table)[N], Field field) {
  return [key, &table, field](Staging& s, std::string_view v, std::size_t line) {
    auto parsed = enum_parse(table, v);
    if (!parsed) type_error(line, key, enum_choices(table), v);
    field(s) = *parsed;
  };
}

struct KeyEntry {
  std::string key;
  Setter set;
  std::function<std::string(const ExperimentConfig&)> get;  // empty optional => key omitted
  bool routing = false;
};

const std::vector<KeyEntry>& key_table() {
  static const std::vector<KeyEntry> table = [] {
    std::vector<KeyEntry> t;
    auto add = [&](std::string key, Setter set, std::function<std::string(const ExperimentConfig&)> get,
                   bool routing = false) { t.push_back({std::move(key), std::move(set), std::move(get), routing}); };
    const auto r = [](const ExperimentConfig& c) -> const RoutingConfig& { return *c.routing; };

    // model
    add("n_layers", int_setter("n_layers", [](Staging& s) -> int& { return s.config.model.n_layers; }),
        [](const ExperimentConfig& c) { return std::to_string(c.model.n_layers); });
    add("d_model", int_setter("d_model", [](Staging& s) -> int& { return s.config.model.d_model; }),
        [](const ExperimentConfig& c) { return std::to_string(c.model.d_model); });
    add("n_heads", int_setter("n_heads", [](Staging& s) -> int& { return s.config.model.n_heads; }),
        [](const ExperimentConfig& c) { return std::to_string(c.model.n_heads); });
    add("d_ffn",
        [](Staging& s, std::string_view v, std::size_t line) {
          int_setter("d_ffn", [](Staging& st) -> int& { return st.config.model.d_ffn; })(s, v, line);
          s.d_ffn_set = true;
        },
        [](const ExperimentConfig& c) { return std::to_string(c.model.d_ffn); });
    add("vocab_size", int_setter("vocab_size", [](Staging& s) -> int& { return s.config.model.vocab_size; }),
        [](const ExperimentConfig& c) { return std::to_string(c.model.vocab_size); });
    add("context_length",
        int_setter("context_length", [](Staging& s) -> int& { return s.config.model.context_length; }),
        [](const ExperimentConfig& c) { return std::to_string(c.model.context_length); });
    add("dropout", real_setter("dropout", [](Staging& s) -> double& { return s.config.model.dropout; }),
        [](const ExperimentConfig& c) { return format_double(c.model.dropout); });
    add("ffn_width_multiplier",
        int_setter("ffn_width_multiplier",
                   [](Staging& s) -> int& { return s.config.model.ffn_width_multiplier; }),
        [](const ExperimentConfig& c) { return std::to_string(c.model.ffn_width_multiplier); });
    add("biases", bool_setter("biases", [](Staging& s) -> bool& { return s.config.model.biases_enabled; }),
        [](const ExperimentConfig& c) { return std::string(c.model.biases_enabled ? "true" : "false"); });

    // routing
    add("moe", bool_setter("moe", [](Staging& s) -> bool& { return s.moe; }),
        [](const ExperimentConfig& c) { return std::string(c.routing ? "true" : "false"); });
    add("n_experts", int_setter("n_experts", [](Staging& s) -> int& { return s.routing.n_experts; }),
        [r](const ExperimentConfig& c) { return std::to_string(r(c).n_experts); }, true);
    add("top_k", int_setter("top_k", [](Staging& s) -> int& { return s.routing.top_k; }),
        [r](const ExperimentConfig& c) { return std::to_string(r(c).top_k); }, true);
    add("unit", enum_setter("unit", kUnitNames, [](Staging& s) -> RoutingUnit& { return s.routing.unit; }),
        [r](const ExperimentConfig& c) { return std::string(to_string(r(c).unit)); }, true);
    add("scope", enum_setter("scope", kScopeNames, [](Staging& s) -> RoutingScope& { return s.routing.scope; }),
        [r](const ExperimentConfig& c) { return std::string(to_string(r(c).scope)); }, true);
    add("strategy",
        enum_setter("strategy", kStrategyNames,
                    [](Staging& s) -> RoutingStrategy& { return s.routing.strategy; }),
        [r](const ExperimentConfig& c) { return std::string(to_string(r(c).strategy)); }, true);
    add("router_depth",
        enum_setter("router_depth", kDepthNames,
                    [](Staging& s) -> RouterDepth& { return s.routing.router_depth; }),
        [r](const ExperimentConfig& c) { return std::string(to_string(r(c).router_depth)); }, true);
    add("router_hidden",
        [](Staging& s, std::string_view v, std::size_t line) {
          int_setter("router_hidden", [](Staging& st) -> int& { return st.routing.router_hidden; })(s, v, line);
          s.router_hidden_set = true;
        },
        [r](const ExperimentConfig& c) { return std::to_string(r(c).router_hidden); }, true);
    add("lambda_balance",
        real_setter("lambda_balance", [](Staging& s) -> double& { return s.routing.lambda_balance; }),
        [r](const ExperimentConfig& c) { return format_double(r(c).lambda_balance); }, true);
    add("sequence_pooling",
        enum_setter("sequence_pooling", kPoolingNames,
                    [](Staging& s) -> SequencePooling& { return s.routing.sequence_pooling; }),
        [r](const ExperimentConfig& c) { return std::string(to_string(r(c).sequence_pooling)); }, true);
    add("language_map",
        [](Staging& s, std::string_view v, std::size_t line) {
          try {
            s.routing.language_map = LanguageMap::parse(v);
          } catch (const ConfigError& e) {
            throw ParseError(line, e.what());
          }
        },
        [r](const ExperimentConfig& c) { return r(c).language_map.serialize(); }, true);

    // train
    add("learning_rate",
        real_setter("learning_rate", [](Staging& s) -> double& { return s.config.train.learning_rate; }),
        [](const ExperimentConfig& c) { return format_double(c.train.learning_rate); });
    add("min_learning_rate",
        real_setter("min_learning_rate", [](Staging& s) -> double& { return s.config.train.min_learning_rate; }),
        [](const ExperimentConfig& c) { return format_double(c.train.min_learning_rate); });
    add("weight_decay",
        real_setter("weight_decay", [](Staging& s) -> double& { return s.config.train.weight_decay; }),
        [](const ExperimentConfig& c) { return format_double(c.train.weight_decay); });
    add("iterations", int_setter("iterations", [](Staging& s) -> int& { return s.config.train.iterations; }),
        [](const ExperimentConfig& c) { return std::to_string(c.train.iterations); });
    add("batch_size", int_setter("batch_size", [](Staging& s) -> int& { return s.config.train.batch_size; }),
        [](const ExperimentConfig& c) { return std::to_string(c.train.batch_size); });
    add("grad_accumulation_steps",
        int_setter("grad_accumulation_steps",
                   [](Staging& s) -> int& { return s.config.train.grad_accumulation_steps; }),
        [](const ExperimentConfig& c) { return std::to_string(c.train.grad_accumulation_steps); });
    add("sequence_length",
        int_setter("sequence_length", [](Staging& s) -> int& { return s.config.train.sequence_length; }),
        [](const ExperimentConfig& c) { return std::to_string(c.train.sequence_length); });
    add("warmup_iterations",
        [](Staging& s, std::string_view v, std::size_t line) {
          int_setter("warmup_iterations",
                     [](Staging& st) -> int& { return st.config.train.warmup_iterations; })(s, v, line);
          s.warmup_set = true;
        },
        [](const ExperimentConfig& c) { return std::to_string(c.train.warmup_iterations); });
    add("seed", int_setter("seed", [](Staging& s) -> std::int64_t& { return s.config.train.seed; }),
        [](const ExperimentConfig& c) { return std::to_string(c.train.seed); });
    add("eval_window", int_setter("eval_window", [](Staging& s) -> int& { return s.config.train.eval_window; }),
        [](const ExperimentConfig& c) { return std::to_string(c.train.eval_window); });
    add("eval_interval",
        int_setter("eval_interval", [](Staging& s) -> int& { return s.config.train.eval_interval; }),
        [](const ExperimentConfig& c) { return std::to_string(c.train.eval_interval); });
    add("eval_batches",
        int_setter("eval_batches", [](Staging& s) -> int& { return s.config.train.eval_batches; }),
        [](const ExperimentConfig& c) { return std::to_string(c.train.eval_batches); });
    add("beta1", real_setter("beta1", [](Staging& s) -> double& { return s.config.train.beta1; }),
        [](const ExperimentConfig& c) { return format_double(c.train.beta1); });
    add("beta2", real_setter("beta2", [](Staging& s) -> double& { return s.config.train.beta2; }),
        [](const ExperimentConfig& c) { return format_double(c.train.beta2); });
    add("adam_epsilon",
        real_setter("adam_epsilon", [](Staging& s) -> double& { return s.config.train.adam_epsilon; }),
        [](const ExperimentConfig& c) { return format_double(c.train.adam_epsilon); });
    add("grad_clip", real_setter("grad_clip", [](Staging& s) -> double& { return s.config.train.grad_clip; }),
        [](const ExperimentConfig& c) { return format_double(c.train.grad_clip); });
    add("precision",
        enum_setter("precision", kPrecisionNames,
                    [](Staging& s) -> Precision& { return s.config.train.precision; }),
        [](const ExperimentConfig& c) { return std::string(to_string(c.train.precision)); });

    // data
    add("train_data",
        [](Staging& s, std::string_view v, std::size_t) { s.config.data.train_data = std::string(v); },
        [](const ExperimentConfig& c) { return c.data.train_data; });
    add("val_data", [](Staging& s, std::string_view v, std::size_t) { s.config.data.val_data = std::string(v); },
        [](const ExperimentConfig& c) { return c.data.val_data; });
    return t;
  }();
  return table;
}

const KeyEntry* find_key(std::string_view key) {
  for (const auto& e : key_table()) {
    if (e.key == key) return &e;
  }
  return nullptr;
}

struct Assignment {
  std::string key;
  std::string value;
  std::size_t line;
};

std::vector<Assignment> split_assignments(std::string_view text) {
  std::vector<Assignment> out;
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
    if (eq == std::string_view::npos) throw ParseError(line_no, "expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(line_no, "missing key before '='");
    out.push_back({std::string(key), std::string(value), line_no});
  }
  return out;
}

Staging staging_from(const ExperimentConfig& base) {
  Staging s;
  s.config = base;
  s.moe = base.routing.has_value();
  s.routing = base.routing.value_or(RoutingConfig{});
  // An existing config already carries resolved derived values.
  s.warmup_set = s.d_ffn_set = s.router_hidden_set = true;
  return s;
}

ExperimentConfig finalize(Staging s) {
  if (!s.d_ffn_set) s.config.model.d_ffn = 4 * s.config.model.d_model;
  if (!s.router_hidden_set) s.routing.router_hidden = s.config.model.d_model;
  if (!s.warmup_set) s.config.train.warmup_iterations = s.config.train.iterations / 50;
  if (s.moe) {
    s.config.routing = s.routing;
  } else {
    s.config.routing.reset();
  }
  return s.config;
}

void apply_assignments(Staging& s, const std::vector<Assignment>& assignments) {
  std::set<std::string> seen;
  for (const auto& a : assignments) {
    if (a.key == "preset") continue;
    const KeyEntry* entry = find_key(a.key);
    if (entry == nullptr) throw ParseError(a.line, "unknown key '" + a.key + "'");
    if (!seen.insert(a.key).second) throw ParseError(a.line, "duplicate key '" + a.key + "'");
    entry->set(s, a.value, a.line);
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invariant violated: " + what);
}

}  // namespace

std::string_view to_string(RoutingUnit v) { return enum_name(kUnitNames, v); }
std::string_view to_string(RoutingScope v) { return enum_name(kScopeNames, v); }
std::string_view to_string(RoutingStrategy v) { return enum_name(kStrategyNames, v); }
std::string_view to_string(RouterDepth v) { return enum_name(kDepthNames, v); }
std::string_view to_string(SequencePooling v) { return enum_name(kPoolingNames, v); }
std::string_view to_string(Precision v) { return enum_name(kPrecisionNames, v); }

LanguageMap::LanguageMap(std::vector<std::pair<std::string, int>> entries) : entries_(std::move(entries)) {
  validate(std::numeric_limits<int>::max());
}

LanguageMap LanguageMap::parse(std::string_view text) {
  std::vector<std::pair<std::string, int>> entries;
  text = trim(text);
  if (text.empty()) return LanguageMap{};
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const auto item = trim(text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    pos = comma == std::string_view::npos ? text.size() + 1 : comma + 1;
    const auto colon = item.find(':');
    if (colon == std::string_view::npos) {
      throw ConfigError("language_map entry '" + std::string(item) + "' is not 'code:expert'");
    }
    const auto code = trim(item.substr(0, colon));
    const auto index = parse_int(trim(item.substr(colon + 1)));
    if (code.empty() || !index) {
      throw ConfigError("language_map entry '" + std::string(item) + "' is not 'code:expert'");
    }
    entries.emplace_back(std::string(code), static_cast<int>(*index));
  }
  return LanguageMap(std::move(entries));
}

std::string LanguageMap::serialize() const {
  std::string out;
  for (const auto& [code, expert] : entries_) {
    if (!out.empty()) out += ',';
    out += code + ':' + std::to_string(expert);
  }
  return out;
}

std::optional<int> LanguageMap::find(std::string_view language) const {
  for (const auto& [code, expert] : entries_) {
    if (code == language) return expert;
  }
  return std::nullopt;
}

void LanguageMap::validate(int n_experts) const {
  std::set<std::string> codes;
  std::set<int> experts;
  for (const auto& [code, expert] : entries_) {
    if (!codes.insert(code).second) throw ConfigError("language_map lists '" + code + "' twice");
    if (!experts.insert(expert).second) {
      throw ConfigError("language_map is not injective: expert " + std::to_string(expert) + " used twice");
    }
    if (expert < 0 || expert >= n_experts) {
      throw ConfigError("language_map expert index " + std::to_string(expert) + " outside [0, n_experts)");
    }
  }
}

int RoutingConfig::router_count(int n_layers) const {
  if (!has_router_parameters()) return 0;
  return scope == RoutingScope::global ? 1 : n_layers;
}

void ExperimentConfig::validate() const {
  const auto& m = model;
  require(m.n_layers > 0, "n_layers > 0");
  require(m.d_model > 0, "d_model > 0");
  require(m.n_heads > 0, "n_heads > 0");
  require(m.d_model % m.n_heads == 0, "d_model mod n_heads = 0");
  require(m.d_ffn > 0, "d_ffn > 0");
  require(m.vocab_size > 0, "vocab_size > 0");
  require(m.context_length > 0, "context_length > 0");
  require(m.dropout >= 0.0 && m.dropout <= 1.0, "dropout in [0,1]");
  require(m.ffn_width_multiplier > 0, "ffn_width_multiplier > 0");
  if (routing) {
    const auto& r = *routing;
    require(m.ffn_width_multiplier == 1, "MoE models use ffn_width_multiplier = 1");
    require(r.n_experts >= 1, "n_experts >= 1");
    require(r.top_k >= 1, "top_k >= 1");
    require(r.top_k <= r.n_experts, "top_k ≤ n_experts");
    require(r.router_hidden > 0, "router_hidden > 0");
    require(r.lambda_balance >= 0.0, "lambda_balance >= 0");
    if (r.strategy == RoutingStrategy::language) {
      require(r.unit == RoutingUnit::sequence, "strategy = language requires unit = sequence");
      require(r.scope == RoutingScope::global, "strategy = language requires scope = global");
      require(!r.language_map.empty(), "strategy = language requires a language_map");
      require(static_cast<int>(r.language_map.size()) <= r.n_experts, "language_map has ≤ n_experts languages");
    }
    r.language_map.validate(r.n_experts);
  }
  const auto& t = train;
  require(t.learning_rate > 0.0, "learning_rate > 0");
  require(t.min_learning_rate > 0.0, "min_learning_rate > 0");
  require(t.min_learning_rate <= t.learning_rate, "min_learning_rate ≤ learning_rate");
  require(t.weight_decay >= 0.0, "weight_decay >= 0");
  require(t.iterations > 0, "iterations > 0");
  require(t.batch_size > 0, "batch_size > 0");
  require(t.grad_accumulation_steps > 0, "grad_accumulation_steps > 0");
  require(t.sequence_length > 0, "sequence_length > 0");
  require(t.sequence_length <= m.context_length, "sequence_length ≤ context_length");
  require(t.warmup_iterations >= 0, "warmup_iterations >= 0");
  require(t.warmup_iterations <= t.iterations, "warmup_iterations ≤ iterations");
  require(t.eval_window > 0, "eval_window > 0");
  require(t.eval_interval > 0, "eval_interval > 0");
  require(t.eval_batches > 0, "eval_batches > 0");
  require(t.beta1 >= 0.0 && t.beta1 < 1.0, "beta1 in [0,1)");
  require(t.beta2 >= 0.0 && t.beta2 < 1.0, "beta2 in [0,1)");
  require(t.adam_epsilon > 0.0, "adam_epsilon > 0");
  require(t.grad_clip >= 0.0, "grad_clip >= 0");
}

ExperimentConfig paper_preset() {
  ExperimentConfig c;
  c.routing = RoutingConfig{};
  return c;
}

ExperimentConfig desk_preset() {
  ExperimentConfig c;
  c.model.n_layers = 6;
  c.model.d_model = 128;
  c.model.n_heads = 4;
  c.model.d_ffn = 512;
  c.model.vocab_size = 256;
  c.model.context_length = 64;
  c.model.dropout = 0.0;
  RoutingConfig r;
  r.n_experts = 4;
  r.top_k = 2;
  r.unit = RoutingUnit::sequence;
  r.router_hidden = 128;
  r.lambda_balance = 0.01;
  c.routing = r;
  c.train.learning_rate = 1e-3;
  c.train.min_learning_rate = 1e-4;
  c.train.weight_decay = 0.1;
  c.train.iterations = 2000;
  c.train.batch_size = 8;
  c.train.grad_accumulation_steps = 1;
  c.train.sequence_length = 64;
  c.train.warmup_iterations = 40;
  c.train.eval_interval = 20;
  c.train.eval_batches = 8;
  return c;
}

ExperimentConfig preset(Preset p) { return p == Preset::desk ? desk_preset() : paper_preset(); }

ExperimentConfig parse_config(std::string_view text) {
  const auto assignments = split_assignments(text);
  Preset base = Preset::paper;
  for (const auto& a : assignments) {
    if (a.key != "preset") continue;
    if (a.value == "paper") {
      base = Preset::paper;
    } else if (a.value == "desk") {
      base = Preset::desk;
    } else {
      throw ParseError(a.line, "key 'preset' expects paper|desk, got '" + a.value + "'");
    }
  }
  Staging s;
  s.config = preset(base);
  s.moe = s.config.routing.has_value();
  s.routing = s.config.routing.value_or(RoutingConfig{});
  apply_assignments(s, assignments);
  auto config = finalize(std::move(s));
  try {
    config.validate();
  } catch (const ConfigError& e) {
    // Point at the last line so the user knows the document as a whole is at fault.
    const std::size_t line = assignments.empty() ? 0 : assignments.back().line;
    throw ParseError(line, e.what());
  }
  return config;
}

void apply_overrides(ExperimentConfig& config, const std::vector<std::string>& assignments) {
  std::string text;
  for (const auto& a : assignments) text += a + "\n";
  auto parsed = split_assignments(text);
  auto staging = staging_from(config);
  for (const auto& a : parsed) {
    // Derived defaults follow their base key unless set explicitly.
    if (a.key == "d_model") staging.d_ffn_set = staging.router_hidden_set = false;
    if (a.key == "iterations") staging.warmup_set = false;
  }
  apply_assignments(staging, parsed);
  config = finalize(std::move(staging));
  config.validate();
}

std::string serialize_config(const ExperimentConfig& config) {
  std::ostringstream out;
  for (const auto& entry : key_table()) {
    if (entry.routing && !config.routing) continue;
    out << entry.key << " = " << entry.get(config) << '\n';
  }
  return out.str();
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::uint64_t config_digest(const ExperimentConfig& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : serialize_config(config)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k{"preset"};
    for (const auto& e : key_table()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

std::int64_t ffn_parameter_count(const ModelConfig& m) {
  const std::int64_t d = m.d_model;
  const std::int64_t f = m.ffn_hidden();
  const std::int64_t bias = m.biases_enabled ? 1 : 0;
  return d * f + bias * f + f * d + bias * d;
}

std::int64_t router_parameter_count(const ModelConfig& m, const RoutingConfig& r) {
  if (!r.has_router_parameters()) return 0;
  const std::int64_t d = m.d_model;
  const std::int64_t n = r.n_experts;
  if (r.router_depth == RouterDepth::one_layer) return d * n;
  const std::int64_t h = r.router_hidden;
  return d * h + (m.biases_enabled ? h : 0) + h * n;
}

ParameterCount count_parameters(const ModelConfig& m, const std::optional<RoutingConfig>& routing) {
  ExperimentConfig probe;
  probe.model = m;
  probe.routing = routing;
  probe.train = desk_preset().train;
  probe.train.sequence_length = 1;
  probe.validate();

  const std::int64_t d = m.d_model;
  const std::int64_t bias = m.biases_enabled ? 1 : 0;
  const std::int64_t layers = m.n_layers;
  const std::int64_t norm = d * (1 + bias);
  const std::int64_t attention = d * 3 * d + bias * 3 * d + d * d + bias * d;
  const std::int64_t ffn = ffn_parameter_count(m);
  const std::int64_t embeddings = std::int64_t{m.vocab_size} * d + std::int64_t{m.context_length} * d;

  // The output head shares the token-embedding matrix.
  std::int64_t shared = embeddings + norm + layers * (2 * norm + attention);
  if (!routing) return {shared + layers * ffn, shared + layers * ffn};

  const auto& r = *routing;
  const std::int64_t routers = r.router_count(m.n_layers) * router_parameter_count(m, r);
  const std::int64_t total = shared + layers * r.n_experts * ffn + routers;
  const std::int64_t inactive = std::int64_t{r.n_experts - r.effective_top_k()} * ffn * layers;
  return {total, total - inactive};
}

}  // namespace moelab
