// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>

#include "moelab/error.hpp"
#include "moelab/telemetry.hpp"

namespace moelab {

namespace {

constexpr int kCell = 28;
constexpr int kLabelWidth = 90;
constexpr int kTitleHeight = 24;
constexpr int kHeaderHeight = 18;
constexpr int kLegendHeight = 40;
constexpr int kGap = 20;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// White (t = 0) to deep blue (t = 1).
std::string color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const auto ch = [t](int lo, int hi) { return static_cast<int>(std::lround(lo + (hi - lo) * t)); };
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", ch(255, 8), ch(255, 48), ch(255, 107));
  return buf;
}

struct Geometry {
  int cell_w;
  int width;
  int height;
};

Geometry geometry(const Heatmap& h) {
  const auto cols = static_cast<int>(h.values.front().size());
  const int cell_w = cols > 64 ? std::max(2, 1024 / cols) : kCell;
  const int width = kLabelWidth + cols * cell_w + kGap;
  const int height = kTitleHeight + kHeaderHeight + static_cast<int>(h.values.size()) * kCell + kLegendHeight;
  return {cell_w, std::max(width, kLabelWidth + 260), height};
}

void check(const Heatmap& h) {
  if (h.values.empty() || h.values.front().empty()) throw DataError("cannot render an empty heatmap");
  for (const auto& row : h.values) {
    if (row.size() != h.values.front().size()) throw DataError("heatmap rows differ in length");
    for (const double v : row) {
      if (!std::isfinite(v)) throw DataError("heatmap values must be finite");
    }
  }
}

std::string panel(const Heatmap& h, int y0, int cell_w) {
  double lo = h.values[0][0], hi = lo;
  for (const auto& row : h.values) {
    for (const double v : row) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (h.row_normalized) {
    lo = std::min(lo, 0.0);
    hi = std::max(hi, 1e-12);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  const auto rows = h.values.size();
  const auto cols = h.values.front().size();

  std::string s = "<g transform=\"translate(0," + std::to_string(y0) + ")\">\n";
  s += "<text x=\"4\" y=\"16\" font-size=\"14\" font-weight=\"bold\">" + escape(h.title) + "</text>\n";
  const int grid_y = kTitleHeight + kHeaderHeight;
  const std::size_t label_stride = std::max<std::size_t>(1, (cols * static_cast<std::size_t>(cell_w) < 600) ? 1 : cols / 8);
  for (std::size_t c = 0; c < cols; c += label_stride) {
    const std::string label = c < h.column_labels.size() ? h.column_labels[c] : std::to_string(c);
    s += "<text x=\"" + std::to_string(kLabelWidth + static_cast<int>(c) * cell_w + 2) + "\" y=\"" +
         std::to_string(grid_y - 4) + "\" font-size=\"10\">" + escape(label) + "</text>\n";
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = grid_y + static_cast<int>(r) * kCell;
    const std::string label = r < h.row_labels.size() ? h.row_labels[r] : std::to_string(r);
    s += "<text x=\"4\" y=\"" + std::to_string(y + kCell / 2 + 4) + "\" font-size=\"11\">" + escape(label) + "</text>\n";
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = h.values[r][c];
      const std::string col = c < h.column_labels.size() ? h.column_labels[c] : std::to_string(c);
      s += "<rect x=\"" + std::to_string(kLabelWidth + static_cast<int>(c) * cell_w) + "\" y=\"" + std::to_string(y) +
           "\" width=\"" + std::to_string(cell_w) + "\" height=\"" + std::to_string(kCell) + "\" fill=\"" +
           color((v - lo) / span) + "\"><title>" + escape(label) + ", " + escape(col) + ": " + num(v) +
           "</title></rect>\n";
    }
  }
  const int ly = grid_y + static_cast<int>(rows) * kCell + 10;
  constexpr int kSteps = 10;
  for (int i = 0; i < kSteps; ++i) {
    s += "<rect x=\"" + std::to_string(kLabelWidth + i * 16) + "\" y=\"" + std::to_string(ly) +
         "\" width=\"16\" height=\"10\" fill=\"" + color(static_cast<double>(i) / (kSteps - 1)) + "\"/>\n";
  }
  s += "<text x=\"" + std::to_string(kLabelWidth) + "\" y=\"" + std::to_string(ly + 24) + "\" font-size=\"10\">" +
       num(lo) + "</text>\n";
  s += "<text x=\"" + std::to_string(kLabelWidth + kSteps * 16) + "\" y=\"" + std::to_string(ly + 24) +
       "\" font-size=\"10\" text-anchor=\"end\">" + num(hi) + "</text>\n";
  if (h.row_normalized) {
    s += "<text x=\"" + std::to_string(kLabelWidth + kSteps * 16 + 10) + "\" y=\"" + std::to_string(ly + 9) +
         "\" font-size=\"10\">each row sums to 1</text>\n";
  }
  s += "</g>\n";
  return s;
}

}  // namespace

std::string render_heatmaps(const std::vector<Heatmap>& heatmaps) {
  if (heatmaps.empty()) throw DataError("no heatmaps to render");
  int width = 0, height = 0;
  for (const auto& h : heatmaps) {
    check(h);
    const auto g = geometry(h);
    width = std::max(width, g.width);
    height += g.height + kGap;
  }
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + std::to_string(width) + "\" height=\"" +
       std::to_string(height) + "\" font-family=\"sans-serif\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  int y = 0;
  for (const auto& h : heatmaps) {
    const auto g = geometry(h);
    s += panel(h, y, g.cell_w);
    y += g.height + kGap;
  }
  s += "</svg>\n";
  return s;
}

std::string render_heatmap(const Heatmap& heatmap) { return render_heatmaps({heatmap}); }

Heatmap activation_heatmap(const std::vector<ActivationRecord>& records, int layer, std::size_t max_columns) {
  if (max_columns == 0) throw DataError("heatmap needs at least one column");
  std::vector<const ActivationRecord*> rs;
  for (const auto& r : records) {
    if (r.layer == layer) rs.push_back(&r);
  }
  if (rs.empty()) throw DataError("no activation records for layer " + std::to_string(layer));
  std::stable_sort(rs.begin(), rs.end(), [](const auto* a, const auto* b) { return a->iteration < b->iteration; });
  const std::size_t n = rs.front()->counts.size();
  const std::size_t bins = std::min(max_columns, rs.size());
  Heatmap h;
  h.title = "layer " + std::to_string(layer) + " expert activation frequency";
  h.row_normalized = false;
  for (std::size_t e = 0; e < n; ++e) h.row_labels.push_back("expert " + std::to_string(e));
  h.values.assign(n, std::vector<double>(bins, 0.0));
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t begin = b * rs.size() / bins;
    const std::size_t end = (b + 1) * rs.size() / bins;
    std::vector<double> freq(n, 0.0);
    for (std::size_t i = begin; i < end; ++i) {
      double total = 0;
      for (const auto c : rs[i]->counts) total += static_cast<double>(c);
      for (std::size_t e = 0; e < n; ++e) {
        freq[e] += total > 0 ? static_cast<double>(rs[i]->counts[e]) / total : 0.0;
      }
    }
    for (std::size_t e = 0; e < n; ++e) h.values[e][b] = freq[e] / static_cast<double>(end - begin);
    h.column_labels.push_back(std::to_string(rs[begin]->iteration));
  }
  return h;
}

Heatmap profile_heatmap(const AssignmentProfile& profile) {
  Heatmap h;
  h.title = profile.category + " expert assignment (" + std::to_string(profile.samples) + " units per layer)";
  h.row_normalized = true;
  for (std::size_t l = 0; l < profile.layers.size(); ++l) {
    h.row_labels.push_back("layer " + std::to_string(l));
    h.values.push_back(profile.layers[l]);
  }
  h.row_labels.push_back("mean");
  h.values.push_back(profile.layer_mean());
  for (std::size_t e = 0; e < h.values.front().size(); ++e) h.column_labels.push_back("E" + std::to_string(e));
  return h;
}

}  // namespace moelab
