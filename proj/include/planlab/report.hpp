#pragma once

// Deterministic report emission: long-form CSV, wide per-eval CSV, JSON summary
// and SVG bar charts. Identical inputs give byte-identical files.

#include <algorithm>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "planlab/container.hpp"
#include "planlab/metrics.hpp"

namespace planlab {

// Hash of a configuration object; nlohmann::json sorts keys, so the dump is canonical.
inline std::string config_hash(const nlohmann::json& config) { return hex64(fnv1a64(config.dump())); }

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::vector<MetricReport> sorted_reports(std::vector<MetricReport> reports) {
  if (reports.empty()) throw Error("report: no metric reports to emit");
  for (const auto& r : reports) r.validate();
  std::stable_sort(reports.begin(), reports.end(), [](const MetricReport& a, const MetricReport& b) {
    return std::tie(a.model, a.pair, a.metric, a.category, a.experiment) <
           std::tie(b.model, b.pair, b.metric, b.category, b.experiment);
  });
  return reports;
}

inline const std::vector<std::string>& long_columns() {
  static const std::vector<std::string> cols = {"experiment", "model",  "pair", "category",   "metric",
                                                "value",      "samples", "seed", "config_hash"};
  return cols;
}

inline std::string long_csv(const std::vector<MetricReport>& reports) {
  std::ostringstream out;
  const auto& cols = long_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  for (const auto& r : sorted_reports(reports)) {
    out << csv_field(r.experiment) << ',' << csv_field(r.model) << ',' << csv_field(r.pair) << ','
        << csv_field(r.category) << ',' << csv_field(r.metric) << ',' << format_real(r.value) << ',' << r.samples << ','
        << r.seed << ',' << r.config_hash << "\n";
  }
  return out.str();
}

// One row per (model, pair, category), one column per metric, in the given order.
inline std::string wide_csv(const std::vector<MetricReport>& reports, const std::vector<std::string>& metrics) {
  using Key = std::tuple<std::string, std::string, std::string>;
  std::map<Key, std::map<std::string, const MetricReport*>> rows;
  const auto sorted = sorted_reports(reports);
  for (const auto& r : sorted) rows[{r.model, r.pair, r.category}][r.metric] = &r;
  std::ostringstream out;
  out << "model,pair,category";
  for (const auto& m : metrics) out << ',' << m;
  out << ",samples,seed,config_hash\n";
  for (const auto& [key, cells] : rows) {
    out << csv_field(std::get<0>(key)) << ',' << csv_field(std::get<1>(key)) << ',' << csv_field(std::get<2>(key));
    const MetricReport* any = cells.begin()->second;
    for (const auto& m : metrics) {
      out << ',';
      if (auto it = cells.find(m); it != cells.end()) out << format_real(it->second->value);
    }
    out << ',' << any->samples << ',' << any->seed << ',' << any->config_hash << "\n";
  }
  return out.str();
}

inline nlohmann::json reports_json(const std::vector<MetricReport>& reports, const nlohmann::json& config = {}) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : sorted_reports(reports)) {
    rows.push_back({{"experiment", r.experiment},
                    {"model", r.model},
                    {"pair", r.pair},
                    {"category", r.category},
                    {"metric", r.metric},
                    {"value", format_real(r.value)},
                    {"samples", r.samples},
                    {"seed", r.seed},
                    {"config_hash", r.config_hash}});
  }
  nlohmann::json out = {{"reports", rows}};
  if (!config.is_null()) {
    out["config"] = config;
    out["config_hash"] = config_hash(config);
  }
  return out;
}

inline std::string correlation_csv(const CorrelationMatrix& m) {
  std::ostringstream out;
  out << "metric";
  for (const auto& name : m.metrics) out << ',' << name;
  out << "\n";
  for (std::size_t i = 0; i < m.metrics.size(); ++i) {
    out << m.metrics[i];
    for (std::size_t j = 0; j < m.metrics.size(); ++j) out << ',' << (m.r[i][j] ? format_real(*m.r[i][j]) : "undefined");
    out << "\n";
  }
  return out.str();
}

// Grouped bars, baseline solid and steered hatched, one group per pair.
// Metrics whose name ends in "_steered" pair with the same name without it.
inline std::string svg_bars(const std::vector<MetricReport>& reports, const std::string& title) {
  const auto sorted = sorted_reports(reports);
  std::map<std::string, std::map<std::string, double>> groups;  // group -> series -> value
  for (const auto& r : sorted) {
    if (!r.is_fraction) continue;
    const std::string group = r.pair.empty() ? r.category : r.pair;
    groups[group.empty() ? r.model : group][r.metric] = r.value;
  }
  const double bar = 14, gap = 18, height = 200, top = 30, left = 40;
  std::size_t series_max = 1;
  for (const auto& [g, s] : groups) series_max = std::max(series_max, s.size());
  const double group_w = static_cast<double>(series_max) * bar + gap;
  const double width = left + static_cast<double>(groups.size()) * group_w + 20;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << format_real(width) << "\" height=\""
      << format_real(height + top + 60) << "\">\n";
  out << "<defs><pattern id=\"hatch\" width=\"4\" height=\"4\" patternUnits=\"userSpaceOnUse\">"
         "<path d=\"M0,4 L4,0\" stroke=\"#333\" stroke-width=\"1\"/></pattern></defs>\n";
  out << "<text x=\"" << format_real(left) << "\" y=\"18\" font-size=\"12\">" << xml_escape(title) << "</text>\n";
  out << "<line x1=\"" << format_real(left) << "\" y1=\"" << format_real(top + height) << "\" x2=\"" << format_real(width)
      << "\" y2=\"" << format_real(top + height) << "\" stroke=\"#000\"/>\n";
  double x = left;
  for (const auto& [g, series] : groups) {
    double bx = x;
    for (const auto& [metric, v] : series) {
      const bool steered = metric.ends_with("_steered");
      const double h = v * height;
      out << "<rect x=\"" << format_real(bx) << "\" y=\"" << format_real(top + height - h) << "\" width=\""
          << format_real(bar - 2) << "\" height=\"" << format_real(h) << "\" fill=\""
          << (steered ? "url(#hatch)" : "#4a6fa5") << "\" stroke=\"#333\"><title>" << xml_escape(metric) << " "
          << format_real(v) << "</title></rect>\n";
      bx += bar;
    }
    out << "<text x=\"" << format_real(x) << "\" y=\"" << format_real(top + height + 14)
        << "\" font-size=\"9\">" << xml_escape(g) << "</text>\n";
    x += group_w;
  }
  out << "</svg>\n";
  return out.str();
}

enum class ReportFormat { csv, json, svg_bars };

// Writes `<stem>.csv|.json|.svg` under dir; returns the written path.
inline std::filesystem::path emit_report(const std::filesystem::path& dir, const std::string& stem,
                                         const std::vector<MetricReport>& reports, ReportFormat format,
                                         const nlohmann::json& config = {}) {
  std::filesystem::path path;
  std::string body;
  switch (format) {
    case ReportFormat::csv:
      path = dir / (stem + ".csv");
      body = long_csv(reports);
      break;
    case ReportFormat::json:
      path = dir / (stem + ".json");
      body = reports_json(reports, config).dump(2) + "\n";
      break;
    case ReportFormat::svg_bars:
      path = dir / (stem + ".svg");
      body = svg_bars(reports, stem);
      break;
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("report: cannot create output directory " + dir.string() + ": " + ec.message());
  write_file(path, body);
  return path;
}

}  // namespace planlab
