#pragma once

// Minimal deterministic SVG line charts with a log-scaled time axis.

#include "grokking/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace grokking {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::string color = "#1f77b4";
};

struct ChartSpec {
  std::string title;
  std::string y_label;
  bool log_y = false;
  double width = 640;
  double height = 400;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline std::string escape_xml(const std::string& s) {
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

}  // namespace detail

/// Renders the series as polylines; points with x ≤ 0 or non-finite values are
/// dropped (and y ≤ 0 when log_y).
inline std::string render_svg(const ChartSpec& spec, const std::vector<Series>& series) {
  const double ml = 70, mr = 150, mt = 40, mb = 50;
  const double pw = spec.width - ml - mr, ph = spec.height - mt - mb;
  auto keep = [&](double x, double y) { return x > 0 && std::isfinite(x) && std::isfinite(y) && (!spec.log_y || y > 0); };
  auto ty = [&](double y) { return spec.log_y ? std::log10(y) : y; };

  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!keep(s.x[i], s.y[i])) continue;
      x0 = std::min(x0, std::log10(s.x[i]));
      x1 = std::max(x1, std::log10(s.x[i]));
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return ml + (std::log10(x) - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return mt + (1.0 - (ty(y) - y0) / (y1 - y0)) * ph; };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt(spec.width) + "\" height=\"" +
                    detail::fmt(spec.height) + "\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"" + detail::fmt(spec.width) + "\" height=\"" + detail::fmt(spec.height) +
         "\" fill=\"white\"/>\n";
  svg += "<text x=\"" + detail::fmt(ml) + "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" +
         detail::escape_xml(spec.title) + "</text>\n";
  svg += "<rect x=\"" + detail::fmt(ml) + "\" y=\"" + detail::fmt(mt) + "\" width=\"" + detail::fmt(pw) +
         "\" height=\"" + detail::fmt(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  // decade ticks on x
  for (double e = std::ceil(x0); e <= std::floor(x1); e += 1.0) {
    const double x = ml + (e - x0) / (x1 - x0) * pw;
    svg += "<line x1=\"" + detail::fmt(x) + "\" y1=\"" + detail::fmt(mt + ph) + "\" x2=\"" + detail::fmt(x) +
           "\" y2=\"" + detail::fmt(mt + ph + 5) + "\" stroke=\"black\"/>\n";
    svg += "<text x=\"" + detail::fmt(x) + "\" y=\"" + detail::fmt(mt + ph + 18) +
           "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">1e" + detail::fmt_tick(e) +
           "</text>\n";
  }
  for (int k = 0; k <= 4; ++k) {
    const double v = y0 + (y1 - y0) * k / 4.0;
    const double y = mt + (1.0 - k / 4.0) * ph;
    svg += "<text x=\"" + detail::fmt(ml - 6) + "\" y=\"" + detail::fmt(y + 3) +
           "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" +
           detail::fmt_tick(spec.log_y ? std::pow(10.0, v) : v) + "</text>\n";
  }
  svg += "<text x=\"" + detail::fmt(ml + pw / 2) + "\" y=\"" + detail::fmt(spec.height - 10) +
         "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">time</text>\n";
  svg += "<text x=\"14\" y=\"" + detail::fmt(mt + ph / 2) + "\" font-family=\"sans-serif\" font-size=\"12\">" +
         detail::escape_xml(spec.y_label) + "</text>\n";

  double legend_y = mt + 10;
  for (const auto& s : series) {
    std::string pts;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!keep(s.x[i], s.y[i])) continue;
      if (!pts.empty()) pts += ' ';
      pts += detail::fmt(px(s.x[i])) + "," + detail::fmt(py(s.y[i]));
    }
    svg += "<polyline fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    svg += "<text x=\"" + detail::fmt(ml + pw + 10) + "\" y=\"" + detail::fmt(legend_y) +
           "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" + s.color + "\">" + detail::escape_xml(s.label) +
           "</text>\n";
    legend_y += 16;
  }
  svg += "</svg>\n";
  return svg;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << text;
  if (!os) throw ConfigError("write failed for " + path.string());
}

}  // namespace grokking
