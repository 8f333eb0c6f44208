#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "cbs/core/format.hpp"
#include "cbs/core/types.hpp"

// Figure-ready exports: long-format CSV and a minimal deterministic SVG line chart.
namespace cbs::plots {

// Optional extra series aligned with the trajectory (T x k each).
struct StorySeries {
  const BeliefTrajectory* trajectory = nullptr;
  std::optional<Matrix> predicted;
  std::optional<Matrix> steered;
};

inline void check_series(const StorySeries& s) {
  if (!s.trajectory) throw ValidationError("plot needs a trajectory");
  const auto& v = s.trajectory->values;
  for (const auto* m : {s.predicted ? &*s.predicted : nullptr, s.steered ? &*s.steered : nullptr})
    if (m && (m->rows() != v.rows() || m->cols() != v.cols()))
      throw ValidationError("plot series for '" + s.trajectory->story_id + "' do not match the trajectory shape");
}

// t,concept,value[,predicted][,steered]; one row per (t, concept).
inline std::string story_csv(const StorySeries& s, const ConceptDomain& domain) {
  check_series(s);
  const auto& v = s.trajectory->values;
  std::string out = "t,concept,value";
  if (s.predicted) out += ",predicted";
  if (s.steered) out += ",steered";
  out += "\n";
  for (Eigen::Index t = 0; t < v.rows(); ++t)
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      out += std::to_string(t + 1) + "," + csv_escape(domain.concepts[static_cast<std::size_t>(c)]) + "," +
             fmt_double(v(t, c));
      if (s.predicted) out += "," + fmt_double((*s.predicted)(t, c));
      if (s.steered) out += "," + fmt_double((*s.steered)(t, c));
      out += "\n";
    }
  return out;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
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

inline std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline const std::vector<std::string>& palette() {
  static const std::vector<std::string> p = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                             "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return p;
}

// Solid lines for elicited beliefs, dashed for probe predictions, dotted for steered runs.
inline std::string story_svg(const StorySeries& s, const ConceptDomain& domain) {
  check_series(s);
  const auto& v = s.trajectory->values;
  const int W = 640, H = 360, left = 50, right = 130, top = 30, bottom = 40;
  const double pw = W - left - right, ph = H - top - bottom;
  const auto T = v.rows();
  auto px = [&](Eigen::Index t) { return left + (T > 1 ? pw * static_cast<double>(t) / static_cast<double>(T - 1) : pw / 2); };
  auto py = [&](double y) { return top + ph * (1.0 - y); };

  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) + "\" height=\"" +
                    std::to_string(H) + "\" viewBox=\"0 0 " + std::to_string(W) + " " + std::to_string(H) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + std::to_string(left) + "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" +
         xml_escape(s.trajectory->story_id + " / " + domain.name) + "</text>\n";
  // axes
  out += "<line x1=\"" + fixed2(left) + "\" y1=\"" + fixed2(py(0)) + "\" x2=\"" + fixed2(left + pw) + "\" y2=\"" +
         fixed2(py(0)) + "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + fixed2(left) + "\" y1=\"" + fixed2(py(0)) + "\" x2=\"" + fixed2(left) + "\" y2=\"" +
         fixed2(py(1)) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = i / 4.0;
    out += "<line x1=\"" + fixed2(left - 4) + "\" y1=\"" + fixed2(py(y)) + "\" x2=\"" + fixed2(left) + "\" y2=\"" +
           fixed2(py(y)) + "\" stroke=\"black\"/>\n";
    out += "<text x=\"" + fixed2(left - 8) + "\" y=\"" + fixed2(py(y) + 4) +
           "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" + fixed2(y) + "</text>\n";
  }
  for (Eigen::Index t = 0; t < T; ++t) {
    out += "<line x1=\"" + fixed2(px(t)) + "\" y1=\"" + fixed2(py(0)) + "\" x2=\"" + fixed2(px(t)) + "\" y2=\"" +
           fixed2(py(0) + 4) + "\" stroke=\"black\"/>\n";
    out += "<text x=\"" + fixed2(px(t)) + "\" y=\"" + fixed2(py(0) + 16) +
           "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" + std::to_string(t + 1) + "</text>\n";
  }
  out += "<text x=\"" + fixed2(left + pw / 2) + "\" y=\"" + std::to_string(H - 6) +
         "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">sentence t</text>\n";

  auto polyline = [&](const Matrix& m, Eigen::Index c, const std::string& color, const char* dash) {
    std::string pts;
    for (Eigen::Index t = 0; t < T; ++t) {
      if (t) pts += " ";
      pts += fixed2(px(t)) + "," + fixed2(py(std::clamp(m(t, c), 0.0, 1.0)));
    }
    std::string line = "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\"";
    if (dash) line += std::string(" stroke-dasharray=\"") + dash + "\"";
    return line + " points=\"" + pts + "\"/>\n";
  };
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    const auto& color = palette()[static_cast<std::size_t>(c) % palette().size()];
    out += polyline(v, c, color, nullptr);
    if (s.predicted) out += polyline(*s.predicted, c, color, "6,3");
    if (s.steered) out += polyline(*s.steered, c, color, "2,2");
    const double ly = top + 14.0 * static_cast<double>(c);
    out += "<line x1=\"" + fixed2(W - right + 10) + "\" y1=\"" + fixed2(ly) + "\" x2=\"" + fixed2(W - right + 30) +
           "\" y2=\"" + fixed2(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    out += "<text x=\"" + fixed2(W - right + 35) + "\" y=\"" + fixed2(ly + 4) +
           "\" font-family=\"sans-serif\" font-size=\"10\">" + xml_escape(domain.concepts[static_cast<std::size_t>(c)]) +
           "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

} // namespace cbs::plots
