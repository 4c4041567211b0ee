#pragma once

// SVG figures built from CSV artifacts only: accuracy/forgetting curves and CCA heatmaps.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gfr/analysis.hpp"
#include "gfr/eval.hpp"

namespace gfr::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Axes {
  std::string title;
  std::string x_label;
  std::string y_label;
  double y_min = 0;
  double y_max = 1;
};

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                           "#9467bd", "#8c564b", "#e377c2", "#17becf"};

inline std::string escape(const std::string& s) {
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

inline std::string line_chart(const std::vector<Series>& series, const Axes& axes) {
  const double width = 560, height = 380, left = 60, right = 150, top = 36, bottom = 48;
  const double pw = width - left - right, ph = height - top - bottom;
  double x_min = 1, x_max = 1;
  bool first = true;
  for (const auto& s : series)
    for (double x : s.x) {
      x_min = first ? x : std::min(x_min, x);
      x_max = first ? x : std::max(x_max, x);
      first = false;
    }
  if (x_max == x_min) x_max = x_min + 1;
  const double y_span = axes.y_max > axes.y_min ? axes.y_max - axes.y_min : 1;
  auto px = [&](double x) { return left + (x - x_min) / (x_max - x_min) * pw; };
  auto py = [&](double y) { return top + (1 - (y - axes.y_min) / y_span) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left + pw / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(axes.title)
     << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = axes.y_min + y_span * i / 4;
    os << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << py(y) << "\" y2=\"" << py(y)
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << format_number(y)
       << "</text>\n";
  }
  for (int x = static_cast<int>(std::ceil(x_min)); x <= static_cast<int>(std::floor(x_max)); ++x) {
    os << "<text x=\"" << px(x) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << x << "</text>\n";
  }
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << height - 10 << "\" text-anchor=\"middle\">"
     << escape(axes.x_label) << "</text>\n";
  os << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(axes.y_label) << "</text>\n";
  for (size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* colour = kPalette[i % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (size_t j = 0; j < s.x.size(); ++j) os << (j ? " " : "") << px(s.x[j]) << ',' << py(s.y[j]);
    os << "\"/>\n";
    for (size_t j = 0; j < s.x.size(); ++j) {
      os << "<circle cx=\"" << px(s.x[j]) << "\" cy=\"" << py(s.y[j]) << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
    }
    const double ly = top + 10 + 18 * static_cast<double>(i);
    os << "<line x1=\"" << left + pw + 12 << "\" x2=\"" << left + pw + 32 << "\" y1=\"" << ly << "\" y2=\"" << ly
       << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly + 4 << "\">" << escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Average accuracy A_k for k = 1..T and average forgetting F_k for k = 2..T.
inline Series accuracy_series(const std::string& name, const eval::AccuracyMatrix& m) {
  Series s{name, {}, {}};
  for (int k = 1; k <= m.rows(); ++k) {
    s.x.push_back(k);
    s.y.push_back(eval::average_accuracy(m, k));
  }
  return s;
}

inline Series forgetting_series(const std::string& name, const eval::AccuracyMatrix& m) {
  Series s{name, {}, {}};
  for (int k = 2; k <= m.rows(); ++k) {
    s.x.push_back(k);
    s.y.push_back(eval::average_forgetting(m, k));
  }
  return s;
}

/// Heatmap of similarity over (t', t) for one layer; cells with t < t' stay blank.
inline std::string cca_heatmap(const std::vector<analysis::CcaCell>& cells, const std::string& layer) {
  int tasks = 0;
  std::map<std::pair<int, int>, double> value;
  for (const auto& c : cells) {
    if (c.layer != layer) continue;
    tasks = std::max(tasks, c.t);
    value[{c.t, c.t_prime}] = c.similarity;
  }
  const double cell = 44, left = 60, top = 40;
  const double width = left + cell * tasks + 90, height = top + cell * tasks + 50;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"22\" font-size=\"14\">CCA similarity, " << escape(layer) << "</text>\n";
  for (int tp = 1; tp <= tasks; ++tp) {
    for (int t = 1; t <= tasks; ++t) {
      const double x = left + cell * (t - 1), y = top + cell * (tp - 1);
      const auto it = value.find({t, tp});
      if (it == value.end()) {
        os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
           << "\" fill=\"#f4f4f4\" stroke=\"white\"/>\n";
        continue;
      }
      const double v = std::clamp(it->second, 0.0, 1.0);
      const int shade = static_cast<int>(std::lround(255 * (1 - v)));
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb("
         << shade << ',' << shade << ",255)\" stroke=\"white\"/>\n";
      char label[16];
      std::snprintf(label, sizeof label, "%.2f", it->second);
      os << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"middle\" fill=\""
         << (v > 0.6 ? "white" : "black") << "\">" << label << "</text>\n";
    }
    os << "<text x=\"" << left - 6 << "\" y=\"" << top + cell * (tp - 0.5) + 4 << "\" text-anchor=\"end\">t'=" << tp
       << "</text>\n";
  }
  for (int t = 1; t <= tasks; ++t) {
    os << "<text x=\"" << left + cell * (t - 0.5) << "\" y=\"" << top + cell * tasks + 16
       << "\" text-anchor=\"middle\">t=" << t << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream os(file);
  if (!os) throw IoError("cannot write " + file.string());
  os << text;
  if (!os) throw IoError("write failed: " + file.string());
}

/// Writes accuracy.svg and forgetting.svg for the given metrics.csv files; returns the written paths.
inline std::vector<std::filesystem::path> plot_metrics(const std::vector<std::pair<std::string, std::filesystem::path>>& runs,
                                                       const std::filesystem::path& out_dir) {
  std::vector<Series> acc, forg;
  double f_min = 0, f_max = 1;
  for (const auto& [name, file] : runs) {
    const auto m = eval::read_metrics_csv(file);
    acc.push_back(accuracy_series(name, m));
    forg.push_back(forgetting_series(name, m));
    for (double v : forg.back().y) {
      f_min = std::min(f_min, v);
      f_max = std::max(f_max, v);
    }
  }
  std::filesystem::create_directories(out_dir);
  const auto a = out_dir / "accuracy.svg";
  const auto f = out_dir / "forgetting.svg";
  write_text(a, line_chart(acc, {"Average accuracy", "tasks learned", "average accuracy", 0, 1}));
  write_text(f, line_chart(forg, {"Average forgetting", "tasks learned", "average forgetting", f_min, f_max}));
  return {a, f};
}

/// Writes cca_<layer>.svg for every layer in a CCA CSV; returns the written paths.
inline std::vector<std::filesystem::path> plot_cca(const std::filesystem::path& csv, const std::filesystem::path& out_dir) {
  const auto cells = analysis::read_cca_csv(csv);
  std::vector<std::string> layers;
  for (const auto& c : cells)
    if (std::find(layers.begin(), layers.end(), c.layer) == layers.end()) layers.push_back(c.layer);
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> out;
  for (const auto& layer : layers) {
    out.push_back(out_dir / ("cca_" + layer + ".svg"));
    write_text(out.back(), cca_heatmap(cells, layer));
  }
  return out;
}

}  // namespace gfr::plot
