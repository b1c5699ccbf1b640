#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gazeclr/errors.hpp"
#include "gazeclr/evaluation.hpp"
#include "gazeclr/json_util.hpp"
#include "gazeclr/training.hpp"

namespace gazeclr {

// Trace files: one JSON object {step, loss, lr} per line.

inline void write_trace_jsonl(std::ostream& os, const std::vector<TraceRecord>& trace) {
  for (const auto& r : trace) os << Json{{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}}.dump() << '\n';
}

inline std::vector<TraceRecord> read_trace_jsonl(std::istream& is, const std::string& source = "trace") {
  std::vector<TraceRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ParseError(source, n, "not a JSON object");
    TraceRecord r;
    try {
      r.step = j.at("step").get<long>();
      r.loss = j.at("loss").get<double>();
      r.lr = j.at("lr").get<double>();
    } catch (const Json::exception&) {
      throw ParseError(source, n, "expected numeric fields step, loss, lr");
    }
    out.push_back(r);
  }
  return out;
}

inline std::vector<TraceRecord> read_trace_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open trace '" + path.string() + "'");
  return read_trace_jsonl(in, path.string());
}

namespace detail {

/// Fixed-precision formatting so outputs are byte-stable.
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[i % 10];
}

struct Range {
  double lo = 0.0, hi = 1.0;
  void pad() {
    if (!(hi > lo)) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
};

inline Range range_of(const std::vector<double>& v) {
  Range r{*std::min_element(v.begin(), v.end()), *std::max_element(v.begin(), v.end())};
  r.pad();
  return r;
}

/// Minimal SVG canvas with a plotting area and linear axes.
class SvgPlot {
 public:
  SvgPlot(std::string title, std::string xlabel, std::string ylabel, Range x, Range y)
      : x_(x), y_(y) {
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
        << "</text>\n"
        << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 8 << "\" text-anchor=\"middle\" font-size=\"12\">"
        << escape(xlabel) << "</text>\n"
        << "<text x=\"14\" y=\"" << kH / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
        << kH / 2 << ")\">" << escape(ylabel) << "</text>\n"
        << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << kW - kL - kR << "\" height=\"" << kH - kT - kB
        << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double yv = y_.lo + (y_.hi - y_.lo) * i / 4.0;
      os_ << "<text x=\"" << kL - 4 << "\" y=\"" << num(py(yv) + 4) << "\" text-anchor=\"end\" font-size=\"10\">"
          << num(yv) << "</text>\n";
    }
  }

  double px(double x) const { return kL + (x - x_.lo) / (x_.hi - x_.lo) * (kW - kL - kR); }
  double py(double y) const { return kH - kB - (y - y_.lo) / (y_.hi - y_.lo) * (kH - kT - kB); }

  void x_ticks() {
    for (int i = 0; i <= 4; ++i) {
      const double xv = x_.lo + (x_.hi - x_.lo) * i / 4.0;
      x_tick(xv, num(xv));
    }
  }
  void x_tick(double x, const std::string& label) {
    os_ << "<text x=\"" << num(px(x)) << "\" y=\"" << kH - kB + 14 << "\" text-anchor=\"middle\" font-size=\"10\">"
        << escape(label) << "</text>\n";
  }

  void polyline(const std::vector<double>& xs, const std::vector<double>& ys, const char* color) {
    os_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < xs.size(); ++i) os_ << (i ? " " : "") << num(px(xs[i])) << ',' << num(py(ys[i]));
    os_ << "\"/>\n";
  }
  void line(double x0, double y0, double x1, double y1, const char* color, bool dashed = false) {
    os_ << "<line x1=\"" << num(px(x0)) << "\" y1=\"" << num(py(y0)) << "\" x2=\"" << num(px(x1)) << "\" y2=\""
        << num(py(y1)) << "\" stroke=\"" << color << "\"" << (dashed ? " stroke-dasharray=\"4 3\"" : "") << "/>\n";
  }
  void dot(double x, double y, const char* color, double r = 2.5) {
    os_ << "<circle cx=\"" << num(px(x)) << "\" cy=\"" << num(py(y)) << "\" r=\"" << num(r) << "\" fill=\"" << color
        << "\" fill-opacity=\"0.7\"/>\n";
  }
  void bar(double x0, double x1, double y, const char* color) {
    const double top = py(std::max(y, y_.lo)), base = py(std::max(0.0, y_.lo));
    os_ << "<rect x=\"" << num(px(x0)) << "\" y=\"" << num(std::min(top, base)) << "\" width=\""
        << num(px(x1) - px(x0)) << "\" height=\"" << num(std::abs(base - top)) << "\" fill=\"" << color << "\"/>\n";
  }
  void error_bar(double x, double lo, double hi) {
    line(x, lo, x, hi, "black");
    const double w = (x_.hi - x_.lo) * 0.006;
    line(x - w, lo, x + w, lo, "black");
    line(x - w, hi, x + w, hi, "black");
  }
  void legend(const std::vector<std::string>& names) {
    for (std::size_t i = 0; i < names.size(); ++i) {
      const int y = kT + 12 + 14 * static_cast<int>(i);
      os_ << "<rect x=\"" << kW - kR - 110 << "\" y=\"" << y - 8 << "\" width=\"10\" height=\"10\" fill=\""
          << palette(i) << "\"/>\n"
          << "<text x=\"" << kW - kR - 96 << "\" y=\"" << y + 1 << "\" font-size=\"10\">" << escape(names[i])
          << "</text>\n";
    }
  }

  std::string finish() {
    os_ << "</svg>\n";
    return os_.str();
  }

 private:
  static constexpr int kW = 640, kH = 420, kL = 60, kR = 20, kT = 32, kB = 46;

  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        default: out += c;
      }
    }
    return out;
  }

  Range x_, y_;
  std::ostringstream os_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

}  // namespace detail

/// Data table and rendered figure of one plot.
struct PlotOutput {
  std::string csv;
  std::string svg;

  /// Writes <dir>/<stem>.csv and <dir>/<stem>.svg.
  void save(const std::filesystem::path& dir, const std::string& stem) const {
    detail::write_text(dir / (stem + ".csv"), csv);
    detail::write_text(dir / (stem + ".svg"), svg);
  }
};

inline PlotOutput plot_loss_curve(const std::vector<TraceRecord>& trace, const std::string& title = "pre-training loss") {
  if (trace.empty()) throw EmptyPlotError("loss curve: trace has no records");
  PlotOutput out;
  std::vector<double> xs, ys;
  out.csv = "step,loss,lr\n";
  for (const auto& r : trace) {
    xs.push_back(static_cast<double>(r.step));
    ys.push_back(r.loss);
    out.csv += std::to_string(r.step) + "," + detail::num(r.loss) + "," + detail::num(r.lr) + "\n";
  }
  detail::SvgPlot svg(title, "iteration", "loss", detail::range_of(xs), detail::range_of(ys));
  svg.x_ticks();
  if (xs.size() == 1) {
    svg.dot(xs[0], ys[0], detail::palette(0));
  } else {
    svg.polyline(xs, ys, detail::palette(0));
  }
  out.svg = svg.finish();
  return out;
}

/// Reports have a series label: the protocol, plus the fraction when set.
inline std::string series_label(const EvalReport& r) {
  return r.fraction ? r.protocol + "@" + detail::num(*r.fraction) : r.protocol;
}

/// Grouped bars of mean MAE per shot count with +/- one standard deviation over runs.
inline PlotOutput plot_mae_vs_shots(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw EmptyPlotError("MAE vs shots: no reports");
  std::set<int> shot_set;
  std::vector<std::string> series;
  for (const auto& r : reports) {
    shot_set.insert(r.k);
    const auto label = series_label(r);
    if (std::find(series.begin(), series.end(), label) == series.end()) series.push_back(label);
  }
  const std::vector<int> shots(shot_set.begin(), shot_set.end());
  PlotOutput out;
  out.csv = "series,k,runs,mean,std\n";
  double top = 0.0;
  for (const auto& r : reports) {
    out.csv += series_label(r) + "," + std::to_string(r.k) + "," + std::to_string(r.runs) + "," + detail::num(r.mean) +
               "," + detail::num(r.std) + "\n";
    top = std::max(top, r.mean + r.std);
  }
  detail::SvgPlot svg("mean angular error vs calibration samples", "k (calibration samples)", "MAE (deg)",
                      {0.0, static_cast<double>(shots.size())}, {0.0, top > 0.0 ? top * 1.1 : 1.0});
  const double group_w = 0.8, bar_w = group_w / static_cast<double>(series.size());
  for (std::size_t g = 0; g < shots.size(); ++g) {
    svg.x_tick(g + 0.5, std::to_string(shots[g]));
    for (const auto& r : reports) {
      if (r.k != shots[g]) continue;
      const auto s = static_cast<std::size_t>(
          std::find(series.begin(), series.end(), series_label(r)) - series.begin());
      const double x0 = g + 0.1 + bar_w * s;
      svg.bar(x0, x0 + bar_w, r.mean, detail::palette(s));
      svg.error_bar(x0 + bar_w / 2, std::max(0.0, r.mean - r.std), r.mean + r.std);
    }
  }
  svg.legend(series);
  out.svg = svg.finish();
  return out;
}

/// MAE against the fraction of labelled training data, one curve per protocol.
inline PlotOutput plot_fraction_curve(const std::vector<EvalReport>& reports) {
  std::map<std::string, std::vector<const EvalReport*>> by_protocol;
  for (const auto& r : reports) {
    if (r.fraction) by_protocol[r.protocol].push_back(&r);
  }
  if (by_protocol.empty()) throw EmptyPlotError("fraction curve: no report carries a label fraction");
  PlotOutput out;
  out.csv = "protocol,fraction,mean,std\n";
  std::vector<double> xs, ys;
  for (auto& [proto, rs] : by_protocol) {
    std::sort(rs.begin(), rs.end(), [](const EvalReport* a, const EvalReport* b) { return *a->fraction < *b->fraction; });
    for (const auto* r : rs) {
      out.csv += proto + "," + detail::num(*r->fraction) + "," + detail::num(r->mean) + "," + detail::num(r->std) + "\n";
      xs.push_back(*r->fraction);
      ys.push_back(r->mean + r->std);
      ys.push_back(r->mean - r->std);
    }
  }
  detail::Range yr = detail::range_of(ys);
  yr.lo = std::min(yr.lo, 0.0);
  detail::SvgPlot svg("mean angular error vs labelled fraction", "fraction of labelled data", "MAE (deg)",
                      {0.0, 1.0}, yr);
  svg.x_ticks();
  std::vector<std::string> names;
  std::size_t s = 0;
  for (const auto& [proto, rs] : by_protocol) {
    std::vector<double> fx, fy;
    for (const auto* r : rs) {
      fx.push_back(*r->fraction);
      fy.push_back(r->mean);
      svg.dot(*r->fraction, r->mean, detail::palette(s));
      svg.error_bar(*r->fraction, r->mean - r->std, r->mean + r->std);
    }
    if (fx.size() > 1) svg.polyline(fx, fy, detail::palette(s));
    names.push_back(proto);
    ++s;
  }
  svg.legend(names);
  out.svg = svg.finish();
  return out;
}

/// 2-D projection coloured by participant.
inline PlotOutput plot_embedding_scatter(const DiagnosticsBundle& d) {
  if (d.projection.empty()) throw EmptyPlotError("embedding scatter: no projected points");
  std::vector<std::string> participants;
  for (const auto& p : d.projection) participants.push_back(p.participant);
  std::sort(participants.begin(), participants.end());
  participants.erase(std::unique(participants.begin(), participants.end()), participants.end());
  PlotOutput out;
  out.csv = "participant,timestamp,view,x,y\n";
  std::vector<double> xs, ys;
  for (const auto& p : d.projection) {
    out.csv += p.participant + "," + std::to_string(p.timestamp) + "," + std::to_string(p.view) + "," +
               detail::num(p.x) + "," + detail::num(p.y) + "\n";
    xs.push_back(p.x);
    ys.push_back(p.y);
  }
  detail::SvgPlot svg("2-D embedding (" + to_string(d.mode) + ")", "dim 1", "dim 2", detail::range_of(xs),
                      detail::range_of(ys));
  svg.x_ticks();
  for (const auto& p : d.projection) {
    const auto idx = static_cast<std::size_t>(
        std::lower_bound(participants.begin(), participants.end(), p.participant) - participants.begin());
    svg.dot(p.x, p.y, detail::palette(idx));
  }
  svg.legend(participants);
  out.svg = svg.finish();
  return out;
}

/// Embedding distance against PoG distance, both divided by their maximum, with a y = x reference.
inline PlotOutput plot_pog_scatter(const DiagnosticsBundle& d) {
  if (d.pairs.empty()) throw EmptyPlotError("PoG scatter: no sampled pairs");
  double max_e = 0.0, max_p = 0.0;
  for (const auto& p : d.pairs) {
    max_e = std::max(max_e, p.embedding_distance);
    max_p = std::max(max_p, p.pog_distance);
  }
  const double se = max_e > 0.0 ? 1.0 / max_e : 1.0, sp = max_p > 0.0 ? 1.0 / max_p : 1.0;
  PlotOutput out;
  out.csv = "a,b,pog_distance,embedding_distance,pog_scaled,embedding_scaled\n";
  for (const auto& p : d.pairs) {
    out.csv += std::to_string(p.a) + "," + std::to_string(p.b) + "," + detail::num(p.pog_distance) + "," +
               detail::num(p.embedding_distance) + "," + detail::num(p.pog_distance * sp) + "," +
               detail::num(p.embedding_distance * se) + "\n";
  }
  std::string title = "embedding vs PoG distance";
  if (d.embedding_correlation.r) title += " (r = " + detail::num(*d.embedding_correlation.r) + ")";
  detail::SvgPlot svg(title, "PoG distance (scaled)", "embedding distance (scaled)", {0.0, 1.0}, {0.0, 1.0});
  svg.x_ticks();
  svg.line(0.0, 0.0, 1.0, 1.0, "gray", true);
  for (const auto& p : d.pairs) svg.dot(p.pog_distance * sp, p.embedding_distance * se, detail::palette(0), 2.0);
  out.svg = svg.finish();
  return out;
}

}  // namespace gazeclr
