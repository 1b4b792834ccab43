#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "augsearch/bilevel_engine.hpp"
#include "augsearch/errors.hpp"
#include "cli.hpp"

namespace augsearch::cli {

namespace fs = std::filesystem;

namespace {

double mean_or_nan(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
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

}  // namespace

RunSeries load_run(const std::string& dir) {
  const auto path = fs::path(dir) / "search_log.csv";
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path.string(), 0, "cannot open search log");
  std::stringstream ss;
  ss << is.rdbuf();
  SearchLog log;
  try {
    log = SearchLog::from_csv(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }

  RunSeries run;
  run.name = fs::path(dir).filename().string();
  if (run.name.empty()) run.name = fs::path(dir).parent_path().filename().string();
  std::vector<double> train, val;
  auto flush = [&](const StepRecord& last) {
    run.epochs.push_back({last.epoch, mean_or_nan(train), mean_or_nan(val), last.entropy_mean, last.delta});
    train.clear();
    val.clear();
  };
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto& r = log.records[i];
    train.push_back(mean_or_nan(r.train_losses));
    if (!r.val_losses.empty()) val.push_back(mean_or_nan(r.val_losses));
    run.val_loss_by_step.push_back(mean_or_nan(r.val_losses));
    if (i + 1 == log.records.size() || log.records[i + 1].epoch != r.epoch) flush(r);
  }
  return run;
}

std::string summary_csv(const std::vector<RunSeries>& runs) {
  std::string out = "run,epoch,train_loss_mean,val_loss_mean,entropy_mean,delta\n";
  for (const auto& run : runs)
    for (const auto& e : run.epochs)
      out += run.name + ',' + std::to_string(e.epoch) + ',' + num(e.train_loss_mean) + ',' + num(e.val_loss_mean) +
             ',' + num(e.entropy_mean) + ',' + num(e.delta) + '\n';
  return out;
}

std::string loss_chart_svg(const std::vector<RunSeries>& runs) {
  constexpr double W = 720, H = 420, L = 60, R = 160, T = 30, B = 50;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::size_t max_steps = 1;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : runs) {
    max_steps = std::max(max_steps, r.val_loss_by_step.size());
    for (double v : r.val_loss_by_step)
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  auto x_of = [&](std::size_t i) {
    return L + (W - L - R) * (max_steps <= 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(max_steps - 1));
  };
  auto y_of = [&](double v) { return T + (H - T - B) * (hi - v) / (hi - lo); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"13\">step</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">validation loss</text>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << y_of(v) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << num(v)
       << "</text>\n";
  }
  os << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\" font-size=\"11\">0</text>\n";
  os << "<text x=\"" << W - R << "\" y=\"" << H - B + 16 << "\" text-anchor=\"end\" font-size=\"11\">" << max_steps - 1
     << "</text>\n";

  for (std::size_t r = 0; r < runs.size(); ++r) {
    const char* color = colors[r % std::size(colors)];
    os << "<g class=\"series\" data-run=\"" << xml_escape(runs[r].name) << "\">\n";
    // Steps without lookaheads break the line into segments.
    std::string pts;
    auto flush = [&] {
      if (!pts.empty())
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"" << pts << "\"/>\n";
      pts.clear();
    };
    for (std::size_t i = 0; i < runs[r].val_loss_by_step.size(); ++i) {
      const double v = runs[r].val_loss_by_step[i];
      if (!std::isfinite(v)) {
        flush();
        continue;
      }
      pts += num(x_of(i)) + ',' + num(y_of(v)) + ' ';
    }
    flush();
    os << "</g>\n";
    const double ly = T + 18.0 * static_cast<double>(r);
    os << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 32 << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\" font-size=\"12\">" << xml_escape(runs[r].name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace augsearch::cli
