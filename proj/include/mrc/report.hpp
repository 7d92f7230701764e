#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mrc/datamodel.hpp"
#include "mrc/errors.hpp"
#include "mrc/eval.hpp"

namespace mrc {

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

} // namespace detail

inline void write_rows_csv(const std::filesystem::path& path, const std::vector<EvalRow>& rows) {
  auto out = detail::open_out(path);
  out << "id,pred,gt,abs_err\n";
  for (const auto& r : rows)
    out << r.id << ',' << detail::fmt_double(r.pred) << ',' << detail::fmt_double(r.gt) << ','
        << detail::fmt_double(r.abs_err()) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<EvalRow> read_rows_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile(path.string());
  std::string line;
  std::getline(in, line);
  if (detail::trim(line) != "id,pred,gt,abs_err") throw MalformedRecord(path.string() + ": bad header");
  std::vector<EvalRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 4) throw MalformedRecord(path.string() + ":" + std::to_string(lineno) + ": expected 4 fields");
    const std::string where = path.string() + ":" + std::to_string(lineno);
    rows.push_back({f[0], detail::parse_coord(f[1], where), detail::parse_coord(f[2], where)});
  }
  return rows;
}

inline nlohmann::json to_json(const Metrics& m, std::size_t n) {
  return {{"n", n}, {"mae", m.mae}, {"mse", m.mse}, {"sum_abs_err", m.sum_abs_err}};
}

inline void write_curve_csv(const std::filesystem::path& path, const Curve& c) {
  auto out = detail::open_out(path);
  out << "fraction,mae,mse\n";
  for (const auto& p : c.points)
    out << detail::fmt_double(p.fraction) << ',' << detail::fmt_double(p.mae) << ','
        << detail::fmt_double(p.mse) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

// Minimal line chart of MAE and MSE against the corrupted fraction.
inline void write_curve_svg(const std::filesystem::path& path, const std::vector<Curve>& curves,
                            const std::string& title) {
  const double W = 480, H = 320, L = 56, R = 16, Tm = 32, B = 44;
  double ymax = 0.0;
  for (const auto& c : curves)
    for (const auto& p : c.points) ymax = std::max({ymax, p.mae, p.mse});
  if (ymax <= 0) ymax = 1.0;
  ymax *= 1.1;
  auto sx = [&](double f) { return L + f * (W - L - R); };
  auto sy = [&](double v) { return H - B - v / ymax * (H - Tm - B); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << Tm << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double f = i / 4.0, v = ymax * i / 4.0;
    s << "<text x=\"" << sx(f) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
      << f << "</text>\n";
    s << "<text x=\"" << L - 6 << "\" y=\"" << sy(v) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
      << detail::fmt_double(std::round(v * 100) / 100) << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 8
    << "\" text-anchor=\"middle\" font-size=\"12\">corrupted fraction</text>\n";
  int ci = 0;
  for (const auto& c : curves) {
    for (int metric = 0; metric < 2; ++metric, ++ci) {
      s << "<polyline fill=\"none\" stroke=\"" << palette[ci % 6] << "\" stroke-width=\"2\""
        << (metric ? " stroke-dasharray=\"5,3\"" : "") << " points=\"";
      for (const auto& p : c.points) s << sx(p.fraction) << ',' << sy(metric ? p.mse : p.mae) << ' ';
      s << "\"/>\n";
      s << "<text x=\"" << W - R - 4 << "\" y=\"" << Tm + 14 * ci + 12 << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
        << palette[ci % 6] << "\">" << c.name << (metric ? " MSE" : " MAE") << "</text>\n";
    }
  }
  s << "</svg>\n";
  auto out = detail::open_out(path);
  out << s.str();
}

struct ReportFiles {
  std::filesystem::path rows_csv, metrics_json;
  std::vector<std::filesystem::path> curve_csvs, plots;
};

// Writes per_image.csv, metrics.json and, per curve, curve_<name>.csv plus
// an SVG plot. No plots are written when there are no curves.
inline ReportFiles report(const EvalResult& result, const std::vector<Curve>& curves,
                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ReportFiles files;
  files.rows_csv = dir / "per_image.csv";
  files.metrics_json = dir / "metrics.json";
  write_rows_csv(files.rows_csv, result.rows);
  nlohmann::json j = to_json(result.metrics, result.rows.size());
  j["curves"] = nlohmann::json::array();
  for (const auto& c : curves) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : c.points) pts.push_back({{"fraction", p.fraction}, {"mae", p.mae}, {"mse", p.mse}});
    j["curves"].push_back({{"name", c.name}, {"points", pts}});
    const auto csv = dir / ("curve_" + c.name + ".csv");
    const auto svg = dir / ("curve_" + c.name + ".svg");
    write_curve_csv(csv, c);
    write_curve_svg(svg, {c}, c.name + " probe");
    files.curve_csvs.push_back(csv);
    files.plots.push_back(svg);
  }
  write_json(files.metrics_json, j);
  return files;
}

} // namespace mrc
