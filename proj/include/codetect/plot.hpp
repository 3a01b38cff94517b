#pragma once

// SVG line chart of mAP versus epoch, one polyline per detector tag. Every
// data point carries a machine-readable <title> ("TAG epoch=E map=V") so the
// chart can be parsed back and compared against the log it was drawn from.
// The raw CSV is always written alongside.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "codetect/errors.hpp"
#include "codetect/runlog.hpp"

namespace codetect {

// Returns false (and writes nothing) on an empty log.
inline bool emit_plots(const RunLog& log, const std::filesystem::path& svg_path,
                       const std::filesystem::path& csv_path) {
  write_runlog_csv(csv_path, log);
  if (log.rows.empty()) return false;

  int e0 = log.rows.front().epoch, e1 = e0;
  double y1 = 0.0;
  for (const auto& r : log.rows) {
    e0 = std::min(e0, r.epoch);
    e1 = std::max(e1, r.epoch);
    y1 = std::max(y1, r.map);
  }
  if (e1 == e0) e1 = e0 + 1;
  y1 = std::max(0.05, y1 * 1.1);

  const double W = 640, H = 480, ml = 64, mr = 24, mt = 32, mb = 48;
  const double pw = W - ml - mr, ph = H - mt - mb;
  auto px = [&](double e) { return ml + (e - e0) / static_cast<double>(e1 - e0) * pw; };
  auto py = [&](double v) { return mt + (1.0 - v / y1) * ph; };

  static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"};

  std::ofstream os(svg_path, std::ios::trunc);
  if (!os) throw config_error("plot: cannot open '" + svg_path.string() + "' for writing");
  char buf[512];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" "
        "viewBox=\"0 0 640 480\">\n";
  os << "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", ml,
                mt + ph, ml + pw, mt + ph);
  os << buf;
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n", ml,
                mt, ml, mt + ph);
  os << buf;
  for (int k = 0; k <= 5; ++k) {  // y ticks
    const double v = y1 * k / 5.0;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"end\">%.2f</text>\n",
                  ml - 6, py(v) + 4, v);
    os << buf;
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/>\n", ml,
                  py(v), ml + pw, py(v));
    os << buf;
  }
  for (int e = e0; e <= e1; ++e) {  // x ticks
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" text-anchor=\"middle\">%d</text>\n",
                  px(e), mt + ph + 16, e);
    os << buf;
  }
  os << "<text x=\"320\" y=\"470\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n";
  os << "<text x=\"16\" y=\"240\" font-size=\"12\" transform=\"rotate(-90 16 240)\" "
        "text-anchor=\"middle\">mAP</text>\n";

  const auto tags = log.tags_in_order();
  for (std::size_t ti = 0; ti < tags.size(); ++ti) {
    const char* color = kPalette[ti % 5];
    std::string points;
    for (const auto& r : log.rows) {
      if (r.tag != tags[ti]) continue;
      std::snprintf(buf, sizeof buf, "%.3f,%.3f ", px(r.epoch), py(r.map));
      points += buf;
    }
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\""
       << points << "\"/>\n";
    for (const auto& r : log.rows) {
      if (r.tag != tags[ti]) continue;
      std::snprintf(buf, sizeof buf,
                    "<circle cx=\"%.3f\" cy=\"%.3f\" r=\"3\" fill=\"%s\"><title>%s epoch=%d "
                    "map=%.17g</title></circle>\n",
                    px(r.epoch), py(r.map), color, r.tag.c_str(), r.epoch, r.map);
      os << buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"12\" height=\"12\" fill=\"%s\"/>"
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\">%s</text>\n",
                  ml + pw - 110.0, mt + 8 + 18.0 * ti, color, ml + pw - 92.0,
                  mt + 18 + 18.0 * ti, tags[ti].c_str());
    os << buf;
  }
  os << "</svg>\n";
  return true;
}

// Parse the data points back out of an emitted chart: (tag, epoch, map).
struct PlotPoint {
  std::string tag;
  int epoch = 0;
  double map = 0.0;
};

inline std::vector<PlotPoint> parse_plot_points(const std::filesystem::path& svg_path) {
  std::ifstream is(svg_path);
  if (!is) throw config_error("plot: cannot open '" + svg_path.string() + "'");
  std::vector<PlotPoint> out;
  std::string line;
  while (std::getline(is, line)) {
    const auto at = line.find("<title>");
    if (at == std::string::npos) continue;
    const auto end = line.find("</title>", at);
    std::string body = line.substr(at + 7, end - at - 7);
    PlotPoint p;
    const auto e_at = body.find(" epoch=");
    const auto m_at = body.find(" map=");
    if (e_at == std::string::npos || m_at == std::string::npos) continue;
    p.tag = body.substr(0, e_at);
    p.epoch = std::stoi(body.substr(e_at + 7));
    p.map = std::stod(body.substr(m_at + 5));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace codetect
