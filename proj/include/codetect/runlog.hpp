#pragma once

// Per-evaluation training log. One row per (epoch, detector tag); epochs are
// appended in increasing order. Loss columns are means over the epoch that
// ended at the evaluation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "codetect/errors.hpp"

namespace codetect {

struct RunRow {
  int epoch = 0;          // epochs completed at evaluation time
  std::string tag;        // I_W, CL_W, CL_S or CS_S
  double map = 0.0;
  double corloc = 0.0;
  double loss_weak = 0.0;
  double cons_total = 0.0;
  double cp_inter = 0.0;
  double cp_inner = 0.0;
  double cl_inter = 0.0;
  double matched_pairs = 0.0;  // mean per step
};

struct RunLog {
  std::vector<RunRow> rows;

  std::vector<std::string> tags_in_order() const {
    std::vector<std::string> tags;
    for (const auto& r : rows)
      if (std::find(tags.begin(), tags.end(), r.tag) == tags.end()) tags.push_back(r.tag);
    return tags;
  }

  const RunRow* first_row(const std::string& tag) const {
    for (const auto& r : rows)
      if (r.tag == tag) return &r;
    return nullptr;
  }

  const RunRow* last_row(const std::string& tag) const {
    const RunRow* out = nullptr;
    for (const auto& r : rows)
      if (r.tag == tag) out = &r;
    return out;
  }
};

inline const char* runlog_csv_header() {
  return "epoch,detector,map,corloc,loss_weak,cons_total,cp_inter,cp_inner,cl_inter,matched_pairs";
}

inline void write_runlog_csv(const std::filesystem::path& path, const RunLog& log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw config_error("runlog: cannot open '" + path.string() + "' for writing");
  os << runlog_csv_header() << "\n";
  char buf[512];
  for (const auto& r : log.rows) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  r.epoch, r.tag.c_str(), r.map, r.corloc, r.loss_weak, r.cons_total, r.cp_inter,
                  r.cp_inner, r.cl_inter, r.matched_pairs);
    os << buf;
  }
}

inline RunLog read_runlog_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw config_error("runlog: cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || line != runlog_csv_header())
    throw config_error("runlog: unexpected header in '" + path.string() + "'");
  RunLog log;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::string copy = line;
    std::replace(copy.begin(), copy.end(), ',', ' ');
    std::istringstream ss(copy);
    RunRow r;
    if (!(ss >> r.epoch >> r.tag >> r.map >> r.corloc >> r.loss_weak >> r.cons_total >>
          r.cp_inter >> r.cp_inner >> r.cl_inter >> r.matched_pairs))
      throw config_error("runlog: malformed row '" + line + "'");
    log.rows.push_back(std::move(r));
  }
  return log;
}

}  // namespace codetect
