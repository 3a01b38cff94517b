#pragma once

// Detection evaluation: per-class average precision with all-point
// interpolation, mAP over classes that have ground truth, and CorLoc on
// labeled images. A prediction counts as a true positive when its IoU with an
// unmatched ground-truth box strictly exceeds 0.5.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "codetect/box.hpp"
#include "codetect/errors.hpp"

namespace codetect {

struct GtBox {
  Box box;
  int cls = 0;
};

struct DetectionRecord {
  int image_id = 0;
  int cls = 0;
  double score = 0.0;
  Box box;
};

using GtMap = std::map<int, std::vector<GtBox>>;       // image id -> boxes
using LabelMap = std::map<int, std::vector<double>>;   // image id -> 0/1 label vector

inline constexpr double kTpIouThreshold = 0.5;

namespace detail {

// Indices of `dets` restricted to class c, ordered by descending score with
// ties broken by record index.
inline std::vector<int> ranked_class_indices(const std::vector<DetectionRecord>& dets, int c) {
  std::vector<int> idx;
  for (int i = 0; i < static_cast<int>(dets.size()); ++i)
    if (dets[static_cast<std::size_t>(i)].cls == c) idx.push_back(i);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const double sa = dets[static_cast<std::size_t>(a)].score;
    const double sb = dets[static_cast<std::size_t>(b)].score;
    if (sa != sb) return sa > sb;
    return a < b;
  });
  return idx;
}

}  // namespace detail

// Average precision for one class. Returns -1 when the class has no ground
// truth anywhere (AP undefined; the class is excluded from mAP).
inline double average_precision(const std::vector<DetectionRecord>& dets, const GtMap& gt,
                                int cls) {
  int n_gt = 0;
  std::map<int, std::vector<bool>> used;  // image id -> gt matched flags
  for (const auto& [img, boxes] : gt) {
    int count = 0;
    for (const auto& g : boxes)
      if (g.cls == cls) ++count;
    n_gt += count;
    used[img] = std::vector<bool>(boxes.size(), false);
  }
  if (n_gt == 0) return -1.0;

  const std::vector<int> order = detail::ranked_class_indices(dets, cls);
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (int idx : order) {
    const auto& d = dets[static_cast<std::size_t>(idx)];
    double best = 0.0;
    int best_g = -1;
    auto it = gt.find(d.image_id);
    if (it != gt.end()) {
      const auto& boxes = it->second;
      for (int g = 0; g < static_cast<int>(boxes.size()); ++g) {
        if (boxes[static_cast<std::size_t>(g)].cls != cls) continue;
        const double v = iou(d.box, boxes[static_cast<std::size_t>(g)].box);
        if (v > best) {
          best = v;
          best_g = g;
        }
      }
    }
    if (best > kTpIouThreshold && best_g >= 0 &&
        !used[d.image_id][static_cast<std::size_t>(best_g)]) {
      used[d.image_id][static_cast<std::size_t>(best_g)] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }

  // precision envelope, then rectangle integration over recall
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[static_cast<std::size_t>(i)] =
        std::max(precision[static_cast<std::size_t>(i)], precision[static_cast<std::size_t>(i) + 1]);
  double ap = 0.0;
  double prev_r = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_r) * precision[i];
    prev_r = recall[i];
  }
  return ap;
}

/// Mean AP over the classes (0..n_classes-1) that have at least one ground
/// truth instance.
inline double mean_average_precision(const std::vector<DetectionRecord>& dets, const GtMap& gt,
                                     int n_classes) {
  double acc = 0.0;
  int n = 0;
  for (int c = 0; c < n_classes; ++c) {
    const double ap = average_precision(dets, gt, c);
    if (ap >= 0.0) {
      acc += ap;
      ++n;
    }
  }
  return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

struct CorLocResult {
  std::vector<double> per_class;  // -1 when the class has no positive image
  double mean = 0.0;
};

/// Fraction of positive images (label contains the class) whose single
/// top-scoring box for that class overlaps some ground-truth instance of the
/// class with IoU > 0.5.
inline CorLocResult corloc(const std::vector<DetectionRecord>& dets, const GtMap& gt,
                           const LabelMap& labels, int n_classes) {
  CorLocResult out;
  out.per_class.assign(static_cast<std::size_t>(n_classes), -1.0);
  double mean_acc = 0.0;
  int mean_n = 0;
  for (int c = 0; c < n_classes; ++c) {
    int n_pos = 0, n_hit = 0;
    for (const auto& [img, label] : labels) {
      if (c >= static_cast<int>(label.size()) || label[static_cast<std::size_t>(c)] != 1.0)
        continue;
      ++n_pos;
      const DetectionRecord* top = nullptr;
      for (const auto& d : dets) {
        if (d.image_id != img || d.cls != c) continue;
        if (!top || d.score > top->score) top = &d;
      }
      if (!top) continue;
      auto it = gt.find(img);
      if (it == gt.end()) continue;
      for (const auto& g : it->second)
        if (g.cls == c && iou(top->box, g.box) > kTpIouThreshold) {
          ++n_hit;
          break;
        }
    }
    if (n_pos > 0) {
      out.per_class[static_cast<std::size_t>(c)] =
          static_cast<double>(n_hit) / static_cast<double>(n_pos);
      mean_acc += out.per_class[static_cast<std::size_t>(c)];
      ++mean_n;
    }
  }
  out.mean = mean_n == 0 ? 0.0 : mean_acc / static_cast<double>(mean_n);
  return out;
}

// ---- detection record CSV (image_id, class, score, x1, y1, x2, y2) ----

inline void write_detections_csv(const std::filesystem::path& path,
                                 const std::vector<DetectionRecord>& dets) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw config_error("cannot open '" + path.string() + "' for writing");
  os << "image_id,class,score,x1,y1,x2,y2\n";
  char buf[256];
  for (const auto& d : dets) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", d.image_id, d.cls,
                  d.score, d.box.x1, d.box.y1, d.box.x2, d.box.y2);
    os << buf;
  }
}

inline std::vector<DetectionRecord> read_detections_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw config_error("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || line.rfind("image_id,", 0) != 0)
    throw config_error("detections csv: missing header in '" + path.string() + "'");
  std::vector<DetectionRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    DetectionRecord d;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    if (!(ss >> d.image_id >> d.cls >> d.score >> d.box.x1 >> d.box.y1 >> d.box.x2 >> d.box.y2))
      throw config_error("detections csv: malformed row '" + line + "'");
    out.push_back(d);
  }
  return out;
}

}  // namespace codetect
