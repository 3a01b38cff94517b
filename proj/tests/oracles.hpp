#pragma once

// Test-only reference implementations, kept independent of the library code
// paths they check.

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "codetect/box.hpp"
#include "codetect/eval.hpp"
#include "codetect/rng.hpp"

namespace oracles {

using codetect::Box;
using codetect::DetectionRecord;
using codetect::GtMap;

// Overlap ratio estimated by counting sample points on a fine grid spanning
// both boxes. Accuracy ~ O(1/side).
inline double iou_raster(const Box& a, const Box& b, int side = 700) {
  const double x0 = std::min(a.x1, b.x1), x1 = std::max(a.x2, b.x2);
  const double y0 = std::min(a.y1, b.y1), y1 = std::max(a.y2, b.y2);
  const double dx = (x1 - x0) / side, dy = (y1 - y0) / side;
  long inter = 0, uni = 0;
  for (int iy = 0; iy < side; ++iy)
    for (int ix = 0; ix < side; ++ix) {
      const double px = x0 + (ix + 0.5) * dx;
      const double py = y0 + (iy + 0.5) * dy;
      const bool in_a = px > a.x1 && px < a.x2 && py > a.y1 && py < a.y2;
      const bool in_b = px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2;
      if (in_a && in_b) ++inter;
      if (in_a || in_b) ++uni;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Independent analytic overlap, written out again on purpose.
inline double iou_direct(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0 || h <= 0) return 0.0;
  const double i = w * h;
  const double ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - i;
  return i / ua;
}

// Suppression by repeated linear scans: pick the best remaining box, retire
// everything it overlaps too much.
inline std::vector<int> nms_oracle(const std::vector<Box>& boxes,
                                   const std::vector<double>& scores, double thr) {
  const int n = static_cast<int>(boxes.size());
  std::vector<bool> gone(static_cast<std::size_t>(n), false);
  std::vector<int> kept;
  for (;;) {
    int best = -1;
    for (int i = 0; i < n; ++i) {
      if (gone[static_cast<std::size_t>(i)]) continue;
      if (best < 0 || scores[static_cast<std::size_t>(i)] > scores[static_cast<std::size_t>(best)])
        best = i;
    }
    if (best < 0) break;
    kept.push_back(best);
    gone[static_cast<std::size_t>(best)] = true;
    for (int i = 0; i < n; ++i)
      if (!gone[static_cast<std::size_t>(i)] &&
          iou_direct(boxes[static_cast<std::size_t>(best)], boxes[static_cast<std::size_t>(i)]) > thr)
        gone[static_cast<std::size_t>(i)] = true;
  }
  return kept;
}

struct MatchPair {
  int strong;
  int weak;
  double iou;
};

// Exhaustive argmax over the full pair matrix.
inline std::vector<MatchPair> match_oracle(const std::vector<Box>& strong,
                                           const std::vector<Box>& weak, double thr) {
  std::vector<MatchPair> out;
  for (int i = 0; i < static_cast<int>(strong.size()); ++i) {
    double best = -1.0;
    int best_j = -1;
    for (int j = 0; j < static_cast<int>(weak.size()); ++j) {
      const double v = iou_direct(strong[static_cast<std::size_t>(i)],
                                  weak[static_cast<std::size_t>(j)]);
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best_j >= 0 && best > thr) out.push_back(MatchPair{i, best_j, best});
  }
  return out;
}

// Average precision by recomputing the greedy assignment from scratch for
// every prefix of the ranked detection list, then integrating an explicitly
// maximized precision envelope.
inline double reference_average_precision(const std::vector<DetectionRecord>& dets,
                                          const GtMap& gt, int cls) {
  int n_gt = 0;
  for (const auto& [img, boxes] : gt)
    for (const auto& g : boxes)
      if (g.cls == cls) ++n_gt;
  if (n_gt == 0) return -1.0;

  std::vector<int> order;
  for (int i = 0; i < static_cast<int>(dets.size()); ++i)
    if (dets[static_cast<std::size_t>(i)].cls == cls) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (dets[static_cast<std::size_t>(a)].score != dets[static_cast<std::size_t>(b)].score)
      return dets[static_cast<std::size_t>(a)].score > dets[static_cast<std::size_t>(b)].score;
    return a < b;
  });

  auto prefix_tp = [&](int k) {
    std::map<int, std::vector<bool>> used;
    for (const auto& [img, boxes] : gt) used[img] = std::vector<bool>(boxes.size(), false);
    int tp = 0;
    for (int r = 0; r < k; ++r) {
      const auto& d = dets[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])];
      auto it = gt.find(d.image_id);
      if (it == gt.end()) continue;
      double best = 0.0;
      int best_g = -1;
      for (int g = 0; g < static_cast<int>(it->second.size()); ++g) {
        if (it->second[static_cast<std::size_t>(g)].cls != cls) continue;
        const double v = iou_direct(d.box, it->second[static_cast<std::size_t>(g)].box);
        if (v > best) {
          best = v;
          best_g = g;
        }
      }
      if (best > 0.5 && best_g >= 0 && !used[d.image_id][static_cast<std::size_t>(best_g)]) {
        used[d.image_id][static_cast<std::size_t>(best_g)] = true;
        ++tp;
      }
    }
    return tp;
  };

  const int n = static_cast<int>(order.size());
  std::vector<double> recall(static_cast<std::size_t>(n)), prec(static_cast<std::size_t>(n));
  for (int k = 1; k <= n; ++k) {
    const int tp = prefix_tp(k);
    recall[static_cast<std::size_t>(k - 1)] = static_cast<double>(tp) / n_gt;
    prec[static_cast<std::size_t>(k - 1)] = static_cast<double>(tp) / k;
  }
  double ap = 0.0, prev_r = 0.0;
  for (int k = 0; k < n; ++k) {
    double env = 0.0;
    for (int j = k; j < n; ++j) env = std::max(env, prec[static_cast<std::size_t>(j)]);
    ap += (recall[static_cast<std::size_t>(k)] - prev_r) * env;
    prev_r = recall[static_cast<std::size_t>(k)];
  }
  return ap;
}

inline double reference_map(const std::vector<DetectionRecord>& dets, const GtMap& gt,
                            int n_classes) {
  double acc = 0.0;
  int n = 0;
  for (int c = 0; c < n_classes; ++c) {
    const double ap = reference_average_precision(dets, gt, c);
    if (ap >= 0.0) {
      acc += ap;
      ++n;
    }
  }
  return n == 0 ? 0.0 : acc / n;
}

inline Box random_box(codetect::Rng& rng, double extent = 20.0, double min_side = 1.0,
                      double max_side = 8.0) {
  const double w = rng.uniform(min_side, max_side);
  const double h = rng.uniform(min_side, max_side);
  const double x = rng.uniform(0.0, extent - w);
  const double y = rng.uniform(0.0, extent - h);
  return Box{x, y, x + w, y + h};
}

}  // namespace oracles
