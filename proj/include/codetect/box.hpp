#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "codetect/errors.hpp"

namespace codetect {

// Axis-aligned rectangle with continuous corner coordinates.
// Valid boxes have x1 < x2 and y1 < y2; areas are (x2-x1)*(y2-y1) with no
// integer pixel convention.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double area() const { return width() * height(); }

  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
           x1 < x2 && y1 < y2;
  }
};

inline void check_box(const Box& b, const char* who) {
  if (!b.valid()) throw invalid_input(std::string(who) + ": degenerate or non-finite box");
}

/// Intersection over union of two valid boxes; 0 when disjoint.
inline double iou(const Box& a, const Box& b) {
  check_box(a, "iou");
  check_box(b, "iou");
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

// 4-parameter box regression encoding: center offsets normalized by the
// proposal size, plus log scale ratios.
struct Delta {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;
};

/// Encode `target` relative to `proposal`.
inline Delta encode_delta(const Box& proposal, const Box& target) {
  check_box(proposal, "encode_delta");
  check_box(target, "encode_delta");
  Delta d;
  d.dx = (target.cx() - proposal.cx()) / proposal.width();
  d.dy = (target.cy() - proposal.cy()) / proposal.height();
  d.dw = std::log(target.width() / proposal.width());
  d.dh = std::log(target.height() / proposal.height());
  return d;
}

/// Exact inverse of encode_delta. No clipping; callers clip at detection time.
inline Box decode_delta(const Box& proposal, const Delta& d) {
  check_box(proposal, "decode_delta");
  if (!(std::isfinite(d.dx) && std::isfinite(d.dy) && std::isfinite(d.dw) && std::isfinite(d.dh)))
    throw invalid_input("decode_delta: non-finite delta");
  const double cx = proposal.cx() + d.dx * proposal.width();
  const double cy = proposal.cy() + d.dy * proposal.height();
  const double w = proposal.width() * std::exp(d.dw);
  const double h = proposal.height() * std::exp(d.dh);
  if (!(std::isfinite(w) && std::isfinite(h)))
    throw invalid_input("decode_delta: scale overflow");
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

struct Match {
  int strong = -1;
  int weak = -1;
  double iou = 0.0;
};

// Sparse pairing of strong proposals with weak regions. Each strong index
// appears at most once and every stored IoU exceeds the match threshold.
struct MatchSet {
  std::vector<Match> pairs;

  bool empty() const { return pairs.empty(); }
  int size() const { return static_cast<int>(pairs.size()); }
};

/// For each strong box pick the weak box with the highest IoU (ties to the
/// lowest weak index); keep the pair only when that IoU strictly exceeds
/// `threshold`. Strong boxes with no qualifying weak box are left unmatched.
inline MatchSet match_regions(const std::vector<Box>& strong, const std::vector<Box>& weak,
                              double threshold = 0.5) {
  MatchSet out;
  if (strong.empty() || weak.empty()) return out;
  for (int i = 0; i < static_cast<int>(strong.size()); ++i) {
    int best_j = -1;
    double best = -1.0;
    for (int j = 0; j < static_cast<int>(weak.size()); ++j) {
      const double v = iou(strong[static_cast<std::size_t>(i)], weak[static_cast<std::size_t>(j)]);
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best_j >= 0 && best > threshold) out.pairs.push_back(Match{i, best_j, best});
  }
  return out;
}

/// Greedy non-maximum suppression. Boxes are visited in descending score
/// order (ties broken by lower index); a box is suppressed iff its IoU with a
/// previously kept box exceeds `iou_threshold`. Returns kept indices in
/// visit order.
inline std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                            double iou_threshold) {
  if (boxes.size() != scores.size()) throw invalid_input("nms: boxes/scores length mismatch");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  std::vector<int> kept;
  for (int idx : order) {
    bool suppressed = false;
    for (int k : kept) {
      if (iou(boxes[static_cast<std::size_t>(idx)], boxes[static_cast<std::size_t>(k)]) >
          iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

/// Clip a box to [0,w] x [0,h]. May collapse to an empty box; callers check.
inline Box clip_box(const Box& b, double w, double h) {
  Box c;
  c.x1 = std::clamp(b.x1, 0.0, w);
  c.y1 = std::clamp(b.y1, 0.0, h);
  c.x2 = std::clamp(b.x2, 0.0, w);
  c.y2 = std::clamp(b.y2, 0.0, h);
  return c;
}

}  // namespace codetect
