#pragma once

// Weakly supervised branch: two parallel scoring streams over region
// features. The classification stream is a softmax over classes within each
// region; the localization stream is a softmax over regions within each
// class. Their elementwise product gives per-region detection scores whose
// per-class sums form the image-level prediction, which always lies strictly
// inside (0,1).

#include <algorithm>
#include <span>
#include <vector>

#include "codetect/box.hpp"
#include "codetect/errors.hpp"
#include "codetect/eval.hpp"
#include "codetect/model.hpp"
#include "codetect/rng.hpp"
#include "codetect/tape.hpp"

namespace codetect {

struct WeakScores {
  Value s_cls;  // (B,C), rows sum to 1
  Value s_loc;  // (B,C), columns sum to 1
  Value p;      // (B,C), elementwise product
  Value y_hat;  // (C), per-class sums of p
  int n_regions = 0;
  int n_classes = 0;
};

inline WeakScores score_regions(Tape& t, Value region_feats, int n_classes) {
  const auto& fs = t.shape(region_feats);
  if (fs.size() != 2) throw invalid_input("score_regions: expected (B,D) region features");
  if (fs[0] == 0) throw invalid_input("score_regions: no proposals");
  WeakScores ws;
  ws.n_regions = fs[0];
  ws.n_classes = n_classes;
  Value cls_logits = t.fully_connected(region_feats, t.param("wcls.w"), t.param("wcls.b"));
  Value loc_logits = t.fully_connected(region_feats, t.param("wloc.w"), t.param("wloc.b"));
  ws.s_cls = t.softmax(cls_logits, 1);
  ws.s_loc = t.softmax(loc_logits, 0);
  ws.p = t.mul(ws.s_cls, ws.s_loc);
  ws.y_hat = t.sum_axis(ws.p, 0);
  return ws;
}

/// Multi-label binary cross-entropy of the image-level prediction against a
/// 0/1 label vector.
inline Value image_classification_loss(Tape& t, Value y_hat, std::span<const double> y) {
  return t.multilabel_bce(y_hat, y);
}

// One-hot pseudo targets: for each positive class the single best-scored
// region (ties to the lowest region index); all zeros for negative classes.
// Targets are plain constants and never carry gradient.
struct MaxoutTargets {
  int n_regions = 0;
  int n_classes = 0;
  std::vector<double> p_hat;  // (B,C) row-major
  std::vector<int> selected;  // per class: winning region index, -1 for negatives

  double at(int j, int c) const {
    return p_hat[static_cast<std::size_t>(j) * n_classes + c];
  }
};

inline MaxoutTargets maxout(const std::vector<double>& p, int n_regions, int n_classes,
                            std::span<const double> y) {
  if (static_cast<int>(p.size()) != n_regions * n_classes)
    throw invalid_input("maxout: score matrix size mismatch");
  if (static_cast<int>(y.size()) != n_classes)
    throw invalid_input("maxout: label size mismatch");
  MaxoutTargets mt;
  mt.n_regions = n_regions;
  mt.n_classes = n_classes;
  mt.p_hat.assign(p.size(), 0.0);
  mt.selected.assign(static_cast<std::size_t>(n_classes), -1);
  for (int c = 0; c < n_classes; ++c) {
    if (y[static_cast<std::size_t>(c)] != 1.0) continue;
    int best_j = 0;
    double best = p[static_cast<std::size_t>(c)];
    for (int j = 1; j < n_regions; ++j) {
      const double v = p[static_cast<std::size_t>(j) * n_classes + c];
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    mt.selected[static_cast<std::size_t>(c)] = best_j;
    mt.p_hat[static_cast<std::size_t>(best_j) * n_classes + c] = 1.0;
  }
  return mt;
}

// Proposal grid for the weak branch: a fixed lattice of square boxes at a few
// sizes, plus per-box jitter. Sizes are expressed at the base image size and
// scale with the actual image.
inline std::vector<Box> weak_proposal_boxes(int width, int height, int count,
                                            const ModelConfig& mc, Rng& rng) {
  const double rel = static_cast<double>(std::min(width, height)) /
                     static_cast<double>(mc.base_image_size);
  const double min_side = 4.0 * rel;
  std::vector<Box> cand;
  for (double s0 : mc.weak_sizes) {
    const double s = s0 * rel;
    for (int gy = 0; gy < mc.weak_grid; ++gy)
      for (int gx = 0; gx < mc.weak_grid; ++gx) {
        const double cx = (gx + 1) * static_cast<double>(width) / (mc.weak_grid + 1);
        const double cy = (gy + 1) * static_cast<double>(height) / (mc.weak_grid + 1);
        cand.push_back(Box{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
      }
  }
  std::vector<int> order(cand.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);

  auto fit = [&](Box b) {
    b = clip_box(b, static_cast<double>(width), static_cast<double>(height));
    if (b.x2 - b.x1 < min_side) {
      const double cx = std::clamp(b.cx(), min_side / 2, width - min_side / 2);
      b.x1 = cx - min_side / 2;
      b.x2 = cx + min_side / 2;
    }
    if (b.y2 - b.y1 < min_side) {
      const double cy = std::clamp(b.cy(), min_side / 2, height - min_side / 2);
      b.y1 = cy - min_side / 2;
      b.y2 = cy + min_side / 2;
    }
    return b;
  };

  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::size_t k = 0; k < order.size() && static_cast<int>(out.size()) < count; ++k) {
    Box b = cand[static_cast<std::size_t>(order[k])];
    const double jx = rng.uniform(-mc.weak_jitter_pos, mc.weak_jitter_pos) * rel;
    const double jy = rng.uniform(-mc.weak_jitter_pos, mc.weak_jitter_pos) * rel;
    const double fw = std::exp(rng.uniform(-mc.weak_jitter_scale, mc.weak_jitter_scale));
    const double fh = std::exp(rng.uniform(-mc.weak_jitter_scale, mc.weak_jitter_scale));
    const double cx = b.cx() + jx, cy = b.cy() + jy;
    const double hw = 0.5 * b.width() * fw, hh = 0.5 * b.height() * fh;
    out.push_back(fit(Box{cx - hw, cy - hh, cx + hw, cy + hh}));
  }
  while (static_cast<int>(out.size()) < count) {  // grid exhausted: random fill
    const double s = rng.uniform(min_side * 2, 0.5 * std::min(width, height));
    const double cx = rng.uniform(s / 2, width - s / 2);
    const double cy = rng.uniform(s / 2, height - s / 2);
    out.push_back(fit(Box{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2}));
  }
  return out;
}

// Bottom-up color-contrast proposals, standing in for an external proposal
// method: pixels far from the background's median color are grouped into
// connected components at several thresholds, their boxes become candidates,
// and jittered copies plus a sparse grid fill the budget. Deterministic for a
// fixed rng.
struct SceneImageRef {
  int width = 0;
  int height = 0;
  const std::uint8_t* rgb = nullptr;  // row-major interleaved

  double at(int y, int x, int ch) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + ch] / 255.0;
  }
};

inline std::vector<Box> blob_proposal_boxes(const SceneImageRef& img, int count,
                                            const ModelConfig& mc, Rng& rng) {
  const int W = img.width, H = img.height;
  const double rel = static_cast<double>(std::min(W, H)) / mc.base_image_size;

  // background color: per-channel median over all pixels
  std::array<double, 3> med{};
  {
    std::vector<double> chan(static_cast<std::size_t>(W) * H);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) chan[static_cast<std::size_t>(y) * W + x] = img.at(y, x, c);
      auto mid = chan.begin() + chan.size() / 2;
      std::nth_element(chan.begin(), mid, chan.end());
      med[static_cast<std::size_t>(c)] = *mid;
    }
  }
  std::vector<double> fg(static_cast<std::size_t>(W) * H);
  double peak = 0.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double d2 = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double d = img.at(y, x, c) - med[static_cast<std::size_t>(c)];
        d2 += d * d;
      }
      const double v = std::sqrt(d2);
      fg[static_cast<std::size_t>(y) * W + x] = v;
      peak = std::max(peak, v);
    }

  const double min_area = 16.0 * rel * rel;
  std::vector<Box> cand;
  std::vector<int> comp(static_cast<std::size_t>(W) * H);
  for (double frac : {0.35, 0.5, 0.65}) {
    const double thr = frac * peak;
    std::fill(comp.begin(), comp.end(), -1);
    int next = 0;
    for (int y0 = 0; y0 < H; ++y0)
      for (int x0 = 0; x0 < W; ++x0) {
        const std::size_t i0 = static_cast<std::size_t>(y0) * W + x0;
        if (comp[i0] >= 0 || fg[i0] < thr) continue;
        // flood fill one component, tracking its extent
        int minx = x0, maxx = x0, miny = y0, maxy = y0, area = 0;
        std::vector<int> stack{static_cast<int>(i0)};
        comp[i0] = next;
        while (!stack.empty()) {
          const int i = stack.back();
          stack.pop_back();
          const int y = i / W, x = i % W;
          ++area;
          minx = std::min(minx, x);
          maxx = std::max(maxx, x);
          miny = std::min(miny, y);
          maxy = std::max(maxy, y);
          const int ns[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
          for (const auto& nb : ns) {
            if (nb[0] < 0 || nb[0] >= W || nb[1] < 0 || nb[1] >= H) continue;
            const std::size_t j = static_cast<std::size_t>(nb[1]) * W + nb[0];
            if (comp[j] < 0 && fg[j] >= thr) {
              comp[j] = next;
              stack.push_back(static_cast<int>(j));
            }
          }
        }
        ++next;
        if (area < min_area) continue;
        Box b{static_cast<double>(minx), static_cast<double>(miny),
              static_cast<double>(maxx + 1), static_cast<double>(maxy + 1)};
        if (b.width() > 0.8 * W && b.height() > 0.8 * H) continue;  // background-wide
        bool dup = false;
        for (const auto& ex : cand)
          if (iou(ex, b) > 0.85) dup = true;
        if (!dup) cand.push_back(b);
        // a wide or tall component may be several adjacent objects: offer
        // the two halves along the long axis as well
        if (b.width() > 1.5 * b.height() && b.width() > 2 * min_area / b.height()) {
          cand.push_back(Box{b.x1, b.y1, b.cx(), b.y2});
          cand.push_back(Box{b.cx(), b.y1, b.x2, b.y2});
        } else if (b.height() > 1.5 * b.width()) {
          cand.push_back(Box{b.x1, b.y1, b.x2, b.cy()});
          cand.push_back(Box{b.x1, b.cy(), b.x2, b.y2});
        }
      }
  }

  std::vector<Box> out;
  auto clip_fit = [&](Box b) {
    b = clip_box(b, static_cast<double>(W), static_cast<double>(H));
    const double min_side = 4.0 * rel;
    if (b.width() < min_side) {
      const double cx = std::clamp(b.cx(), min_side / 2, W - min_side / 2);
      b.x1 = cx - min_side / 2;
      b.x2 = cx + min_side / 2;
    }
    if (b.height() < min_side) {
      const double cy = std::clamp(b.cy(), min_side / 2, H - min_side / 2);
      b.y1 = cy - min_side / 2;
      b.y2 = cy + min_side / 2;
    }
    return b;
  };
  for (const auto& b : cand) {
    if (static_cast<int>(out.size()) >= count) break;
    out.push_back(clip_fit(b));
  }
  // jittered copies of the blob boxes fill most of the budget
  const int n_grid = std::min(count / 4, count - static_cast<int>(out.size()));
  while (!cand.empty() && static_cast<int>(out.size()) < count - n_grid) {
    const Box& b = cand[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(cand.size())))];
    const double jx = rng.uniform(-2.0, 2.0) * rel, jy = rng.uniform(-2.0, 2.0) * rel;
    const double fw = std::exp(rng.uniform(-0.12, 0.18));
    const double fh = std::exp(rng.uniform(-0.12, 0.18));
    const double cx = b.cx() + jx, cy = b.cy() + jy;
    const double hw = 0.5 * b.width() * fw, hh = 0.5 * b.height() * fh;
    out.push_back(clip_fit(Box{cx - hw, cy - hh, cx + hw, cy + hh}));
  }
  // grid fallback keeps coverage when color contrast fails
  Rng grid_rng(rng.uniform_int(0, 1 << 30));
  auto grid = weak_proposal_boxes(W, H, count - static_cast<int>(out.size()), mc, grid_rng);
  out.insert(out.end(), grid.begin(), grid.end());
  return out;
}

// Score filter followed by per-class NMS over the raw proposal boxes. The
// weak branch performs no box regression.
inline std::vector<DetectionRecord> weak_detections_from_scores(
    const std::vector<double>& p, int n_regions, int n_classes, const std::vector<Box>& boxes,
    double score_threshold, double nms_threshold, int image_id) {
  if (static_cast<int>(boxes.size()) != n_regions)
    throw invalid_input("weak_detections: box count mismatch");
  std::vector<DetectionRecord> out;
  for (int c = 0; c < n_classes; ++c) {
    std::vector<Box> cb;
    std::vector<double> cs;
    for (int j = 0; j < n_regions; ++j) {
      const double s = p[static_cast<std::size_t>(j) * n_classes + c];
      if (s >= score_threshold) {
        cb.push_back(boxes[static_cast<std::size_t>(j)]);
        cs.push_back(s);
      }
    }
    for (int k : nms(cb, cs, nms_threshold))
      out.push_back(DetectionRecord{image_id, c, cs[static_cast<std::size_t>(k)],
                                    cb[static_cast<std::size_t>(k)]});
  }
  return out;
}

// Full forward pass of the weak detector on one image.
inline std::vector<DetectionRecord> weak_detect(Registry& reg, const ModelConfig& mc,
                                                const Tensor& image,
                                                const std::vector<Box>& proposals,
                                                double score_threshold, double nms_threshold,
                                                int image_id) {
  Tape t(reg);
  Value img = t.constant(image);
  Value fmap = backbone_forward(t, mc, img);
  Value pooled = t.roi_pool_rows(fmap, proposals, mc.roi_bins, mc.roi_bins,
                                 1.0 / mc.feature_stride);
  Value feats = shared_fc_forward(t, mc, pooled);
  WeakScores ws = score_regions(t, feats, mc.n_classes);
  return weak_detections_from_scores(t.val(ws.p), ws.n_regions, ws.n_classes, proposals,
                                     score_threshold, nms_threshold, image_id);
}

}  // namespace codetect
