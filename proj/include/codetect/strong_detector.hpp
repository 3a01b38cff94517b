#pragma once

// Strongly supervised branch: dense square anchors scored by a 1x1
// objectness conv, top-K + NMS proposal selection, then per-proposal
// classification over C classes + background and class-wise box deltas.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "codetect/box.hpp"
#include "codetect/errors.hpp"
#include "codetect/eval.hpp"
#include "codetect/model.hpp"
#include "codetect/smooth_l1.hpp"
#include "codetect/tape.hpp"

namespace codetect {

struct ProposalSet {
  std::vector<Box> boxes;
  std::vector<double> objectness;   // sigmoid scores in [0,1]
  std::vector<int> anchor_index;    // index into the dense anchor list
};

struct StrongPredictions {
  Value p;  // (B, C+1) softmax rows, background last
  Value t;  // (B, 4*C) class-wise deltas, layout [c*4 + k]
  int n_proposals = 0;
  int n_classes = 0;
};

// Dense anchor list in scan order: rows, then columns, then scales. One
// square anchor per feature cell per scale, clipped to the image.
inline std::vector<Box> make_anchors(const ModelConfig& mc, int feat_h, int feat_w, int width,
                                     int height) {
  const double rel = static_cast<double>(std::min(width, height)) /
                     static_cast<double>(mc.base_image_size);
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(feat_h) * feat_w * mc.anchor_sizes.size());
  for (int y = 0; y < feat_h; ++y)
    for (int x = 0; x < feat_w; ++x)
      for (double s0 : mc.anchor_sizes) {
        const double s = s0 * rel;
        const double cx = (x + 0.5) * mc.feature_stride;
        const double cy = (y + 0.5) * mc.feature_stride;
        Box b{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2};
        anchors.push_back(clip_box(b, static_cast<double>(width), static_cast<double>(height)));
      }
  return anchors;
}

// Flat objectness-logit index for anchor a, given the (S, fh, fw) logit map.
inline int anchor_logit_index(int anchor, int n_scales, int feat_w, int feat_h) {
  const int s = anchor % n_scales;
  const int cell = anchor / n_scales;
  const int y = cell / feat_w;
  const int x = cell % feat_w;
  return (s * feat_h + y) * feat_w + x;
}

struct ProposalSelection {
  int top_k = 64;
  double nms_threshold = 0.7;
  int cap = 32;
};

// Rank anchors by objectness (ties to the lower anchor index), keep the top
// K, suppress at the NMS threshold, cap the survivor count. Deterministic.
inline ProposalSet select_proposals(const std::vector<Box>& anchors,
                                    const std::vector<double>& scores,
                                    const ProposalSelection& sel) {
  if (anchors.size() != scores.size())
    throw invalid_input("select_proposals: anchor/score length mismatch");
  std::vector<int> order(anchors.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  if (static_cast<int>(order.size()) > sel.top_k) order.resize(static_cast<std::size_t>(sel.top_k));

  std::vector<Box> top_boxes;
  std::vector<double> top_scores;
  for (int a : order) {
    top_boxes.push_back(anchors[static_cast<std::size_t>(a)]);
    top_scores.push_back(scores[static_cast<std::size_t>(a)]);
  }
  ProposalSet out;
  for (int k : nms(top_boxes, top_scores, sel.nms_threshold)) {
    if (static_cast<int>(out.boxes.size()) >= sel.cap) break;
    out.boxes.push_back(top_boxes[static_cast<std::size_t>(k)]);
    out.objectness.push_back(top_scores[static_cast<std::size_t>(k)]);
    out.anchor_index.push_back(order[static_cast<std::size_t>(k)]);
  }
  return out;
}

struct StrongForward {
  Value rpn_logits;  // (S, fh, fw)
  std::vector<Box> anchors;
  ProposalSet proposals;
  StrongPredictions pred;
  int feat_h = 0;
  int feat_w = 0;
};

// Objectness scoring plus proposal selection over the shared feature map.
inline std::pair<ProposalSet, Value> generate_proposals(Tape& t, const ModelConfig& mc,
                                                        Value fmap, int width, int height,
                                                        const ProposalSelection& sel,
                                                        std::vector<Box>* anchors_out = nullptr) {
  const auto& fs = t.shape(fmap);
  const int fh = fs[1], fw = fs[2];
  Value logits = t.conv2d(t.rms_normalize_cells(fmap), t.param("rpn.w"),
                          t.param("rpn.b"), Tape::Padding::valid);
  const std::vector<Box> anchors = make_anchors(mc, fh, fw, width, height);
  const int S = static_cast<int>(mc.anchor_sizes.size());
  const auto& lv = t.val(logits);
  std::vector<double> scores(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const double z = lv[static_cast<std::size_t>(
        anchor_logit_index(static_cast<int>(a), S, fw, fh))];
    scores[a] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  if (anchors_out) *anchors_out = anchors;
  return {select_proposals(anchors, scores, sel), logits};
}

// Classification + regression heads over shared region features.
inline StrongPredictions predict(Tape& t, const ModelConfig& mc, Value region_feats) {
  const auto& fs = t.shape(region_feats);
  if (fs.size() != 2) throw invalid_input("predict: expected (B,D) region features");
  StrongPredictions sp;
  sp.n_proposals = fs[0];
  sp.n_classes = mc.n_classes;
  Value cls_logits = t.fully_connected(region_feats, t.param("scls.w"), t.param("scls.b"));
  sp.p = t.softmax(cls_logits, 1);
  // the small output scale keeps initial deltas near zero so regression
  // starts from the identity decode and trains in the quadratic regime
  sp.t = t.scale(t.fully_connected(region_feats, t.param("sreg.w"), t.param("sreg.b")), 0.1);
  return sp;
}

// Full strong-branch forward over an image feature map.
inline StrongForward strong_forward(Tape& t, const ModelConfig& mc, Value fmap, int width,
                                    int height, const ProposalSelection& sel) {
  StrongForward sf;
  const auto& fs = t.shape(fmap);
  sf.feat_h = fs[1];
  sf.feat_w = fs[2];
  auto [props, logits] = generate_proposals(t, mc, fmap, width, height, sel, &sf.anchors);
  sf.proposals = std::move(props);
  sf.rpn_logits = logits;
  Value pooled = t.roi_pool_rows(fmap, sf.proposals.boxes, mc.roi_bins, mc.roi_bins,
                                 1.0 / mc.feature_stride);
  Value feats = shared_fc_forward(t, mc, pooled);
  sf.pred = predict(t, mc, feats);
  return sf;
}

// ---- objectness pseudo supervision ----

// Anchors overlapping any target box with IoU > 0.5 are positives, anchors
// below 0.3 against every target are negatives, the rest are ignored.
// Negatives are mined hardest-first (highest current logit) at a 3:1 ratio.
struct ObjectnessAssignment {
  std::vector<int> anchor;   // anchor indices entering the loss
  std::vector<double> target;
};

inline ObjectnessAssignment assign_objectness_targets(const std::vector<Box>& anchors,
                                                      const std::vector<Box>& targets,
                                                      const std::vector<double>& logits_by_anchor,
                                                      int max_positives = 16,
                                                      int negative_ratio = 3) {
  ObjectnessAssignment out;
  if (targets.empty()) return out;
  std::vector<std::pair<double, int>> pos;  // (-iou, anchor) for stable best-first order
  std::vector<int> neg;
  for (int a = 0; a < static_cast<int>(anchors.size()); ++a) {
    double best = 0.0;
    for (const auto& tb : targets)
      best = std::max(best, iou(anchors[static_cast<std::size_t>(a)], tb));
    if (best > 0.5)
      pos.emplace_back(-best, a);
    else if (best < 0.3)
      neg.push_back(a);
  }
  std::sort(pos.begin(), pos.end());
  if (static_cast<int>(pos.size()) > max_positives)
    pos.resize(static_cast<std::size_t>(max_positives));
  std::sort(neg.begin(), neg.end(), [&](int a, int b) {
    const double za = logits_by_anchor[static_cast<std::size_t>(a)];
    const double zb = logits_by_anchor[static_cast<std::size_t>(b)];
    if (za != zb) return za > zb;
    return a < b;
  });
  const int n_neg = std::min<int>(static_cast<int>(neg.size()),
                                  std::max<int>(1, static_cast<int>(pos.size())) * negative_ratio);
  for (const auto& [niou, a] : pos) {
    out.anchor.push_back(a);
    out.target.push_back(1.0);
  }
  for (int k = 0; k < n_neg; ++k) {
    out.anchor.push_back(neg[static_cast<std::size_t>(k)]);
    out.target.push_back(0.0);
  }
  return out;
}

// Mean binary cross-entropy with logits over the assigned anchors.
inline Value objectness_loss(Tape& t, Value rpn_logits, const ObjectnessAssignment& assign,
                             int n_scales, int feat_w, int feat_h) {
  if (assign.anchor.empty()) return t.scalar_constant(0.0);
  const auto& z = t.val(rpn_logits);
  const int n = static_cast<int>(assign.anchor.size());
  double loss = 0.0;
  std::vector<int> flat(assign.anchor.size());
  for (std::size_t k = 0; k < assign.anchor.size(); ++k) {
    flat[k] = anchor_logit_index(assign.anchor[k], n_scales, feat_w, feat_h);
    const double zv = z[static_cast<std::size_t>(flat[k])];
    // softplus(z) - t*z, stable form
    loss += std::max(zv, 0.0) + std::log1p(std::exp(-std::fabs(zv))) - assign.target[k] * zv;
  }
  loss /= n;
  const int zid = rpn_logits.id;
  std::vector<double> tgt = assign.target;
  return t.make_node({1}, {loss},
                     [zid, flat = std::move(flat), tgt = std::move(tgt), n](Tape& tp, int self) {
    const double g = tp.cgrad_at(self)[0];
    auto& dz = tp.grad_at(zid);
    const auto& z = tp.val_at(zid);
    for (std::size_t k = 0; k < flat.size(); ++k) {
      const double zv = z[static_cast<std::size_t>(flat[k])];
      const double sig =
          zv >= 0.0 ? 1.0 / (1.0 + std::exp(-zv)) : std::exp(zv) / (1.0 + std::exp(zv));
      dz[static_cast<std::size_t>(flat[k])] += g * (sig - tgt[k]) / n;
    }
  });
}

// ---- strongly supervised training against fixed target boxes ----

// Per-proposal assignment against target boxes: IoU >= 0.5 takes the class of
// the best-overlapping target, IoU < 0.3 against every target is background,
// anything between is ignored. Background rows are mined hardest-first
// (lowest current background probability) at 3:1 against the foreground
// count.
struct DetectionAssignment {
  std::vector<int> proposal;       // proposal indices entering the loss
  std::vector<int> cls_target;     // 0..C-1 foreground, C background
  std::vector<Delta> reg_target;   // valid for foreground rows only
};

inline DetectionAssignment assign_detection_targets(const std::vector<Box>& proposals,
                                                    const std::vector<GtBox>& targets,
                                                    const std::vector<double>& p_values,
                                                    int n_classes, int negative_ratio = 3) {
  DetectionAssignment out;
  if (proposals.empty() || targets.empty()) return out;
  std::vector<int> bg;
  for (int i = 0; i < static_cast<int>(proposals.size()); ++i) {
    double best = 0.0;
    int best_t = -1;
    for (int k = 0; k < static_cast<int>(targets.size()); ++k) {
      const double v = iou(proposals[static_cast<std::size_t>(i)],
                           targets[static_cast<std::size_t>(k)].box);
      if (v > best) {
        best = v;
        best_t = k;
      }
    }
    if (best >= 0.5 && best_t >= 0) {
      out.proposal.push_back(i);
      out.cls_target.push_back(targets[static_cast<std::size_t>(best_t)].cls);
      out.reg_target.push_back(encode_delta(proposals[static_cast<std::size_t>(i)],
                                            targets[static_cast<std::size_t>(best_t)].box));
    } else if (best < 0.3) {
      bg.push_back(i);
    }
  }
  const int n_fg = static_cast<int>(out.proposal.size());
  std::sort(bg.begin(), bg.end(), [&](int a, int b) {
    const double pa = p_values[static_cast<std::size_t>(a) * (n_classes + 1) + n_classes];
    const double pb = p_values[static_cast<std::size_t>(b) * (n_classes + 1) + n_classes];
    if (pa != pb) return pa < pb;  // least background-confident first
    return a < b;
  });
  const int n_bg = std::min<int>(static_cast<int>(bg.size()), std::max(1, n_fg) * negative_ratio);
  for (int k = 0; k < n_bg; ++k) {
    out.proposal.push_back(bg[static_cast<std::size_t>(k)]);
    out.cls_target.push_back(n_classes);
    out.reg_target.push_back(Delta{});
  }
  return out;
}

// Background-only assignment for the collaborative mode: proposals far from
// every pseudo box (IoU < 0.3) are pushed toward the background class,
// hardest first, up to `ratio` times the matched-pair count.
inline DetectionAssignment assign_background_targets(const std::vector<Box>& proposals,
                                                     const std::vector<Box>& pseudo_boxes,
                                                     const std::vector<double>& p_values,
                                                     int n_classes, int n_matched,
                                                     int ratio = 3) {
  DetectionAssignment out;
  if (proposals.empty()) return out;
  std::vector<int> bg;
  for (int i = 0; i < static_cast<int>(proposals.size()); ++i) {
    double best = 0.0;
    for (const auto& tb : pseudo_boxes)
      best = std::max(best, iou(proposals[static_cast<std::size_t>(i)], tb));
    if (best < 0.3) bg.push_back(i);
  }
  std::sort(bg.begin(), bg.end(), [&](int a, int b) {
    const double pa = p_values[static_cast<std::size_t>(a) * (n_classes + 1) + n_classes];
    const double pb = p_values[static_cast<std::size_t>(b) * (n_classes + 1) + n_classes];
    if (pa != pb) return pa < pb;  // least background-confident first
    return a < b;
  });
  const int keep = std::min<int>(static_cast<int>(bg.size()), std::max(1, n_matched) * ratio);
  for (int k = 0; k < keep; ++k) {
    out.proposal.push_back(bg[static_cast<std::size_t>(k)]);
    out.cls_target.push_back(n_classes);
    out.reg_target.push_back(Delta{});
  }
  return out;
}

// Cross-entropy over assigned rows (mean) plus smooth-L1 between predicted
// and target deltas over foreground rows (mean over foreground).
inline Value detection_loss(Tape& t, const StrongPredictions& strong,
                            const DetectionAssignment& assign, double eps = 1e-7) {
  if (assign.proposal.empty()) return t.scalar_constant(0.0);
  const int C = strong.n_classes;
  const auto& p = t.val(strong.p);
  const auto& td = t.val(strong.t);
  const int n = static_cast<int>(assign.proposal.size());
  int n_fg = 0;
  for (int c : assign.cls_target)
    if (c < C) ++n_fg;
  double cls_loss = 0.0, reg_loss = 0.0;
  for (int k = 0; k < n; ++k) {
    const int i = assign.proposal[static_cast<std::size_t>(k)];
    const int c = assign.cls_target[static_cast<std::size_t>(k)];
    const double q = std::max(p[static_cast<std::size_t>(i) * (C + 1) + c], eps);
    cls_loss -= std::log(q);
    if (c < C) {
      const auto& rt = assign.reg_target[static_cast<std::size_t>(k)];
      const std::size_t base = (static_cast<std::size_t>(i) * C + c) * 4;
      const double diff[4] = {rt.dx - td[base], rt.dy - td[base + 1], rt.dw - td[base + 2],
                              rt.dh - td[base + 3]};
      reg_loss += smooth_l1(diff);
    }
  }
  cls_loss /= n;
  if (n_fg > 0) reg_loss /= n_fg;
  const int pid = strong.p.id, tid = strong.t.id;
  DetectionAssignment frozen = assign;
  return t.make_node({1}, {cls_loss + reg_loss},
                     [pid, tid, frozen = std::move(frozen), C, n, n_fg, eps](Tape& tp, int self) {
    const double g = tp.cgrad_at(self)[0];
    auto& dp = tp.grad_at(pid);
    auto& dt = tp.grad_at(tid);
    const auto& p = tp.val_at(pid);
    const auto& td = tp.val_at(tid);
    for (std::size_t k = 0; k < frozen.proposal.size(); ++k) {
      const int i = frozen.proposal[k];
      const int c = frozen.cls_target[k];
      const std::size_t pi = static_cast<std::size_t>(i) * (C + 1) + c;
      if (p[pi] > eps) dp[pi] += g * (-1.0 / p[pi]) / n;
      if (c < C && n_fg > 0) {
        const auto& rt = frozen.reg_target[k];
        const std::size_t base = (static_cast<std::size_t>(i) * C + c) * 4;
        const double rtv[4] = {rt.dx, rt.dy, rt.dw, rt.dh};
        for (int j = 0; j < 4; ++j)
          dt[base + static_cast<std::size_t>(j)] +=
              g * -smooth_l1_prime(rtv[j] - td[base + static_cast<std::size_t>(j)]) / n_fg;
      }
    }
  });
}

// ---- detection output ----

// Decode every (proposal, foreground class) pair against its predicted
// delta, clip to the image, drop low scores and empty boxes, then per-class
// NMS.
inline std::vector<DetectionRecord> strong_detections_from_predictions(
    const std::vector<double>& p, const std::vector<double>& tdeltas, int n_proposals,
    int n_classes, const std::vector<Box>& proposals, int width, int height,
    double score_threshold, double nms_threshold, int image_id) {
  std::vector<DetectionRecord> out;
  for (int c = 0; c < n_classes; ++c) {
    std::vector<Box> cb;
    std::vector<double> cs;
    for (int i = 0; i < n_proposals; ++i) {
      const double s = p[static_cast<std::size_t>(i) * (n_classes + 1) + c];
      if (s < score_threshold) continue;
      Delta d;
      const std::size_t base = (static_cast<std::size_t>(i) * n_classes + c) * 4;
      d.dx = tdeltas[base];
      d.dy = tdeltas[base + 1];
      d.dw = tdeltas[base + 2];
      d.dh = tdeltas[base + 3];
      Box decoded = clip_box(decode_delta(proposals[static_cast<std::size_t>(i)], d),
                             static_cast<double>(width), static_cast<double>(height));
      if (decoded.width() <= 1e-6 || decoded.height() <= 1e-6) continue;
      cb.push_back(decoded);
      cs.push_back(s);
    }
    for (int k : nms(cb, cs, nms_threshold))
      out.push_back(DetectionRecord{image_id, c, cs[static_cast<std::size_t>(k)],
                                    cb[static_cast<std::size_t>(k)]});
  }
  return out;
}

// Full forward pass of the strong detector on one image. Well-formed (and
// possibly empty) output even with untrained parameters.
inline std::vector<DetectionRecord> strong_detect(Registry& reg, const ModelConfig& mc,
                                                  const Tensor& image,
                                                  const ProposalSelection& sel,
                                                  double score_threshold, double nms_threshold,
                                                  int image_id) {
  const int height = image.shape[1], width = image.shape[2];
  Tape t(reg);
  Value img = t.constant(image);
  Value fmap = backbone_forward(t, mc, img);
  StrongForward sf = strong_forward(t, mc, fmap, width, height, sel);
  if (sf.proposals.boxes.empty()) return {};
  return strong_detections_from_predictions(t.val(sf.pred.p), t.val(sf.pred.t),
                                            sf.pred.n_proposals, mc.n_classes,
                                            sf.proposals.boxes, width, height, score_threshold,
                                            nms_threshold, image_id);
}

}  // namespace codetect
