#pragma once

// Training orchestration for the three experiment modes:
//
//   weak_only      trains the weak branch alone from image labels (tag I_W)
//   collaborative  trains both branches jointly: the weak branch under its
//                  image-label loss, the strong branch under prediction
//                  consistency plus objectness pseudo supervision, with the
//                  trunk accumulating gradients from both (tags CL_W, CL_S)
//   cascade        freezes a trained weak detector, extracts its best-region
//                  pseudo boxes once, then trains a strong detector against
//                  those fixed targets (tag CS_S)
//
// Every run is bit-reproducible from (config, seed): data order, proposal
// jitter, augmentation and initialization all derive from the seed, and
// gradient accumulation order is fixed.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "codetect/box.hpp"
#include "codetect/checkpoint.hpp"
#include "codetect/consistency.hpp"
#include "codetect/dataset.hpp"
#include "codetect/errors.hpp"
#include "codetect/eval.hpp"
#include "codetect/gradcheck.hpp"
#include "codetect/model.hpp"
#include "codetect/registry.hpp"
#include "codetect/rng.hpp"
#include "codetect/runlog.hpp"
#include "codetect/strong_detector.hpp"
#include "codetect/tape.hpp"
#include "codetect/weak_detector.hpp"

namespace codetect {

enum class TrainMode { weak_only, collaborative, cascade };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::weak_only: return "weak_only";
    case TrainMode::collaborative: return "collaborative";
    case TrainMode::cascade: return "cascade";
  }
  return "?";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "weak_only") return TrainMode::weak_only;
  if (s == "collaborative") return TrainMode::collaborative;
  if (s == "cascade") return TrainMode::cascade;
  throw config_error("unknown mode '" + s + "' (weak_only|collaborative|cascade)");
}

struct TrainConfig {
  TrainMode mode = TrainMode::collaborative;
  double beta = 0.8;
  int epochs = 20;
  double lr_initial = 1e-3;
  double lr_late = 1e-4;
  double nms_threshold = 0.6;  // detection-time NMS for both branches
  std::uint64_t seed = 1;
  std::string data_dir;
  std::string out_dir;
  int eval_every = 2;

  int b_w = 64;  // weak proposals per image
  ProposalSelection proposal_selection{96, 0.7, 32};
  double score_threshold_weak = 0.002;
  double score_threshold_strong = 0.05;
  double match_threshold = 0.5;
  bool normalize_consistency = true;
  double objectness_weight = 1.0;
  double background_weight = 1.0;  // pseudo-background cross-entropy weight
  double strong_loss_weight = 1.0;  // multiplier on the whole strong-side loss
  std::string weak_checkpoint;  // cascade input

  ModelConfig model;  // n_classes is overwritten from the dataset
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw config_error("train: epochs must be >= 0");
  if (!(cfg.lr_initial > 0.0) || !(cfg.lr_late > 0.0))
    throw config_error("train: learning rates must be positive");
  if (!(cfg.beta > 0.0 && cfg.beta < 1.0)) throw config_error("train: beta must lie in (0,1)");
  if (cfg.eval_every <= 0) throw config_error("train: eval_every must be positive");
  if (cfg.b_w <= 0) throw config_error("train: b_w must be positive");
}

// The learning rate drops by 10x after the first 60% of epochs.
inline int lr_switch_epoch(int epochs) {
  return static_cast<int>(std::llround(0.6 * epochs));
}

inline double lr_for_epoch(const TrainConfig& cfg, int epoch) {
  return epoch < lr_switch_epoch(cfg.epochs) ? cfg.lr_initial : cfg.lr_late;
}

// ---- flat key=value config files ----

inline std::map<std::string, std::string> parse_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw config_error("config: cannot open '" + path.string() + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config: line " + std::to_string(lineno) + " is not key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw config_error("config: empty key on line " + std::to_string(lineno));
    kv[key] = val;
  }
  return kv;
}

inline void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
  auto to_double = [](const std::string& k, const std::string& v) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("trailing");
      return d;
    } catch (const std::exception&) {
      throw config_error("config: bad numeric value for '" + k + "': '" + v + "'");
    }
  };
  auto to_int = [&](const std::string& k, const std::string& v) {
    const double d = to_double(k, v);
    return static_cast<int>(std::llround(d));
  };
  auto to_bool = [](const std::string& k, const std::string& v) {
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    throw config_error("config: bad boolean for '" + k + "': '" + v + "'");
  };
  for (const auto& [k, v] : kv) {
    if (k == "mode") cfg.mode = parse_mode(v);
    else if (k == "beta") cfg.beta = to_double(k, v);
    else if (k == "epochs") cfg.epochs = to_int(k, v);
    else if (k == "lr_initial") cfg.lr_initial = to_double(k, v);
    else if (k == "lr_late") cfg.lr_late = to_double(k, v);
    else if (k == "nms_threshold") cfg.nms_threshold = to_double(k, v);
    else if (k == "seed") cfg.seed = static_cast<std::uint64_t>(to_double(k, v));
    else if (k == "data_dir") cfg.data_dir = v;
    else if (k == "out_dir") cfg.out_dir = v;
    else if (k == "eval_every") cfg.eval_every = to_int(k, v);
    else if (k == "b_w") cfg.b_w = to_int(k, v);
    else if (k == "proposal_top_k") cfg.proposal_selection.top_k = to_int(k, v);
    else if (k == "proposal_nms_threshold") cfg.proposal_selection.nms_threshold = to_double(k, v);
    else if (k == "b_s_cap") cfg.proposal_selection.cap = to_int(k, v);
    else if (k == "score_threshold_weak") cfg.score_threshold_weak = to_double(k, v);
    else if (k == "score_threshold_strong") cfg.score_threshold_strong = to_double(k, v);
    else if (k == "match_threshold") cfg.match_threshold = to_double(k, v);
    else if (k == "normalize_consistency") cfg.normalize_consistency = to_bool(k, v);
    else if (k == "objectness_weight") cfg.objectness_weight = to_double(k, v);
    else if (k == "strong_loss_weight") cfg.strong_loss_weight = to_double(k, v);
    else if (k == "background_weight") cfg.background_weight = to_double(k, v);
    else if (k == "weak_checkpoint") cfg.weak_checkpoint = v;
    else throw config_error("config: unknown key '" + k + "'");
  }
}

// ---- per-step graphs with frozen discrete structure ----

// Discrete choices (proposal geometry, pseudo targets, matches, loss
// assignments) are resolved once per step from the live forward values and
// then held fixed, so the loss is a smooth function of the parameters for
// that step. The gradient checker reuses the same plan across its
// finite-difference evaluations.
struct StepPlan {
  std::vector<Box> weak_props;

  bool has_strong = false;
  std::vector<Box> proposal_boxes;
  MaxoutTargets mo;
  std::vector<Box> selected_boxes;   // max-out winners, the reduced weak set
  MaxoutTargets selected_targets;    // one-hot rows aligned with selected_boxes
  MatchSet matches;
  ObjectnessAssignment obj;
  DetectionAssignment det;
  DetectionAssignment bg;  // collaborative pseudo-background rows
  int feat_h = 0;
  int feat_w = 0;
};

struct WeakGraph {
  Value loss;
  WeakScores ws;
};

inline WeakGraph build_weak_graph(Tape& t, const ModelConfig& mc, Value fmap,
                                  const std::vector<Box>& props, std::span<const double> label) {
  Value pooled = t.roi_pool_rows(fmap, props, mc.roi_bins, mc.roi_bins, 1.0 / mc.feature_stride);
  Value feats = shared_fc_forward(t, mc, pooled);
  WeakGraph wg;
  wg.ws = score_regions(t, feats, mc.n_classes);
  wg.loss = image_classification_loss(t, wg.ws.y_hat, label);
  return wg;
}

struct JointGraph {
  Value loss_weak;
  Value loss_strong;
  Value loss_consistency;  // term nodes, before the mixing weights
  Value loss_objectness;
  WeakScores ws;
  StrongPredictions pred;
  ConsistencyBreakdown cons;
  double objectness_value = 0.0;
  double background_value = 0.0;
};

// Builds the full collaborative step. With reuse=false the plan's strong-side
// fields are filled from live values; with reuse=true they are taken as
// given. plan.weak_props must be set by the caller either way.
inline JointGraph build_joint_graph(Tape& t, const ModelConfig& mc, Value fmap, int width,
                                    int height, std::span<const double> label,
                                    const TrainConfig& cfg, StepPlan& plan, bool reuse) {
  JointGraph jg;
  WeakGraph wg = build_weak_graph(t, mc, fmap, plan.weak_props, label);
  jg.ws = wg.ws;
  jg.loss_weak = wg.loss;

  if (!reuse) {
    plan.mo = maxout(t.val(jg.ws.p), jg.ws.n_regions, jg.ws.n_classes, label);
    plan.has_strong = true;
  }

  // strong branch: objectness logits are always live; proposal geometry and
  // loss assignments come from the plan
  Value rpn_logits = t.conv2d(t.rms_normalize_cells(fmap), t.param("rpn.w"),
                              t.param("rpn.b"), Tape::Padding::valid);
  const auto& fs = t.shape(rpn_logits);
  const int S = fs[0], fh = fs[1], fw = fs[2];
  const std::vector<Box> anchors = make_anchors(mc, fh, fw, width, height);
  std::vector<double> logits_by_anchor(anchors.size());
  {
    const auto& lv = t.val(rpn_logits);
    for (std::size_t a = 0; a < anchors.size(); ++a)
      logits_by_anchor[a] =
          lv[static_cast<std::size_t>(anchor_logit_index(static_cast<int>(a), S, fw, fh))];
  }
  if (!reuse) {
    plan.feat_h = fh;
    plan.feat_w = fw;
    std::vector<double> scores(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      const double z = logits_by_anchor[a];
      scores[a] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }
    plan.proposal_boxes = select_proposals(anchors, scores, cfg.proposal_selection).boxes;
    // max-out reduces the weak regions entering the consistency loss to the
    // selected ones; proposals are matched against that reduced set
    plan.selected_boxes.clear();
    plan.selected_targets = MaxoutTargets{};
    plan.selected_targets.n_classes = mc.n_classes;
    for (int c = 0; c < mc.n_classes; ++c) {
      const int j = plan.mo.selected[static_cast<std::size_t>(c)];
      if (j < 0) continue;
      plan.selected_boxes.push_back(plan.weak_props[static_cast<std::size_t>(j)]);
      for (int cc = 0; cc < mc.n_classes; ++cc)
        plan.selected_targets.p_hat.push_back(cc == c ? 1.0 : 0.0);
    }
    plan.selected_targets.n_regions = static_cast<int>(plan.selected_boxes.size());
    plan.selected_targets.selected.assign(static_cast<std::size_t>(mc.n_classes), -1);
    plan.matches = match_regions(plan.proposal_boxes, plan.selected_boxes, cfg.match_threshold);
    plan.obj = assign_objectness_targets(anchors, plan.selected_boxes, logits_by_anchor);
  }

  Value pooled = t.roi_pool_rows(fmap, plan.proposal_boxes, mc.roi_bins, mc.roi_bins,
                                 1.0 / mc.feature_stride);
  Value feats = shared_fc_forward(t, mc, pooled);
  jg.pred = predict(t, mc, feats);

  ConsistencyConfig ccfg;
  ccfg.beta = cfg.beta;
  ccfg.match_threshold = cfg.match_threshold;
  ccfg.normalize = cfg.normalize_consistency;
  jg.loss_consistency = consistency_loss(t, plan.selected_targets, plan.selected_boxes, jg.pred,
                                         plan.proposal_boxes, plan.matches, ccfg, &jg.cons);
  if (!reuse)
    plan.bg = assign_background_targets(plan.proposal_boxes, plan.selected_boxes,
                                        t.val(jg.pred.p), mc.n_classes, plan.matches.size());
  Value bg_ce = detection_loss(t, jg.pred, plan.bg);
  jg.background_value = t.scalar(bg_ce);
  jg.loss_objectness = objectness_loss(t, rpn_logits, plan.obj, S, fw, fh);
  jg.objectness_value = t.scalar(jg.loss_objectness);
  jg.loss_strong = t.scale(
      t.add(t.add(jg.loss_consistency, t.scale(bg_ce, cfg.background_weight)),
            t.scale(jg.loss_objectness, cfg.objectness_weight)),
      cfg.strong_loss_weight);
  return jg;
}

struct CascadeGraph {
  Value loss;
  StrongPredictions pred;
  double detection_value = 0.0;
  double objectness_value = 0.0;
};

inline CascadeGraph build_cascade_graph(Tape& t, const ModelConfig& mc, Value fmap, int width,
                                        int height, const std::vector<GtBox>& pseudo,
                                        const TrainConfig& cfg, StepPlan& plan, bool reuse) {
  CascadeGraph cg;
  Value rpn_logits = t.conv2d(t.rms_normalize_cells(fmap), t.param("rpn.w"),
                              t.param("rpn.b"), Tape::Padding::valid);
  const auto& fs = t.shape(rpn_logits);
  const int S = fs[0], fh = fs[1], fw = fs[2];
  const std::vector<Box> anchors = make_anchors(mc, fh, fw, width, height);
  std::vector<double> logits_by_anchor(anchors.size());
  {
    const auto& lv = t.val(rpn_logits);
    for (std::size_t a = 0; a < anchors.size(); ++a)
      logits_by_anchor[a] =
          lv[static_cast<std::size_t>(anchor_logit_index(static_cast<int>(a), S, fw, fh))];
  }
  if (!reuse) {
    plan.has_strong = true;
    plan.feat_h = fh;
    plan.feat_w = fw;
    std::vector<double> scores(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      const double z = logits_by_anchor[a];
      scores[a] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    }
    plan.proposal_boxes = select_proposals(anchors, scores, cfg.proposal_selection).boxes;
    std::vector<Box> target_boxes;
    for (const auto& g : pseudo) target_boxes.push_back(g.box);
    plan.obj = assign_objectness_targets(anchors, target_boxes, logits_by_anchor);
  }

  Value pooled = t.roi_pool_rows(fmap, plan.proposal_boxes, mc.roi_bins, mc.roi_bins,
                                 1.0 / mc.feature_stride);
  Value feats = shared_fc_forward(t, mc, pooled);
  cg.pred = predict(t, mc, feats);

  if (!reuse)
    plan.det = assign_detection_targets(plan.proposal_boxes, pseudo, t.val(cg.pred.p),
                                        mc.n_classes);
  Value det = detection_loss(t, cg.pred, plan.det);
  Value obj = objectness_loss(t, rpn_logits, plan.obj, S, fw, fh);
  cg.detection_value = t.scalar(det);
  cg.objectness_value = t.scalar(obj);
  cg.loss = t.add(det, t.scale(obj, cfg.objectness_weight));
  return cg;
}

// ---- branch-gradient isolation ----

// Sum of |grad| that a loss left on the given parameters' tape nodes.
inline double tape_grad_mass(Tape& t, const std::vector<std::string>& names) {
  double acc = 0.0;
  for (const auto& n : names) {
    Value v = t.param(n);
    for (double g : t.grad(v)) acc += std::fabs(g);
  }
  return acc;
}

inline void require_zero_grad(Tape& t, const std::vector<std::string>& names, const char* what) {
  if (tape_grad_mass(t, names) != 0.0)
    throw std::logic_error(std::string("branch isolation violated: ") + what);
}

// ---- detector evaluation over a dataset split ----

inline std::vector<Box> eval_weak_proposals(const ModelConfig& mc, const SceneImage& img,
                                            int b_w, int image_id) {
  Rng rng(mix_seed(0xE7A1D5EEDULL, static_cast<std::uint64_t>(image_id)));
  if (!mc.guided_proposals) return weak_proposal_boxes(img.width, img.height, b_w, mc, rng);
  const SceneImageRef ref{img.width, img.height, img.rgb.data()};
  return blob_proposal_boxes(ref, b_w, mc, rng);
}

inline std::vector<DetectionRecord> run_weak_detector(Registry& reg, const ModelConfig& mc,
                                                      const Dataset& ds,
                                                      const std::vector<int>& ids,
                                                      const TrainConfig& cfg) {
  std::vector<DetectionRecord> out;
  for (int id : ids) {
    const Scene& sc = ds.scene(id);
    const auto props = eval_weak_proposals(mc, sc.img, cfg.b_w, id);
    auto dets = weak_detect(reg, mc, image_to_tensor(sc.img), props, cfg.score_threshold_weak,
                            cfg.nms_threshold, id);
    out.insert(out.end(), dets.begin(), dets.end());
  }
  return out;
}

inline std::vector<DetectionRecord> run_strong_detector(Registry& reg, const ModelConfig& mc,
                                                        const Dataset& ds,
                                                        const std::vector<int>& ids,
                                                        const TrainConfig& cfg) {
  std::vector<DetectionRecord> out;
  for (int id : ids) {
    const Scene& sc = ds.scene(id);
    auto dets = strong_detect(reg, mc, image_to_tensor(sc.img), cfg.proposal_selection,
                              cfg.score_threshold_strong, cfg.nms_threshold, id);
    out.insert(out.end(), dets.begin(), dets.end());
  }
  return out;
}

struct TagEval {
  std::string tag;
  double map = 0.0;
  double corloc = 0.0;
};

inline std::vector<TagEval> evaluate_tags(Registry& reg, const ModelConfig& mc, const Dataset& ds,
                                          const TrainConfig& cfg, TrainMode mode) {
  const GtMap test_gt = gt_map(ds, ds.test_ids);
  const GtMap train_gt = gt_map(ds, ds.train_ids);
  const LabelMap train_labels = label_map(ds, ds.train_ids);
  std::vector<TagEval> out;
  auto add = [&](const std::string& tag, bool strong) {
    TagEval te;
    te.tag = tag;
    const auto test_dets = strong ? run_strong_detector(reg, mc, ds, ds.test_ids, cfg)
                                  : run_weak_detector(reg, mc, ds, ds.test_ids, cfg);
    const auto train_dets = strong ? run_strong_detector(reg, mc, ds, ds.train_ids, cfg)
                                   : run_weak_detector(reg, mc, ds, ds.train_ids, cfg);
    te.map = mean_average_precision(test_dets, test_gt, mc.n_classes);
    te.corloc = corloc(train_dets, train_gt, train_labels, mc.n_classes).mean;
    out.push_back(std::move(te));
  };
  switch (mode) {
    case TrainMode::weak_only: add("I_W", false); break;
    case TrainMode::collaborative:
      add("CL_W", false);
      add("CL_S", true);
      break;
    case TrainMode::cascade: add("CS_S", true); break;
  }
  return out;
}

// ---- pseudo labels for the cascade ----

inline std::map<int, std::vector<GtBox>> extract_pseudo_labels(Registry& weak_reg,
                                                               const ModelConfig& mc,
                                                               const Dataset& ds,
                                                               const std::vector<int>& ids,
                                                               int b_w) {
  std::map<int, std::vector<GtBox>> out;
  for (int id : ids) {
    const Scene& sc = ds.scene(id);
    const auto props = eval_weak_proposals(mc, sc.img, b_w, id);
    Tape t(weak_reg);
    Value img = t.constant(image_to_tensor(sc.img));
    Value fmap = backbone_forward(t, mc, img);
    Value pooled =
        t.roi_pool_rows(fmap, props, mc.roi_bins, mc.roi_bins, 1.0 / mc.feature_stride);
    Value feats = shared_fc_forward(t, mc, pooled);
    WeakScores ws = score_regions(t, feats, mc.n_classes);
    const MaxoutTargets mo = maxout(t.val(ws.p), ws.n_regions, ws.n_classes, sc.label);
    std::vector<GtBox> boxes;
    for (int c = 0; c < mc.n_classes; ++c)
      if (mo.selected[static_cast<std::size_t>(c)] >= 0)
        boxes.push_back(GtBox{
            props[static_cast<std::size_t>(mo.selected[static_cast<std::size_t>(c)])], c});
    out[id] = std::move(boxes);
  }
  return out;
}

inline void write_pseudo_labels_csv(const std::filesystem::path& path,
                                    const std::map<int, std::vector<GtBox>>& pseudo) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw config_error("cannot open '" + path.string() + "' for writing");
  os << "image_id,class,x1,y1,x2,y2\n";
  char buf[256];
  for (const auto& [id, boxes] : pseudo)
    for (const auto& g : boxes) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g,%.17g,%.17g\n", id, g.cls, g.box.x1,
                    g.box.y1, g.box.x2, g.box.y2);
      os << buf;
    }
}

// ---- training ----

struct IterationRow {
  int step = 0;
  int epoch = 0;
  int image_id = 0;
  double lr = 0.0;
  double loss_weak = 0.0;
  double cons_total = 0.0;
  double cp_inter = 0.0;
  double cp_inner = 0.0;
  double cl_inter = 0.0;
  int matched_pairs = 0;
  double objectness = 0.0;
  double detection = 0.0;
};

struct TrainResult {
  RunLog log;
  std::filesystem::path checkpoint_path;
  std::filesystem::path runlog_path;
  std::filesystem::path metrics_path;
  std::vector<std::string> warnings;
  std::vector<IterationRow> iterations;
};

namespace detail {

inline void write_iteration_csv(const std::filesystem::path& path,
                                const std::vector<IterationRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw config_error("cannot open '" + path.string() + "' for writing");
  os << "step,epoch,image_id,lr,loss_weak,cons_total,cp_inter,cp_inner,cl_inter,matched_pairs,"
        "objectness,detection\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf,
                  "%d,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%.17g,%.17g\n", r.step,
                  r.epoch, r.image_id, r.lr, r.loss_weak, r.cons_total, r.cp_inter, r.cp_inner,
                  r.cl_inter, r.matched_pairs, r.objectness, r.detection);
    os << buf;
  }
}

struct EpochStats {
  double loss_weak = 0.0;
  double cons_total = 0.0;
  double cp_inter = 0.0;
  double cp_inner = 0.0;
  double cl_inter = 0.0;
  double matched = 0.0;
  int steps = 0;

  void add(const IterationRow& r) {
    loss_weak += r.loss_weak;
    cons_total += r.cons_total;
    cp_inter += r.cp_inter;
    cp_inner += r.cp_inner;
    cl_inter += r.cl_inter;
    matched += r.matched_pairs;
    ++steps;
  }

  RunRow to_row(int epoch, const std::string& tag, double map, double cl) const {
    RunRow row;
    row.epoch = epoch;
    row.tag = tag;
    row.map = map;
    row.corloc = cl;
    const double n = std::max(1, steps);
    row.loss_weak = loss_weak / n;
    row.cons_total = cons_total / n;
    row.cp_inter = cp_inter / n;
    row.cp_inner = cp_inner / n;
    row.cl_inter = cl_inter / n;
    row.matched_pairs = matched / n;
    return row;
  }
};

}  // namespace detail

// Core loop shared by the three modes. `ds` is the already-loaded dataset;
// file artifacts are written only when cfg.out_dir is non-empty.
inline TrainResult train_on(const Dataset& ds, TrainConfig cfg) {
  validate(cfg);
  cfg.model.n_classes = ds.cfg.n_classes;
  cfg.model.base_image_size = ds.cfg.image_size;
  const ModelConfig& mc = cfg.model;

  Registry reg;
  init_model_params(reg, mc, cfg.seed);

  // cascade: frozen weak detector provides fixed pseudo boxes; the shared
  // trunk of the new detector starts from the weak checkpoint
  Registry frozen_weak;
  std::map<int, std::vector<GtBox>> pseudo;
  if (cfg.mode == TrainMode::cascade) {
    if (cfg.weak_checkpoint.empty())
      throw config_error("cascade: weak_checkpoint is required");
    load_checkpoint(frozen_weak, cfg.weak_checkpoint);
    for (const auto& n : shared_param_names())
      if (!frozen_weak.has(n)) throw config_error("cascade: checkpoint lacks entry '" + n + "'");
    for (const auto& n : weak_param_names())
      if (!frozen_weak.has(n)) throw config_error("cascade: checkpoint lacks entry '" + n + "'");
    if (frozen_weak.entry("wcls.b").shape[0] != mc.n_classes)
      throw config_error("cascade: checkpoint class count disagrees with dataset");
    pseudo = extract_pseudo_labels(frozen_weak, mc, ds, ds.train_ids, cfg.b_w);
    for (const auto& n : shared_param_names()) reg.entry(n).value = frozen_weak.entry(n).value;
  }

  TrainResult result;
  detail::EpochStats stats;
  int step = 0;

  const bool out_files = !cfg.out_dir.empty();
  std::filesystem::path out(cfg.out_dir);
  if (out_files) {
    std::filesystem::create_directories(out);
    if (cfg.mode == TrainMode::cascade) write_pseudo_labels_csv(out / "pseudo_labels.csv", pseudo);
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_for_epoch(cfg, epoch);
    std::vector<int> order = ds.train_ids;
    Rng shuffle_rng(mix_seed(cfg.seed, 0x0E0C0ULL, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    stats = detail::EpochStats{};
    int epoch_matched = 0;

    for (int image_id : order) {
      const Scene& base = ds.scene(image_id);
      const Scene aug = augment(
          base, mix_seed(cfg.seed, 0xA06ULL * (epoch + 1), static_cast<std::uint64_t>(image_id)));
      const int W = aug.img.width, H = aug.img.height;
      const Tensor image = image_to_tensor(aug.img);

      IterationRow row;
      row.step = step;
      row.epoch = epoch;
      row.image_id = image_id;
      row.lr = lr;

      Tape t(reg);
      Value img = t.constant(image);
      Value fmap = backbone_forward(t, mc, img);

      // proposals are fixed per image (same stream the evaluator uses) and
      // follow the image through flip/rescale
      const AugmentChoice ac = sample_augment(
          mix_seed(cfg.seed, 0xA06ULL * (epoch + 1), static_cast<std::uint64_t>(image_id)));
      StepPlan plan;
      if (cfg.mode != TrainMode::cascade) {
        const auto canonical = eval_weak_proposals(mc, base.img, cfg.b_w, image_id);
        plan.weak_props.reserve(canonical.size());
        for (const auto& b : canonical)
          plan.weak_props.push_back(augment_box(b, base.img.width, base.img.height, ac));
      }

      if (cfg.mode == TrainMode::weak_only) {
        WeakGraph wg = build_weak_graph(t, mc, fmap, plan.weak_props, aug.label);
        row.loss_weak = t.scalar(wg.loss);
        t.backward(wg.loss);
      } else if (cfg.mode == TrainMode::collaborative) {
        JointGraph jg = build_joint_graph(t, mc, fmap, W, H, aug.label, cfg, plan, false);
        row.loss_weak = t.scalar(jg.loss_weak);
        row.cons_total = jg.cons.total;
        row.cp_inter = jg.cons.cp_inter;
        row.cp_inner = jg.cons.cp_inner;
        row.cl_inter = jg.cons.cl_inter;
        row.matched_pairs = jg.cons.matched_pairs;
        row.objectness = jg.objectness_value;
        epoch_matched += jg.cons.matched_pairs;
        // each branch's loss must not leak into the other's private layers
        t.backward(jg.loss_weak);
        require_zero_grad(t, strong_param_names(), "weak loss reached strong-only layers");
        t.backward(jg.loss_strong);
        require_zero_grad(t, weak_param_names(), "strong loss reached weak-only layers");
      } else {  // cascade: pseudo boxes follow the same flip/scale as the image
        std::vector<GtBox> targets;
        for (const auto& g : pseudo[image_id])
          targets.push_back(GtBox{augment_box(g.box, base.img.width, base.img.height, ac), g.cls});
        CascadeGraph cg = build_cascade_graph(t, mc, fmap, W, H, targets, cfg, plan, false);
        row.detection = cg.detection_value;
        row.objectness = cg.objectness_value;
        t.backward(cg.loss);
        require_zero_grad(t, weak_param_names(), "cascade loss reached weak-only layers");
      }

      reg.sgd_step(lr);
      stats.add(row);
      result.iterations.push_back(row);
      ++step;
    }

    if (cfg.mode == TrainMode::collaborative && !order.empty() && epoch_matched == 0)
      result.warnings.push_back("epoch " + std::to_string(epoch + 1) +
                                ": no matched pairs; consistency loss contributed nothing");

    const bool last = epoch + 1 == cfg.epochs;
    if ((epoch + 1) % cfg.eval_every == 0 || last) {
      for (const auto& te : evaluate_tags(reg, mc, ds, cfg, cfg.mode))
        result.log.rows.push_back(stats.to_row(epoch + 1, te.tag, te.map, te.corloc));
    }
  }

  if (out_files) {
    result.checkpoint_path = out / "checkpoint.ckpt";
    CheckpointMeta meta;
    meta.mode_tag = mode_name(cfg.mode);
    meta.epoch = static_cast<std::uint32_t>(cfg.epochs);
    save_checkpoint(reg, meta, result.checkpoint_path);
    result.runlog_path = out / "runlog.csv";
    write_runlog_csv(result.runlog_path, result.log);
    result.metrics_path = out / "train_metrics.csv";
    detail::write_iteration_csv(result.metrics_path, result.iterations);
  }
  return result;
}

inline TrainResult train_weak_only(const Dataset& ds, TrainConfig cfg) {
  if (cfg.mode != TrainMode::weak_only) throw config_error("train_weak_only: mode mismatch");
  return train_on(ds, std::move(cfg));
}

inline TrainResult train_joint(const Dataset& ds, TrainConfig cfg) {
  if (cfg.mode != TrainMode::collaborative) throw config_error("train_joint: mode mismatch");
  return train_on(ds, std::move(cfg));
}

inline TrainResult train_cascade(const Dataset& ds, TrainConfig cfg) {
  if (cfg.mode != TrainMode::cascade) throw config_error("train_cascade: mode mismatch");
  return train_on(ds, std::move(cfg));
}

inline TrainResult train(const TrainConfig& cfg) {
  if (cfg.data_dir.empty()) throw config_error("train: data_dir is required");
  const Dataset ds = load_dataset(cfg.data_dir);
  return train_on(ds, cfg);
}

// ---- standalone evaluation of a checkpoint ----

struct EvalRow {
  std::string tag;
  double value = 0.0;
  std::filesystem::path detections_csv;
};

struct EvalOutcome {
  std::string split;
  std::string metric;  // "map" on test, "corloc" on train
  std::vector<EvalRow> rows;
};

inline EvalOutcome evaluate(const std::filesystem::path& checkpoint,
                            const std::filesystem::path& data_dir, const std::string& split,
                            const std::filesystem::path& out_dir,
                            const TrainConfig& base = TrainConfig{}) {
  if (split != "train" && split != "test")
    throw config_error("evaluate: split must be 'train' or 'test'");
  const Dataset ds = load_dataset(data_dir);
  Registry reg;
  const CheckpointMeta meta = load_checkpoint(reg, checkpoint);
  const TrainMode mode = parse_mode(meta.mode_tag);

  TrainConfig cfg = base;
  cfg.mode = mode;
  cfg.model.n_classes = ds.cfg.n_classes;
  cfg.model.base_image_size = ds.cfg.image_size;
  if (!reg.has("wcls.b") || reg.entry("wcls.b").shape[0] != ds.cfg.n_classes)
    throw config_error("evaluate: checkpoint class count disagrees with dataset");

  const std::vector<int>& ids = split == "test" ? ds.test_ids : ds.train_ids;
  const GtMap gts = gt_map(ds, ids);
  const LabelMap labels = label_map(ds, ids);

  std::filesystem::create_directories(out_dir);
  EvalOutcome out;
  out.split = split;
  out.metric = split == "test" ? "map" : "corloc";

  auto add = [&](const std::string& tag, bool strong) {
    const auto dets = strong ? run_strong_detector(reg, cfg.model, ds, ids, cfg)
                             : run_weak_detector(reg, cfg.model, ds, ids, cfg);
    EvalRow row;
    row.tag = tag;
    row.value = split == "test"
                    ? mean_average_precision(dets, gts, cfg.model.n_classes)
                    : corloc(dets, gts, labels, cfg.model.n_classes).mean;
    row.detections_csv = out_dir / ("detections_" + tag + "_" + split + ".csv");
    write_detections_csv(row.detections_csv, dets);
    out.rows.push_back(std::move(row));
  };
  switch (mode) {
    case TrainMode::weak_only: add("I_W", false); break;
    case TrainMode::collaborative:
      add("CL_W", false);
      add("CL_S", true);
      break;
    case TrainMode::cascade: add("CS_S", true); break;
  }
  return out;
}

// ---- randomized gradient verification over the full losses ----

struct GradCheckReport {
  double worst = 0.0;
  int instances = 0;
  std::vector<double> per_instance;
};

// Small randomized models; rotates between the image-label loss, the
// consistency + objectness loss, their sum, and the cascade detection loss.
inline GradCheckReport run_gradcheck_suite(int instances, std::uint64_t seed,
                                           std::ostream* log = nullptr) {
  GradCheckReport report;
  report.instances = instances;
  static const char* kKind[] = {"image-label", "consistency+objectness", "joint sum",
                                "detection"};
  for (int inst = 0; inst < instances; ++inst) {
    Rng rng(mix_seed(seed, 0x6EADC0DEULL, static_cast<std::uint64_t>(inst)));
    ModelConfig mc;
    mc.n_classes = 3;
    mc.conv_channels = {4, 6, 6};
    mc.fc_width = 16;
    mc.base_image_size = 16;
    mc.anchor_sizes = {6.0, 10.0};
    mc.weak_sizes = {6.0, 9.0, 12.0};
    mc.weak_grid = 3;

    TrainConfig cfg;
    cfg.model = mc;
    cfg.proposal_selection = ProposalSelection{12, 0.7, 6};

    Registry reg;
    init_model_params(reg, mc, mix_seed(seed, static_cast<std::uint64_t>(inst)));
    // nudge parameters off their symmetric start
    for (int e = 0; e < reg.size(); ++e)
      for (auto& v : reg.entry(e).value) v += rng.uniform(-0.05, 0.05);

    const int S = 16;
    Tensor image = Tensor::zeros({3, S, S});
    for (auto& v : image.v) v = rng.uniform();
    std::vector<double> label(3, 0.0);
    label[static_cast<std::size_t>(rng.uniform_int(0, 3))] = 1.0;
    if (rng.bernoulli(0.5)) label[static_cast<std::size_t>(rng.uniform_int(0, 3))] = 1.0;

    StepPlan plan;
    Rng prop_rng(mix_seed(seed, 0xB0CE5ULL, static_cast<std::uint64_t>(inst)));
    plan.weak_props = weak_proposal_boxes(S, S, 8, mc, prop_rng);
    std::vector<GtBox> pseudo;  // synthetic targets for the detection loss
    pseudo.push_back(GtBox{Box{2.0, 2.0, 9.0, 9.5}, rng.uniform_int(0, 3)});
    pseudo.push_back(GtBox{Box{7.5, 6.0, 14.0, 13.0}, rng.uniform_int(0, 3)});

    const int kind = inst % 4;
    // resolve the discrete structure once at the base point
    {
      Tape t(reg);
      Value img = t.constant(image);
      Value fmap = backbone_forward(t, mc, img);
      if (kind == 3)
        build_cascade_graph(t, mc, fmap, S, S, pseudo, cfg, plan, false);
      else
        build_joint_graph(t, mc, fmap, S, S, label, cfg, plan, false);
    }

    auto loss_fn = [&](bool do_backward) {
      Tape t(reg);
      Value img = t.constant(image);
      Value fmap = backbone_forward(t, mc, img);
      Value loss;
      if (kind == 3) {
        CascadeGraph cg = build_cascade_graph(t, mc, fmap, S, S, pseudo, cfg, plan, true);
        loss = cg.loss;
      } else {
        JointGraph jg = build_joint_graph(t, mc, fmap, S, S, label, cfg, plan, true);
        if (kind == 0) loss = jg.loss_weak;
        else if (kind == 1) loss = jg.loss_strong;
        else loss = t.add(jg.loss_weak, jg.loss_strong);
      }
      const double v = t.scalar(loss);
      if (do_backward) t.backward(loss);
      return v;
    };

    Rng sample_rng(mix_seed(seed, 0x5A3F1EULL, static_cast<std::uint64_t>(inst)));
    const double err = grad_check(reg, loss_fn, 1e-5, 25, sample_rng);
    report.per_instance.push_back(err);
    report.worst = std::max(report.worst, err);
    if (log)
      *log << "instance " << inst << " (" << kKind[kind] << "): max rel err " << err << "\n";
  }
  return report;
}

}  // namespace codetect
