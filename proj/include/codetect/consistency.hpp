#pragma once

// Prediction-consistency loss that trains the strong branch from the weak
// branch's one-hot pseudo targets over matched proposal pairs. Three parts,
// summed over matched (strong i, weak j) pairs and foreground classes c:
//
//   cp_inter: -beta * p_hat[j][c] * log p[i][c]   cross-entropy toward the
//             selected weak region's class
//   cp_inner: -(1-beta) * p[i][c] * log p[i][c]   self-entropy sharpening of
//             the strong prediction
//   cl_inter: p_hat[j][c] * smooth_l1(t_jc - t_ic) box-delta agreement, where
//             t_jc encodes the weak box against the strong proposal
//
// Weak-side quantities are constants: gradient reaches only the strong
// classification and regression outputs. The smooth-L1 and cross-entropy
// terms enter with the sign that penalizes disagreement.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "codetect/box.hpp"
#include "codetect/errors.hpp"
#include "codetect/smooth_l1.hpp"
#include "codetect/strong_detector.hpp"
#include "codetect/tape.hpp"
#include "codetect/weak_detector.hpp"

namespace codetect {

struct ConsistencyConfig {
  double beta = 0.8;             // weight between cross-entropy and sharpening
  double match_threshold = 0.5;  // IoU needed to pair proposals
  bool normalize = true;         // divide by the matched-pair count
};

struct ConsistencyBreakdown {
  double total = 0.0;
  double cp_inter = 0.0;
  double cp_inner = 0.0;
  double cl_inter = 0.0;
  int matched_pairs = 0;
};

// Builds the scalar loss node over the given matches. Probabilities are
// floored at eps inside the logs (no upper clamp: perfect agreement must
// yield exactly zero loss). An empty match set yields a constant zero.
inline Value consistency_loss(Tape& t, const MaxoutTargets& p_hat,
                              const std::vector<Box>& weak_boxes, const StrongPredictions& strong,
                              const std::vector<Box>& proposal_boxes, const MatchSet& matches,
                              const ConsistencyConfig& cfg,
                              ConsistencyBreakdown* breakdown = nullptr,
                              double eps = 1e-7) {
  if (!(cfg.beta > 0.0 && cfg.beta < 1.0))
    throw invalid_input("consistency_loss: beta must lie in (0,1)");
  const int C = strong.n_classes;
  const int B = strong.n_proposals;
  if (p_hat.n_classes != C) throw invalid_input("consistency_loss: class count mismatch");

  ConsistencyBreakdown bd;
  bd.matched_pairs = matches.size();
  if (matches.empty()) {
    if (breakdown) *breakdown = bd;
    return t.scalar_constant(0.0);
  }

  const auto& p = t.val(strong.p);
  const auto& td = t.val(strong.t);
  const double norm = cfg.normalize ? static_cast<double>(std::max(1, matches.size())) : 1.0;

  struct PairTerm {
    int strong_i;
    int weak_j;
    double tjc[4];
  };
  std::vector<PairTerm> pairs;
  pairs.reserve(matches.pairs.size());
  for (const auto& m : matches.pairs) {
    if (m.strong < 0 || m.strong >= B || m.weak < 0 ||
        m.weak >= static_cast<int>(weak_boxes.size()))
      throw invalid_input("consistency_loss: match index out of range");
    PairTerm pt;
    pt.strong_i = m.strong;
    pt.weak_j = m.weak;
    const Delta d = encode_delta(proposal_boxes[static_cast<std::size_t>(m.strong)],
                                 weak_boxes[static_cast<std::size_t>(m.weak)]);
    pt.tjc[0] = d.dx;
    pt.tjc[1] = d.dy;
    pt.tjc[2] = d.dw;
    pt.tjc[3] = d.dh;
    pairs.push_back(pt);
  }

  for (const auto& pt : pairs) {
    for (int c = 0; c < C; ++c) {
      const double pic = p[static_cast<std::size_t>(pt.strong_i) * (C + 1) + c];
      const double q = std::max(pic, eps);
      const double ph = p_hat.at(pt.weak_j, c);
      if (ph > 0.0) {
        bd.cp_inter += -cfg.beta * ph * std::log(q);
        double diff[4];
        for (int k = 0; k < 4; ++k)
          diff[k] = pt.tjc[k] -
                    td[(static_cast<std::size_t>(pt.strong_i) * C + c) * 4 + k];
        bd.cl_inter += ph * smooth_l1(diff);
      }
      bd.cp_inner += -(1.0 - cfg.beta) * q * std::log(q);
    }
  }
  bd.cp_inter /= norm;
  bd.cp_inner /= norm;
  bd.cl_inter /= norm;
  bd.total = bd.cp_inter + bd.cp_inner + bd.cl_inter;
  if (breakdown) *breakdown = bd;

  const int pid = strong.p.id;
  const int tid = strong.t.id;
  const double beta = cfg.beta;
  std::vector<double> phat = p_hat.p_hat;
  const int n_classes = C;
  return t.make_node(
      {1}, {bd.total},
      [pid, tid, pairs = std::move(pairs), phat = std::move(phat), beta, norm, n_classes,
       eps](Tape& tp, int self) {
        const double g = tp.cgrad_at(self)[0] / norm;
        auto& dp = tp.grad_at(pid);
        auto& dt = tp.grad_at(tid);
        const auto& p = tp.val_at(pid);
        const auto& td = tp.val_at(tid);
        const int C = n_classes;
        for (const auto& pt : pairs) {
          for (int c = 0; c < C; ++c) {
            const std::size_t pi = static_cast<std::size_t>(pt.strong_i) * (C + 1) + c;
            const double pic = p[pi];
            const double ph = phat[static_cast<std::size_t>(pt.weak_j) * C + c];
            if (pic > eps) {
              if (ph > 0.0) dp[pi] += g * (-beta * ph / pic);
              dp[pi] += g * (-(1.0 - beta) * (std::log(pic) + 1.0));
            }
            if (ph > 0.0) {
              for (int k = 0; k < 4; ++k) {
                const std::size_t ti = (static_cast<std::size_t>(pt.strong_i) * C + c) * 4 +
                                       static_cast<std::size_t>(k);
                dt[ti] += g * ph * -smooth_l1_prime(pt.tjc[k] - td[ti]);
              }
            }
          }
        }
      });
}

}  // namespace codetect
