#include <doctest.h>

#include <cmath>

#include "codetect/consistency.hpp"
#include "codetect/gradcheck.hpp"
#include "oracles.hpp"

using namespace codetect;

namespace {

MaxoutTargets one_hot_targets(int n_regions, int n_classes, int region, int cls) {
  MaxoutTargets mt;
  mt.n_regions = n_regions;
  mt.n_classes = n_classes;
  mt.p_hat.assign(static_cast<std::size_t>(n_regions) * n_classes, 0.0);
  mt.selected.assign(static_cast<std::size_t>(n_classes), -1);
  if (region >= 0) {
    mt.p_hat[static_cast<std::size_t>(region) * n_classes + cls] = 1.0;
    mt.selected[static_cast<std::size_t>(cls)] = region;
  }
  return mt;
}

StrongPredictions constant_predictions(Tape& t, std::vector<double> p, std::vector<double> td,
                                       int B, int C) {
  StrongPredictions sp;
  sp.n_proposals = B;
  sp.n_classes = C;
  sp.p = t.constant({B, C + 1}, std::move(p));
  sp.t = t.constant({B, 4 * C}, std::move(td));
  return sp;
}

}  // namespace

TEST_CASE("smooth_l1: piecewise values") {
  const double zero[4] = {0, 0, 0, 0};
  CHECK(smooth_l1(zero) == 0.0);
  const double small[4] = {0.5, 0, 0, 0};
  CHECK(smooth_l1(small) == doctest::Approx(0.125).epsilon(1e-15));
  const double big[4] = {2.0, 0, 0, 0};
  CHECK(smooth_l1(big) == doctest::Approx(1.5).epsilon(1e-15));
  const double mixed[4] = {0.5, -2.0, 1.0, 0.0};
  CHECK(smooth_l1(mixed) == doctest::Approx(0.125 + 1.5 + 0.5).epsilon(1e-15));
}

TEST_CASE("consistency loss: hand-evaluated single pair") {
  // one strong proposal, one weak box, one foreground class; the strong row
  // is (0.5, 0.5) and the delta difference is (0.5, 0, 0, 0)
  const std::vector<Box> props{Box{0, 0, 2, 2}};
  const std::vector<Box> weak{Box{0.2, 0, 2.2, 2}};
  const MatchSet ms = match_regions(props, weak, 0.5);
  REQUIRE(ms.size() == 1);
  CHECK(ms.pairs[0].iou == doctest::Approx(3.6 / 4.4).epsilon(1e-12));

  Registry reg;
  Tape t(reg);
  // weak box encodes to dx=0.1 against the proposal; predicting dx=-0.4
  // leaves a delta difference of (0.5, 0, 0, 0)
  StrongPredictions sp = constant_predictions(t, {0.5, 0.5}, {-0.4, 0, 0, 0}, 1, 1);
  ConsistencyConfig cfg;
  cfg.beta = 0.8;
  ConsistencyBreakdown bd;
  Value loss = consistency_loss(t, one_hot_targets(1, 1, 0, 0), weak, sp, props, ms, cfg, &bd);

  const double ln_half = std::log(0.5);
  CHECK(bd.cp_inter == doctest::Approx(-0.8 * ln_half).epsilon(1e-9));
  CHECK(bd.cp_inner == doctest::Approx(-0.2 * 0.5 * ln_half).epsilon(1e-9));
  CHECK(bd.cl_inter == doctest::Approx(0.125).epsilon(1e-9));
  CHECK(bd.total == doctest::Approx(0.7488).epsilon(1e-3));
  CHECK(bd.matched_pairs == 1);
  CHECK(t.scalar(loss) == bd.total);
}

TEST_CASE("consistency loss: exact zero at perfect agreement and on empty matches") {
  const std::vector<Box> props{Box{0, 0, 2, 2}};
  const std::vector<Box> weak{Box{0.2, 0, 2.2, 2}};
  const MatchSet ms = match_regions(props, weak, 0.5);
  const Delta tjc = encode_delta(props[0], weak[0]);
  ConsistencyConfig cfg;

  {  // constant probabilities
    Registry reg;
    Tape t(reg);
    StrongPredictions sp =
        constant_predictions(t, {1.0, 0.0}, {tjc.dx, tjc.dy, tjc.dw, tjc.dh}, 1, 1);
    ConsistencyBreakdown bd;
    Value loss = consistency_loss(t, one_hot_targets(1, 1, 0, 0), weak, sp, props, ms, cfg, &bd);
    CHECK(t.scalar(loss) == 0.0);
    CHECK(bd.cp_inter == 0.0);
    CHECK(bd.cp_inner == 0.0);
    CHECK(bd.cl_inter == 0.0);
  }
  {  // probabilities produced by an actual softmax saturated to exactly 1.0
    Registry reg;
    Tape t(reg);
    StrongPredictions sp;
    sp.n_proposals = 1;
    sp.n_classes = 1;
    sp.p = t.softmax(t.constant({1, 2}, {40.0, -40.0}), 1);
    CHECK(t.val(sp.p)[0] == 1.0);
    sp.t = t.constant({1, 4}, {tjc.dx, tjc.dy, tjc.dw, tjc.dh});
    Value loss = consistency_loss(t, one_hot_targets(1, 1, 0, 0), weak, sp, props, ms, cfg);
    CHECK(t.scalar(loss) == 0.0);
  }
  {  // no matches at all
    Registry reg;
    Tape t(reg);
    StrongPredictions sp = constant_predictions(t, {0.3, 0.7}, {0, 0, 0, 0}, 1, 1);
    ConsistencyBreakdown bd;
    Value loss = consistency_loss(t, one_hot_targets(1, 1, 0, 0), weak, sp, props, MatchSet{},
                                  cfg, &bd);
    CHECK(t.scalar(loss) == 0.0);
    CHECK(bd.matched_pairs == 0);
  }
}

TEST_CASE("consistency loss validates beta") {
  Registry reg;
  Tape t(reg);
  const std::vector<Box> props{Box{0, 0, 2, 2}};
  StrongPredictions sp = constant_predictions(t, {0.5, 0.5}, {0, 0, 0, 0}, 1, 1);
  MatchSet ms;
  ms.pairs.push_back(Match{0, 0, 0.8});
  for (double bad : {0.0, 1.0, 1.5, -0.2}) {
    ConsistencyConfig cfg;
    cfg.beta = bad;
    CHECK_THROWS_AS(
        consistency_loss(t, one_hot_targets(1, 1, 0, 0), props, sp, props, ms, cfg),
        invalid_input);
  }
}

TEST_CASE("consistency parts: nonnegative, beta-termwise scaling, pair normalization") {
  Rng rng(1618);
  for (int trial = 0; trial < 25; ++trial) {
    const int B = rng.uniform_int(1, 5);
    const int C = rng.uniform_int(1, 4);
    std::vector<Box> props, weak;
    for (int i = 0; i < B; ++i) {
      const Box b = oracles::random_box(rng, 12.0, 2.0, 6.0);
      props.push_back(b);
      // a nearby weak box guarantees some matches
      weak.push_back(Box{b.x1 + 0.2, b.y1 + 0.1, b.x2 + 0.2, b.y2 + 0.1});
    }
    const MatchSet ms = match_regions(props, weak, 0.5);
    std::vector<double> p(static_cast<std::size_t>(B) * (C + 1));
    std::vector<double> td(static_cast<std::size_t>(B) * 4 * C);
    for (int i = 0; i < B; ++i) {  // random rows summing to one
      double z = 0.0;
      for (int c = 0; c <= C; ++c) {
        p[static_cast<std::size_t>(i) * (C + 1) + c] = rng.uniform(0.05, 1.0);
        z += p[static_cast<std::size_t>(i) * (C + 1) + c];
      }
      for (int c = 0; c <= C; ++c) p[static_cast<std::size_t>(i) * (C + 1) + c] /= z;
    }
    for (auto& v : td) v = rng.uniform(-1.0, 1.0);
    MaxoutTargets mt = one_hot_targets(B, C, rng.uniform_int(0, B), rng.uniform_int(0, C));

    const double beta = rng.uniform(0.1, 0.9);
    ConsistencyConfig cfg;
    cfg.beta = beta;
    Registry reg;
    Tape t(reg);
    StrongPredictions sp = constant_predictions(t, p, td, B, C);
    ConsistencyBreakdown bd;
    consistency_loss(t, mt, weak, sp, props, ms, cfg, &bd);

    CHECK(bd.cp_inter >= 0.0);
    CHECK(bd.cp_inner >= 0.0);
    CHECK(bd.cl_inter >= 0.0);
    CHECK(bd.total == doctest::Approx(bd.cp_inter + bd.cp_inner + bd.cl_inter).epsilon(1e-12));

    // recompute the beta-free factors directly
    double inter_raw = 0.0, inner_raw = 0.0;
    for (const auto& m : ms.pairs)
      for (int c = 0; c < C; ++c) {
        const double pic = p[static_cast<std::size_t>(m.strong) * (C + 1) + c];
        if (mt.at(m.weak, c) > 0.0) inter_raw += -std::log(pic);
        inner_raw += -pic * std::log(pic);
      }
    const double norm = std::max(1, ms.size());
    CHECK(bd.cp_inter == doctest::Approx(beta * inter_raw / norm).epsilon(1e-9));
    CHECK(bd.cp_inner == doctest::Approx((1.0 - beta) * inner_raw / norm).epsilon(1e-9));

    // with normalization off the parts scale by the pair count
    ConsistencyConfig raw_cfg = cfg;
    raw_cfg.normalize = false;
    ConsistencyBreakdown bd_raw;
    Tape t2(reg);
    StrongPredictions sp2 = constant_predictions(t2, p, td, B, C);
    consistency_loss(t2, mt, weak, sp2, props, ms, raw_cfg, &bd_raw);
    CHECK(bd_raw.total == doctest::Approx(bd.total * norm).epsilon(1e-9));
  }
}

TEST_CASE("sharpening toward the matched class never raises the category part") {
  const std::vector<Box> props{Box{0, 0, 4, 4}};
  const std::vector<Box> weak{Box{0.2, 0.1, 4.2, 4.1}};
  const MatchSet ms = match_regions(props, weak, 0.5);
  REQUIRE(ms.size() == 1);
  const int C = 2;
  ConsistencyConfig cfg;
  double prev = 1e300;
  for (double lam = 0.0; lam <= 6.0; lam += 0.25) {
    Registry reg;
    Tape t(reg);
    StrongPredictions sp;
    sp.n_proposals = 1;
    sp.n_classes = C;
    sp.p = t.softmax(t.constant({1, C + 1}, {lam, 0.0, 0.0}), 1);
    sp.t = t.constant({1, 4 * C}, std::vector<double>(4 * C, 0.0));
    ConsistencyBreakdown bd;
    consistency_loss(t, one_hot_targets(1, C, 0, 0), weak, sp, props, ms, cfg, &bd);
    const double category = bd.cp_inter + bd.cp_inner;
    CHECK(category <= prev + 1e-12);
    prev = category;
  }
}

TEST_CASE("consistency gradient flows only into the strong outputs") {
  Registry reg;
  Rng rng(33);
  // weak streams parameterized so they sit on the tape alongside the loss
  std::vector<double> cls(static_cast<std::size_t>(2) * 2), loc(cls.size());
  for (auto& v : cls) v = rng.uniform(-1.0, 1.0);
  for (auto& v : loc) v = rng.uniform(-1.0, 1.0);
  reg.add("wcls.w", {2, 2}, cls);
  reg.add("wcls.b", {2}, {0.0, 0.0});
  reg.add("wloc.w", {2, 2}, loc);
  reg.add("wloc.b", {2}, {0.0, 0.0});
  reg.add("scls_logits", {2, 3}, {0.5, -0.2, 0.1, 0.3, 0.4, -0.6});
  reg.add("sreg_out", {2, 8}, std::vector<double>(16, 0.05));

  const std::vector<Box> props{Box{1, 1, 5, 5}, Box{8, 8, 12, 12}};
  const std::vector<Box> weak{Box{1.2, 1.1, 5.2, 5.1}, Box{8.1, 8.2, 12.1, 12.2}};
  const MatchSet ms = match_regions(props, weak, 0.5);
  REQUIRE(ms.size() == 2);

  Tape t(reg);
  std::vector<double> eye{1, 0, 0, 1};
  Value feats = t.constant({2, 2}, eye);
  WeakScores ws = score_regions(t, feats, 2);
  MaxoutTargets mt = maxout(t.val(ws.p), 2, 2, std::vector<double>{1.0, 0.0});

  StrongPredictions sp;
  sp.n_proposals = 2;
  sp.n_classes = 2;
  sp.p = t.softmax(t.param("scls_logits"), 1);
  sp.t = t.param("sreg_out");
  ConsistencyConfig cfg;
  Value loss = consistency_loss(t, mt, weak, sp, props, ms, cfg);
  t.backward(loss);

  for (const char* name : {"wcls.w", "wcls.b", "wloc.w", "wloc.b"})
    for (double g : reg.entry(name).grad) CHECK(g == 0.0);
  double strong_mass = 0.0;
  for (double g : reg.entry("scls_logits").grad) strong_mass += std::fabs(g);
  CHECK(strong_mass > 0.0);
}

TEST_CASE("consistency gradient passes finite differences through both heads") {
  Registry reg;
  Rng rng(55);
  const int B = 3, C = 2;
  std::vector<double> logits(static_cast<std::size_t>(B) * (C + 1));
  std::vector<double> deltas(static_cast<std::size_t>(B) * 4 * C);
  for (auto& v : logits) v = rng.uniform(-1.0, 1.0);
  for (auto& v : deltas) v = rng.uniform(-0.6, 0.6);
  reg.add("cls", {B, C + 1}, logits);
  reg.add("reg", {B, 4 * C}, deltas);

  std::vector<Box> props, weak;
  for (int i = 0; i < B; ++i) {
    const Box b = oracles::random_box(rng, 12.0, 2.5, 6.0);
    props.push_back(b);
    weak.push_back(Box{b.x1 + 0.3, b.y1 + 0.2, b.x2 + 0.3, b.y2 + 0.2});
  }
  const MatchSet ms = match_regions(props, weak, 0.5);
  REQUIRE(!ms.empty());
  MaxoutTargets mt = one_hot_targets(B, C, 1, 0);
  mt.p_hat[static_cast<std::size_t>(2) * C + 1] = 1.0;  // second positive class
  mt.selected[1] = 2;

  ConsistencyConfig cfg;
  auto fn = [&](bool do_backward) {
    Tape t(reg);
    StrongPredictions sp;
    sp.n_proposals = B;
    sp.n_classes = C;
    sp.p = t.softmax(t.param("cls"), 1);
    sp.t = t.param("reg");
    Value loss = consistency_loss(t, mt, weak, sp, props, ms, cfg);
    const double v = t.scalar(loss);
    if (do_backward) t.backward(loss);
    return v;
  };
  Rng srng(56);
  CHECK(grad_check(reg, fn, 1e-5, 40, srng) < 1e-4);
}
