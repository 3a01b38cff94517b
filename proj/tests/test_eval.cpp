#include <doctest.h>

#include <filesystem>

#include "codetect/eval.hpp"
#include "codetect/rng.hpp"
#include "oracles.hpp"

using namespace codetect;
namespace fs = std::filesystem;

namespace {

GtMap one_gt(int image, int cls, const Box& b) {
  GtMap gt;
  gt[image].push_back(GtBox{b, cls});
  return gt;
}

}  // namespace

TEST_CASE("average precision: perfect hit and sub-threshold miss") {
  const GtMap gt = one_gt(0, 0, Box{10, 10, 20, 20});

  std::vector<DetectionRecord> hit{{0, 0, 0.9, Box{10, 10, 20, 20}}};
  CHECK(average_precision(hit, gt, 0) == doctest::Approx(1.0));

  // IoU 0.3 with the target: counts as a false positive
  std::vector<DetectionRecord> miss{{0, 0, 0.9, Box{13.7, 10, 23.7, 20}}};
  CHECK(iou(miss[0].box, Box{10, 10, 20, 20}) < 0.5);
  CHECK(average_precision(miss, gt, 0) == doctest::Approx(0.0));

  CHECK(average_precision(hit, gt, 1) == -1.0);  // no gt for that class
}

TEST_CASE("average precision: hand-computed TP/FP/TP sequence gives 5/6") {
  GtMap gt;
  gt[0].push_back(GtBox{Box{0, 0, 10, 10}, 0});
  gt[1].push_back(GtBox{Box{0, 0, 10, 10}, 0});
  std::vector<DetectionRecord> dets{
      {0, 0, 0.9, Box{0, 0, 10, 10}},    // TP, recall 1/2, precision 1
      {0, 0, 0.8, Box{30, 30, 40, 40}},  // FP, precision 1/2
      {1, 0, 0.7, Box{0, 0, 10, 10}},    // TP, recall 1, precision 2/3
  };
  CHECK(average_precision(dets, gt, 0) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(oracles::reference_average_precision(dets, gt, 0) ==
        doctest::Approx(5.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("average precision is invariant to record order") {
  Rng rng(31415);
  GtMap gt;
  for (int img = 0; img < 4; ++img)
    for (int k = 0; k < 2; ++k)
      gt[img].push_back(GtBox{oracles::random_box(rng, 20.0, 3.0, 8.0), 0});
  std::vector<DetectionRecord> dets;
  for (int img = 0; img < 4; ++img)
    for (int k = 0; k < 5; ++k) {
      // distinct scores so reordering cannot change the ranking
      dets.push_back(DetectionRecord{img, 0, rng.uniform(0.01, 0.99),
                                     oracles::random_box(rng, 20.0, 3.0, 8.0)});
    }
  const double base = average_precision(dets, gt, 0);
  std::vector<DetectionRecord> shuffled = dets;
  for (int t = 0; t < 5; ++t) {
    rng.shuffle(shuffled);
    CHECK(average_precision(shuffled, gt, 0) == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("mAP: trivial limits and gt-free class exclusion") {
  GtMap gt;
  gt[0].push_back(GtBox{Box{0, 0, 10, 10}, 0});
  gt[0].push_back(GtBox{Box{20, 20, 30, 30}, 2});
  std::vector<DetectionRecord> perfect{
      {0, 0, 0.9, Box{0, 0, 10, 10}},
      {0, 2, 0.8, Box{20, 20, 30, 30}},
  };
  // class 1 has no gt anywhere and is excluded from the mean
  CHECK(mean_average_precision(perfect, gt, 3) == doctest::Approx(1.0));
  CHECK(mean_average_precision({}, gt, 3) == doctest::Approx(0.0));
}

TEST_CASE("evaluator agrees with the independent reference on random fixtures") {
  Rng rng(2718);
  for (int trial = 0; trial < 40; ++trial) {
    const int n_images = rng.uniform_int(1, 11);
    const int n_classes = rng.uniform_int(1, 4);
    GtMap gt;
    std::vector<DetectionRecord> dets;
    for (int img = 0; img < n_images; ++img) {
      const int n_gt = rng.uniform_int(0, 4);
      for (int k = 0; k < n_gt; ++k)
        gt[img].push_back(
            GtBox{oracles::random_box(rng, 24.0, 3.0, 9.0), rng.uniform_int(0, n_classes)});
      const int n_det = rng.uniform_int(0, 7);
      for (int k = 0; k < n_det; ++k) {
        // mix fresh boxes with jittered copies of gt so some detections hit
        Box b = oracles::random_box(rng, 24.0, 3.0, 9.0);
        if (!gt[img].empty() && rng.bernoulli(0.5)) {
          const Box& g = gt[img][static_cast<std::size_t>(
              rng.uniform_int(0, static_cast<int>(gt[img].size())))].box;
          b = Box{g.x1 + rng.uniform(-1.0, 1.0), g.y1 + rng.uniform(-1.0, 1.0),
                  g.x2 + rng.uniform(-1.0, 1.0), g.y2 + rng.uniform(-1.0, 1.0)};
        }
        dets.push_back(DetectionRecord{img, rng.uniform_int(0, n_classes), rng.uniform(), b});
      }
      if (gt[img].empty()) gt.erase(img);
    }
    for (int c = 0; c < n_classes; ++c) {
      const double mine = average_precision(dets, gt, c);
      const double ref = oracles::reference_average_precision(dets, gt, c);
      if (ref < 0.0)
        CHECK(mine < 0.0);
      else
        CHECK(mine == doctest::Approx(ref).epsilon(1e-9));
    }
    CHECK(mean_average_precision(dets, gt, n_classes) ==
          doctest::Approx(oracles::reference_map(dets, gt, n_classes)).epsilon(1e-9));
  }
}

TEST_CASE("corloc: full, empty and fractional hit rates") {
  LabelMap labels;
  GtMap gt;
  for (int img = 0; img < 6; ++img) {
    labels[img] = {1.0};
    gt[img].push_back(GtBox{Box{5, 5, 15, 15}, 0});
  }

  std::vector<DetectionRecord> on_target, off_target, mixed;
  for (int img = 0; img < 6; ++img) {
    on_target.push_back({img, 0, 0.8, Box{5, 5, 15, 15}});
    off_target.push_back({img, 0, 0.8, Box{40, 40, 50, 50}});
    // first half hit, second half miss; a low-scored decoy checks top-1 use
    mixed.push_back({img, 0, 0.9, img < 3 ? Box{5.5, 5.0, 15.5, 15.0} : Box{40, 40, 50, 50}});
    mixed.push_back({img, 0, 0.1, img < 3 ? Box{40, 40, 50, 50} : Box{5, 5, 15, 15}});
  }
  CHECK(corloc(on_target, gt, labels, 1).mean == doctest::Approx(1.0));
  CHECK(corloc(off_target, gt, labels, 1).mean == doctest::Approx(0.0));
  CHECK(corloc(mixed, gt, labels, 1).mean == doctest::Approx(0.5));
  CHECK(corloc(mixed, gt, labels, 1).per_class[0] == doctest::Approx(0.5));

  // an image without the label never counts against the class
  labels[99] = {0.0};
  CHECK(corloc(on_target, gt, labels, 1).mean == doctest::Approx(1.0));
}

TEST_CASE("detection CSV round-trips exactly") {
  const fs::path dir = fs::temp_directory_path() / "codetect_tests" / "detcsv";
  fs::create_directories(dir);
  Rng rng(99);
  std::vector<DetectionRecord> dets;
  for (int k = 0; k < 25; ++k)
    dets.push_back(DetectionRecord{rng.uniform_int(0, 9), rng.uniform_int(0, 4), rng.uniform(),
                                   oracles::random_box(rng)});
  write_detections_csv(dir / "d.csv", dets);
  const auto back = read_detections_csv(dir / "d.csv");
  REQUIRE(back.size() == dets.size());
  for (std::size_t k = 0; k < dets.size(); ++k) {
    CHECK(back[k].image_id == dets[k].image_id);
    CHECK(back[k].cls == dets[k].cls);
    CHECK(back[k].score == dets[k].score);
    CHECK(back[k].box.x1 == dets[k].box.x1);
    CHECK(back[k].box.y2 == dets[k].box.y2);
  }
  CHECK_THROWS_AS(read_detections_csv(dir / "missing.csv"), config_error);
}
