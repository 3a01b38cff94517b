#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "codetect/dataset.hpp"

using namespace codetect;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* leaf) {
  const fs::path p = fs::temp_directory_path() / "codetect_tests" / leaf;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

DatasetConfig small_cfg() {
  DatasetConfig cfg;
  cfg.seed = 11;
  cfg.n_images = 40;
  cfg.n_train = 30;
  cfg.n_classes = 4;
  return cfg;
}

}  // namespace

TEST_CASE("generation is byte-identical for a fixed seed") {
  const fs::path a = temp_dir("gen_a");
  const fs::path b = temp_dir("gen_b");
  generate_dataset(small_cfg(), a);
  generate_dataset(small_cfg(), b);
  CHECK(slurp(a / "manifest.txt") == slurp(b / "manifest.txt"));
  CHECK(slurp(a / "images/img_00000.rgb") == slurp(b / "images/img_00000.rgb"));
  CHECK(slurp(a / "images/img_00039.rgb") == slurp(b / "images/img_00039.rgb"));

  DatasetConfig other = small_cfg();
  other.seed = 12;
  const fs::path c = temp_dir("gen_c");
  generate_dataset(other, c);
  CHECK(slurp(a / "images/img_00000.rgb") != slurp(c / "images/img_00000.rgb"));
}

TEST_CASE("every scene satisfies the label/instance invariant and bounds") {
  const fs::path dir = temp_dir("gen_inv");
  generate_dataset(small_cfg(), dir);
  const Dataset ds = load_dataset(dir);
  REQUIRE(static_cast<int>(ds.scenes.size()) == 40);
  CHECK(static_cast<int>(ds.train_ids.size()) == 30);
  CHECK(static_cast<int>(ds.test_ids.size()) == 10);
  for (const auto& s : ds.scenes) {
    REQUIRE(static_cast<int>(s.label.size()) == 4);
    REQUIRE(!s.gts.empty());
    std::vector<double> derived(4, 0.0);
    for (const auto& g : s.gts) {
      derived[static_cast<std::size_t>(g.cls)] = 1.0;
      CHECK(g.box.valid());
      CHECK(g.box.x1 >= 0.0);
      CHECK(g.box.y1 >= 0.0);
      CHECK(g.box.x2 <= 64.0);
      CHECK(g.box.y2 <= 64.0);
      CHECK(g.box.area() >= 36.0);  // at least the 6x6 evaluation floor
    }
    CHECK(derived == s.label);
  }
}

TEST_CASE("class frequency stays within 15% of uniform on the default set") {
  const fs::path dir = temp_dir("gen_freq");
  DatasetConfig cfg;  // defaults: 500 images, 4 classes
  cfg.n_images = 120;
  cfg.n_train = 100;
  generate_dataset(cfg, dir);
  const Dataset ds = load_dataset(dir);
  std::vector<int> count(4, 0);
  int total = 0;
  for (const auto& s : ds.scenes)
    for (const auto& g : s.gts) {
      ++count[static_cast<std::size_t>(g.cls)];
      ++total;
    }
  const double uniform = total / 4.0;
  for (int c = 0; c < 4; ++c) {
    CHECK(count[static_cast<std::size_t>(c)] > 0.85 * uniform);
    CHECK(count[static_cast<std::size_t>(c)] < 1.15 * uniform);
  }
}

TEST_CASE("manifest round-trip preserves labels and boxes") {
  const fs::path dir = temp_dir("gen_rt");
  generate_dataset(small_cfg(), dir);
  const Dataset ds = load_dataset(dir);
  std::vector<int> budget(4, 0);
  const Scene fresh = make_scene(small_cfg(), 0, budget);
  const Scene& loaded = ds.scene(0);
  CHECK(loaded.label == fresh.label);
  REQUIRE(loaded.gts.size() == fresh.gts.size());
  for (std::size_t k = 0; k < fresh.gts.size(); ++k) {
    CHECK(loaded.gts[k].cls == fresh.gts[k].cls);
    CHECK(loaded.gts[k].box.x1 == doctest::Approx(fresh.gts[k].box.x1).epsilon(1e-5));
    CHECK(loaded.gts[k].box.y2 == doctest::Approx(fresh.gts[k].box.y2).epsilon(1e-5));
  }
  CHECK(loaded.img.rgb == fresh.img.rgb);
}

TEST_CASE("dataset config validation") {
  DatasetConfig cfg = small_cfg();
  cfg.n_classes = 1;
  const fs::path dir = temp_dir("gen_bad");
  CHECK_THROWS_AS(generate_dataset(cfg, dir), config_error);
  cfg = small_cfg();
  cfg.n_train = cfg.n_images;
  CHECK_THROWS_AS(generate_dataset(cfg, dir), config_error);
  cfg = small_cfg();
  cfg.image_size = 30;
  CHECK_THROWS_AS(generate_dataset(cfg, dir), config_error);
}

TEST_CASE("flip is an involution and mirrors boxes") {
  std::vector<int> budget(4, 0);
  DatasetConfig cfg = small_cfg();
  const Scene s = make_scene(cfg, 3, budget);
  const Scene once = flip_horizontal(s);
  const Scene twice = flip_horizontal(once);
  CHECK(twice.img.rgb == s.img.rgb);
  CHECK(twice.gts[0].box.x1 == doctest::Approx(s.gts[0].box.x1).epsilon(1e-12));
  CHECK(once.label == s.label);

  Scene toy;
  toy.img.width = 64;
  toy.img.height = 64;
  toy.img.rgb.assign(64 * 64 * 3, 0);
  toy.label = {1.0};
  toy.gts.push_back(GtBox{Box{10, 10, 20, 20}, 0});
  const Scene flipped = flip_horizontal(toy);
  CHECK(flipped.gts[0].box.x1 == doctest::Approx(44.0));
  CHECK(flipped.gts[0].box.y1 == doctest::Approx(10.0));
  CHECK(flipped.gts[0].box.x2 == doctest::Approx(54.0));
  CHECK(flipped.gts[0].box.y2 == doctest::Approx(20.0));
}

TEST_CASE("augment: labels invariant, scale membership, deterministic per seed") {
  std::vector<int> budget(4, 0);
  const Scene s = make_scene(small_cfg(), 5, budget);
  bool saw_small = false, saw_base = false, saw_big = false;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const Scene a = augment(s, seed);
    CHECK(a.label == s.label);
    CHECK(a.gts.size() == s.gts.size());
    if (a.img.width == 48) saw_small = true;
    if (a.img.width == 64) saw_base = true;
    if (a.img.width == 80) saw_big = true;
    const Scene b = augment(s, seed);
    CHECK(a.img.rgb == b.img.rgb);
    // boxes track the transform
    const double sx = a.img.width / 64.0;
    CHECK(a.gts[0].box.width() == doctest::Approx(s.gts[0].box.width() * sx).epsilon(1e-9));
  }
  CHECK(saw_small);
  CHECK(saw_base);
  CHECK(saw_big);
}

TEST_CASE("augment_box mirrors apply_augment's ground-truth bookkeeping") {
  std::vector<int> budget(4, 0);
  const Scene s = make_scene(small_cfg(), 7, budget);
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const AugmentChoice ac = sample_augment(seed);
    const Scene a = apply_augment(s, ac);
    for (std::size_t k = 0; k < s.gts.size(); ++k) {
      const Box via_box = augment_box(s.gts[k].box, s.img.width, s.img.height, ac);
      CHECK(via_box.x1 == doctest::Approx(a.gts[k].box.x1).epsilon(1e-12));
      CHECK(via_box.y2 == doctest::Approx(a.gts[k].box.y2).epsilon(1e-12));
    }
  }
}

TEST_CASE("image tensor conversion maps bytes into [0,1]") {
  SceneImage img;
  img.width = 2;
  img.height = 1;
  img.rgb = {0, 128, 255, 51, 102, 204};
  const Tensor t = image_to_tensor(img);
  CHECK(t.shape == std::vector<int>{3, 1, 2});
  CHECK(t.v[0] == doctest::Approx(0.0));          // R at (0,0)
  CHECK(t.v[1] == doctest::Approx(51.0 / 255));   // R at (0,1)
  CHECK(t.v[2] == doctest::Approx(128.0 / 255));  // G at (0,0)
  CHECK(t.v[5] == doctest::Approx(204.0 / 255));  // B at (0,1)
}
