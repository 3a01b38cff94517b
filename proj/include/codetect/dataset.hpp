#pragma once

// Synthetic shapes detection benchmark. Scenes are textured noise backgrounds
// with 1-3 colored shapes (disk, square, triangle, ring, cross), thin-line
// distractors and occasional partial occlusions. Image-level labels are the
// training signal; per-instance ground-truth boxes are stored for evaluation
// only.
//
// On-disk layout (written by generate_dataset, documented in the README):
//   <dir>/manifest.txt    human-readable structured text
//   <dir>/images/img_%05d.rgb  uint32 height, uint32 width (little-endian),
//                              then height*width*3 bytes of row-major RGB

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "codetect/box.hpp"
#include "codetect/errors.hpp"
#include "codetect/eval.hpp"
#include "codetect/rng.hpp"
#include "codetect/tensor.hpp"

namespace codetect {

struct SceneImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, interleaved

  std::uint8_t at(int y, int x, int ch) const {
    return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
  }
};

struct Scene {
  int id = 0;
  SceneImage img;
  std::vector<double> label;  // 0/1 per class
  std::vector<GtBox> gts;     // evaluation only, never a training input
};

struct DatasetConfig {
  std::uint64_t seed = 1;
  int n_images = 500;
  int n_train = 400;
  int n_classes = 4;  // 2..5 of {disk, square, triangle, ring, cross}
  int image_size = 64;

  int min_objects = 1;
  int max_objects = 3;
  double min_object_size = 18.0;
  double max_object_size = 30.0;

  // difficulty knobs
  int distractors = 2;
  double texture_amp = 0.04;
  double noise_amp = 0.03;
  double occlusion_prob = 0.15;
  double color_outlier_prob = 0.10;  // objects drawn outside their class hue band
};

inline void validate(const DatasetConfig& cfg) {
  if (cfg.n_classes < 2 || cfg.n_classes > 5)
    throw config_error("dataset: n_classes must be in [2,5]");
  if (cfg.n_train <= 0 || cfg.n_train >= cfg.n_images)
    throw config_error("dataset: need 0 < n_train < n_images");
  if (cfg.image_size < 32 || cfg.image_size % 4 != 0)
    throw config_error("dataset: image_size must be >= 32 and divisible by 4");
  if (cfg.min_object_size < 6.0)
    throw config_error("dataset: objects below the 6px evaluation floor");
}

struct Dataset {
  DatasetConfig cfg;
  std::vector<Scene> scenes;   // ordered by id
  std::vector<int> train_ids;
  std::vector<int> test_ids;

  const Scene& scene(int id) const { return scenes.at(static_cast<std::size_t>(id)); }
};

inline Tensor image_to_tensor(const SceneImage& img) {
  Tensor t = Tensor::zeros({3, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int ch = 0; ch < 3; ++ch)
        t.v[(static_cast<std::size_t>(ch) * img.height + y) * img.width + x] =
            img.at(y, x, ch) / 255.0;
  return t;
}

inline GtMap gt_map(const Dataset& ds, const std::vector<int>& ids) {
  GtMap out;
  for (int id : ids) out[id] = ds.scene(id).gts;
  return out;
}

inline LabelMap label_map(const Dataset& ds, const std::vector<int>& ids) {
  LabelMap out;
  for (int id : ids) out[id] = ds.scene(id).label;
  return out;
}

// ---- scene synthesis ----

namespace detail {

enum class ShapeKind { disk, square, triangle, ring, cross };

struct ShapeSpec {
  ShapeKind kind;
  double cx, cy;
  double sx, sy;  // half extents of the bounding box
  std::array<double, 3> color;
};

inline bool inside_shape(const ShapeSpec& s, double x, double y) {
  const double dx = (x - s.cx) / s.sx;
  const double dy = (y - s.cy) / s.sy;  // normalized to [-1,1] inside the bbox
  switch (s.kind) {
    case ShapeKind::disk:
      return dx * dx + dy * dy <= 1.0;
    case ShapeKind::square:
      return std::fabs(dx) <= 1.0 && std::fabs(dy) <= 1.0;
    case ShapeKind::triangle: {  // apex up, base at the bottom edge
      if (dy < -1.0 || dy > 1.0) return false;
      return std::fabs(dx) <= 0.5 * (dy + 1.0);
    }
    case ShapeKind::ring: {
      const double r2 = dx * dx + dy * dy;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case ShapeKind::cross: {
      const double arm = 0.34;
      return (std::fabs(dx) <= arm && std::fabs(dy) <= 1.0) ||
             (std::fabs(dy) <= arm && std::fabs(dx) <= 1.0);
    }
  }
  return false;
}

inline Box shape_bbox(const ShapeSpec& s) {
  return Box{s.cx - s.sx, s.cy - s.sy, s.cx + s.sx, s.cy + s.sy};
}

// 2x2 supersampled coverage blend of one shape into the float canvas.
inline void draw_shape(std::vector<double>& canvas, int W, int H, const ShapeSpec& s) {
  const Box bb = shape_bbox(s);
  const int x0 = std::max(0, static_cast<int>(std::floor(bb.x1)) - 1);
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(bb.x2)) + 1);
  const int y0 = std::max(0, static_cast<int>(std::floor(bb.y1)) - 1);
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(bb.y2)) + 1);
  static constexpr double sub[2] = {0.25, 0.75};
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      int hits = 0;
      for (double oy : sub)
        for (double ox : sub)
          if (inside_shape(s, x + ox, y + oy)) ++hits;
      if (hits == 0) continue;
      const double cov = hits / 4.0;
      for (int ch = 0; ch < 3; ++ch) {
        double& px = canvas[(static_cast<std::size_t>(y) * W + x) * 3 + ch];
        px = px * (1.0 - cov) + s.color[static_cast<std::size_t>(ch)] * cov;
      }
    }
}

inline void draw_line(std::vector<double>& canvas, int W, int H, double ax, double ay, double bx,
                      double by, double width, const std::array<double, 3>& color) {
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - width)));
  const int x1 = std::min(W - 1, static_cast<int>(std::ceil(std::max(ax, bx) + width)));
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - width)));
  const int y1 = std::min(H - 1, static_cast<int>(std::ceil(std::max(ay, by) + width)));
  const double vx = bx - ax, vy = by - ay;
  const double len2 = std::max(1e-9, vx * vx + vy * vy);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double u = std::clamp(((px - ax) * vx + (py - ay) * vy) / len2, 0.0, 1.0);
      const double dx = px - (ax + u * vx), dy = py - (ay + u * vy);
      const double d = std::sqrt(dx * dx + dy * dy);
      if (d > width) continue;
      const double cov = std::clamp(1.0 - d / width, 0.0, 1.0) * 0.85;
      for (int ch = 0; ch < 3; ++ch) {
        double& q = canvas[(static_cast<std::size_t>(y) * W + x) * 3 + ch];
        q = q * (1.0 - cov) + color[static_cast<std::size_t>(ch)] * cov;
      }
    }
}

inline std::array<double, 3> random_color_away_from(Rng& rng, const std::array<double, 3>& avoid,
                                                    double min_dist) {
  for (int tries = 0; tries < 64; ++tries) {
    std::array<double, 3> c{rng.uniform(), rng.uniform(), rng.uniform()};
    double d2 = 0.0;
    for (int k = 0; k < 3; ++k) d2 += (c[static_cast<std::size_t>(k)] - avoid[static_cast<std::size_t>(k)]) *
                                      (c[static_cast<std::size_t>(k)] - avoid[static_cast<std::size_t>(k)]);
    if (std::sqrt(d2) >= min_dist) return c;
  }
  return {1.0, 0.1, 0.1};
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

// Object color: broad class-conditional hue bands with random outliers, so
// color is a strong early cue but never sufficient on its own.
inline std::array<double, 3> object_color(Rng& rng, int cls, double outlier_prob,
                                          const std::array<double, 3>& bg) {
  static constexpr double kHue[5] = {0.0, 0.62, 0.33, 0.12, 0.8};
  for (int tries = 0; tries < 64; ++tries) {
    std::array<double, 3> c;
    if (rng.bernoulli(outlier_prob)) {
      c = hsv_to_rgb(rng.uniform(), rng.uniform(0.55, 1.0), rng.uniform(0.55, 1.0));
    } else {
      c = hsv_to_rgb(kHue[cls % 5] + rng.uniform(-0.07, 0.07), rng.uniform(0.55, 1.0),
                     rng.uniform(0.55, 1.0));
    }
    double d2 = 0.0;
    for (int k = 0; k < 3; ++k)
      d2 += (c[static_cast<std::size_t>(k)] - bg[static_cast<std::size_t>(k)]) *
            (c[static_cast<std::size_t>(k)] - bg[static_cast<std::size_t>(k)]);
    if (std::sqrt(d2) >= 0.3) return c;
  }
  return hsv_to_rgb(kHue[cls % 5], 1.0, 1.0);
}

}  // namespace detail

// Deterministically synthesizes scene `id`. `class_budget` tracks instance
// counts so classes stay near-uniform across the set; it is updated in place.
inline Scene make_scene(const DatasetConfig& cfg, int id, std::vector<int>& class_budget) {
  const int S = cfg.image_size;
  const double rel = S / 64.0;

  for (int attempt = 0; attempt < 100; ++attempt) {
    Rng rng(mix_seed(cfg.seed, 0xDA7A5E7ULL, static_cast<std::uint64_t>(id) * 131 + attempt));

    // textured background: base color + smooth sinusoid + soft blobs + noise
    std::array<double, 3> base{rng.uniform(0.15, 0.75), rng.uniform(0.15, 0.75),
                               rng.uniform(0.15, 0.75)};
    std::vector<double> canvas(static_cast<std::size_t>(S) * S * 3);
    const double fx = rng.uniform(0.05, 0.25), fy = rng.uniform(0.05, 0.25);
    const double phase = rng.uniform(0.0, 6.283);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const double tex = cfg.texture_amp * std::sin(fx * x + fy * y + phase);
        for (int ch = 0; ch < 3; ++ch)
          canvas[(static_cast<std::size_t>(y) * S + x) * 3 + ch] =
              std::clamp(base[static_cast<std::size_t>(ch)] + tex +
                             rng.uniform(-cfg.noise_amp, cfg.noise_amp),
                         0.0, 1.0);
      }
    for (int b = 0; b < 2; ++b) {  // two soft background blobs
      const double bx = rng.uniform(0.0, S), by = rng.uniform(0.0, S);
      const double br = rng.uniform(6.0, 18.0) * rel;
      const double amp = rng.uniform(-0.12, 0.12);
      const int x0 = std::max(0, static_cast<int>(bx - br)), x1 = std::min(S - 1, static_cast<int>(bx + br));
      const int y0 = std::max(0, static_cast<int>(by - br)), y1 = std::min(S - 1, static_cast<int>(by + br));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double d2 = ((x - bx) * (x - bx) + (y - by) * (y - by)) / (br * br);
          if (d2 > 1.0) continue;
          const double w = amp * (1.0 - d2);
          for (int ch = 0; ch < 3; ++ch) {
            double& q = canvas[(static_cast<std::size_t>(y) * S + x) * 3 + ch];
            q = std::clamp(q + w, 0.0, 1.0);
          }
        }
    }

    // distractors: thin line segments, never a labeled shape
    for (int dtr = 0; dtr < cfg.distractors; ++dtr) {
      const double ax = rng.uniform(2.0, S - 2.0), ay = rng.uniform(2.0, S - 2.0);
      const double ang = rng.uniform(0.0, 6.283);
      const double len = rng.uniform(8.0, 16.0) * rel;
      auto color = detail::random_color_away_from(rng, base, 0.25);
      detail::draw_line(canvas, S, S, ax, ay, ax + len * std::cos(ang), ay + len * std::sin(ang),
                        rng.uniform(0.7, 1.3), color);
    }

    // objects
    const int n_objects = rng.uniform_int(cfg.min_objects, cfg.max_objects + 1);
    std::vector<detail::ShapeSpec> specs;
    std::vector<int> classes;
    bool placed_all = true;
    for (int obj = 0; obj < n_objects; ++obj) {
      // keep per-class instance counts within a small band of uniform
      const int min_count = *std::min_element(class_budget.begin(), class_budget.end());
      std::vector<int> eligible;
      for (int c = 0; c < cfg.n_classes; ++c)
        if (class_budget[static_cast<std::size_t>(c)] <= min_count + 4) eligible.push_back(c);
      const int cls = eligible[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(eligible.size())))];

      bool placed = false;
      for (int tries = 0; tries < 40 && !placed; ++tries) {
        const double size = rng.uniform(cfg.min_object_size, cfg.max_object_size) * rel;
        double sx = size / 2, sy = size / 2;
        if (cls == static_cast<int>(detail::ShapeKind::triangle) ||
            cls == static_cast<int>(detail::ShapeKind::cross)) {
          sx *= std::exp(rng.uniform(-0.25, 0.25));
          sy *= std::exp(rng.uniform(-0.25, 0.25));
        }
        const double margin = 1.5;
        if (2 * sx >= S - 2 * margin || 2 * sy >= S - 2 * margin) continue;
        detail::ShapeSpec s;
        s.kind = static_cast<detail::ShapeKind>(cls);
        s.sx = sx;
        s.sy = sy;
        s.cx = rng.uniform(sx + margin, S - sx - margin);
        s.cy = rng.uniform(sy + margin, S - sy - margin);
        s.color = detail::object_color(rng, cls, cfg.color_outlier_prob, base);
        bool clash = false;
        const Box mine = detail::shape_bbox(s);
        for (const auto& other : specs) {
          const Box theirs = detail::shape_bbox(other);
          const Box a{mine.x1 - 2.5, mine.y1 - 2.5, mine.x2 + 2.5, mine.y2 + 2.5};
          if (std::max(a.x1, theirs.x1) < std::min(a.x2, theirs.x2) &&
              std::max(a.y1, theirs.y1) < std::min(a.y2, theirs.y2))
            clash = true;  // objects keep a small separation gap
        }
        if (clash) continue;
        specs.push_back(s);
        classes.push_back(cls);
        placed = true;
      }
      if (!placed) {
        placed_all = false;
        break;
      }
    }
    if (!placed_all) continue;  // regenerate the whole scene

    for (const auto& s : specs) detail::draw_shape(canvas, S, S, s);

    // partial occlusion: a background-colored bar across one side of a shape
    for (std::size_t k = 0; k < specs.size(); ++k) {
      if (!rng.bernoulli(cfg.occlusion_prob)) continue;
      const auto& s = specs[k];
      const Box bb = detail::shape_bbox(s);
      std::array<double, 3> occ{std::clamp(base[0] + rng.uniform(-0.08, 0.08), 0.0, 1.0),
                                std::clamp(base[1] + rng.uniform(-0.08, 0.08), 0.0, 1.0),
                                std::clamp(base[2] + rng.uniform(-0.08, 0.08), 0.0, 1.0)};
      const double w = rng.uniform(1.2, 2.2) * rel;
      if (rng.bernoulli(0.5)) {
        const double yy = rng.uniform(bb.y1 + 0.15 * s.sy, bb.y2 - 0.15 * s.sy);
        detail::draw_line(canvas, S, S, bb.x1 - 1, yy, bb.x2 + 1, yy, w, occ);
      } else {
        const double xx = rng.uniform(bb.x1 + 0.15 * s.sx, bb.x2 - 0.15 * s.sx);
        detail::draw_line(canvas, S, S, xx, bb.y1 - 1, xx, bb.y2 + 1, w, occ);
      }
    }

    Scene scene;
    scene.id = id;
    scene.img.width = S;
    scene.img.height = S;
    scene.img.rgb.resize(canvas.size());
    for (std::size_t i = 0; i < canvas.size(); ++i)
      scene.img.rgb[i] =
          static_cast<std::uint8_t>(std::lround(std::clamp(canvas[i], 0.0, 1.0) * 255.0));
    scene.label.assign(static_cast<std::size_t>(cfg.n_classes), 0.0);
    for (std::size_t k = 0; k < specs.size(); ++k) {
      scene.gts.push_back(GtBox{detail::shape_bbox(specs[k]), classes[k]});
      scene.label[static_cast<std::size_t>(classes[k])] = 1.0;
      ++class_budget[static_cast<std::size_t>(classes[k])];
    }
    return scene;
  }
  throw config_error("dataset: could not place objects after bounded retries");
}

// ---- augmentation ----

inline Scene flip_horizontal(const Scene& in) {
  Scene out = in;
  const int W = in.img.width, H = in.img.height;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int ch = 0; ch < 3; ++ch)
        out.img.rgb[(static_cast<std::size_t>(y) * W + x) * 3 + ch] = in.img.at(y, W - 1 - x, ch);
  for (auto& g : out.gts) {
    const double x1 = g.box.x1, x2 = g.box.x2;
    g.box.x1 = W - x2;
    g.box.x2 = W - x1;
  }
  return out;
}

inline Scene rescale_scene(const Scene& in, double factor) {
  if (factor == 1.0) return in;
  Scene out = in;
  const int W = in.img.width, H = in.img.height;
  const int NW = static_cast<int>(std::llround(W * factor));
  const int NH = static_cast<int>(std::llround(H * factor));
  out.img.width = NW;
  out.img.height = NH;
  out.img.rgb.assign(static_cast<std::size_t>(NW) * NH * 3, 0);
  const double rx = static_cast<double>(W) / NW;
  const double ry = static_cast<double>(H) / NH;
  for (int y = 0; y < NH; ++y)
    for (int x = 0; x < NW; ++x) {
      const double sx = std::clamp((x + 0.5) * rx - 0.5, 0.0, W - 1.0);
      const double sy = std::clamp((y + 0.5) * ry - 0.5, 0.0, H - 1.0);
      const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
      const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const double fx = sx - x0, fy = sy - y0;
      for (int ch = 0; ch < 3; ++ch) {
        const double v = (1 - fy) * ((1 - fx) * in.img.at(y0, x0, ch) + fx * in.img.at(y0, x1, ch)) +
                         fy * ((1 - fx) * in.img.at(y1, x0, ch) + fx * in.img.at(y1, x1, ch));
        out.img.rgb[(static_cast<std::size_t>(y) * NW + x) * 3 + ch] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  const double gx = static_cast<double>(NW) / W;
  const double gy = static_cast<double>(NH) / H;
  for (auto& g : out.gts) {
    g.box.x1 *= gx;
    g.box.x2 *= gx;
    g.box.y1 *= gy;
    g.box.y2 *= gy;
  }
  return out;
}

struct AugmentChoice {
  bool flip = false;
  double scale = 1.0;
};

inline AugmentChoice sample_augment(std::uint64_t seed) {
  static constexpr double kScales[3] = {0.75, 1.0, 1.25};
  Rng rng(seed);
  AugmentChoice ac;
  ac.flip = rng.bernoulli(0.5);
  ac.scale = kScales[rng.uniform_int(0, 3)];
  return ac;
}

inline Scene apply_augment(const Scene& in, const AugmentChoice& ac) {
  Scene out = ac.flip ? flip_horizontal(in) : in;
  return rescale_scene(out, ac.scale);
}

// Map a box through the same flip-then-rescale an image of the given base
// size undergoes.
inline Box augment_box(const Box& b, int base_w, int base_h, const AugmentChoice& ac) {
  Box out = b;
  if (ac.flip) {
    out.x1 = base_w - b.x2;
    out.x2 = base_w - b.x1;
  }
  if (ac.scale != 1.0) {
    const double gx = std::llround(base_w * ac.scale) / static_cast<double>(base_w);
    const double gy = std::llround(base_h * ac.scale) / static_cast<double>(base_h);
    out.x1 *= gx;
    out.x2 *= gx;
    out.y1 *= gy;
    out.y2 *= gy;
  }
  return out;
}

// Horizontal flip with probability 1/2, then a uniform choice among the
// configured rescale factors. Labels are untouched; boxes are transformed
// for bookkeeping only.
inline Scene augment(const Scene& in, std::uint64_t seed) {
  return apply_augment(in, sample_augment(seed));
}

// ---- disk I/O ----

namespace detail {

inline std::string image_relpath(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "images/img_%05d.rgb", id);
  return buf;
}

inline void write_raw_image(const std::filesystem::path& path, const SceneImage& img) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw config_error("dataset: cannot write '" + path.string() + "'");
  const std::uint32_t h = static_cast<std::uint32_t>(img.height);
  const std::uint32_t w = static_cast<std::uint32_t>(img.width);
  os.write(reinterpret_cast<const char*>(&h), 4);
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
}

inline SceneImage read_raw_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw config_error("dataset: cannot read '" + path.string() + "'");
  std::uint32_t h = 0, w = 0;
  is.read(reinterpret_cast<char*>(&h), 4);
  is.read(reinterpret_cast<char*>(&w), 4);
  SceneImage img;
  img.height = static_cast<int>(h);
  img.width = static_cast<int>(w);
  img.rgb.resize(static_cast<std::size_t>(h) * w * 3);
  is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!is) throw config_error("dataset: truncated image '" + path.string() + "'");
  return img;
}

}  // namespace detail

inline void generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& dir) {
  validate(cfg);
  std::filesystem::create_directories(dir / "images");
  std::ofstream mf(dir / "manifest.txt", std::ios::trunc);
  if (!mf) throw config_error("dataset: cannot write manifest");
  mf << "codetect-dataset v1\n";
  mf << "seed " << cfg.seed << " classes " << cfg.n_classes << " image_size " << cfg.image_size
     << " images " << cfg.n_images << " train " << cfg.n_train << "\n";
  std::vector<int> class_budget(static_cast<std::size_t>(cfg.n_classes), 0);
  char buf[256];
  for (int id = 0; id < cfg.n_images; ++id) {
    const Scene scene = make_scene(cfg, id, class_budget);
    const std::string rel = detail::image_relpath(id);
    detail::write_raw_image(dir / rel, scene.img);
    mf << "image " << id << ' ' << (id < cfg.n_train ? "train" : "test") << ' ' << rel << ' '
       << scene.img.height << ' ' << scene.img.width << "\n";
    mf << "label " << id;
    for (double v : scene.label) mf << ' ' << static_cast<int>(v);
    mf << "\n";
    for (const auto& g : scene.gts) {
      std::snprintf(buf, sizeof buf, "gt %d %d %.6f %.6f %.6f %.6f\n", id, g.cls, g.box.x1,
                    g.box.y1, g.box.x2, g.box.y2);
      mf << buf;
    }
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.txt");
  if (!mf) throw config_error("dataset: no manifest at '" + (dir / "manifest.txt").string() + "'");
  std::string line;
  if (!std::getline(mf, line) || line != "codetect-dataset v1")
    throw config_error("dataset: unrecognized manifest header");
  Dataset ds;
  {
    if (!std::getline(mf, line)) throw config_error("dataset: truncated manifest");
    std::istringstream ss(line);
    std::string k;
    ss >> k >> ds.cfg.seed >> k >> ds.cfg.n_classes >> k >> ds.cfg.image_size >> k >>
        ds.cfg.n_images >> k >> ds.cfg.n_train;
    if (!ss) throw config_error("dataset: malformed manifest summary");
  }
  ds.scenes.resize(static_cast<std::size_t>(ds.cfg.n_images));
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "image") {
      int id, h, w;
      std::string split, rel;
      ss >> id >> split >> rel >> h >> w;
      if (!ss) throw config_error("dataset: malformed image row");
      Scene& s = ds.scenes.at(static_cast<std::size_t>(id));
      s.id = id;
      s.img = detail::read_raw_image(dir / rel);
      if (s.img.height != h || s.img.width != w)
        throw config_error("dataset: image size disagrees with manifest");
      (split == "train" ? ds.train_ids : ds.test_ids).push_back(id);
    } else if (kind == "label") {
      int id;
      ss >> id;
      Scene& s = ds.scenes.at(static_cast<std::size_t>(id));
      s.label.clear();
      int v;
      while (ss >> v) s.label.push_back(static_cast<double>(v));
      if (static_cast<int>(s.label.size()) != ds.cfg.n_classes)
        throw config_error("dataset: label width disagrees with manifest");
    } else if (kind == "gt") {
      int id, cls;
      Box b;
      ss >> id >> cls >> b.x1 >> b.y1 >> b.x2 >> b.y2;
      if (!ss) throw config_error("dataset: malformed gt row");
      ds.scenes.at(static_cast<std::size_t>(id)).gts.push_back(GtBox{b, cls});
    } else {
      throw config_error("dataset: unknown manifest row '" + kind + "'");
    }
  }
  return ds;
}

}  // namespace codetect
