#pragma once

// Two-branch detection model on a shared convolutional trunk.
//
// Trunk: three 3x3 same-padding conv layers (8, 16, 16 channels by default)
// with 2x max pooling after the first two, so region coordinates map to the
// feature grid at 1/4 resolution. Regions are max-pooled to a fixed bin grid
// and pushed through two shared fully-connected layers. On top of that sit
// the unshared heads: two scoring streams for the weakly supervised branch,
// and objectness + classification + box regression for the strongly
// supervised branch.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "codetect/box.hpp"
#include "codetect/registry.hpp"
#include "codetect/rng.hpp"
#include "codetect/tape.hpp"
#include "codetect/tensor.hpp"

namespace codetect {

struct ModelConfig {
  int n_classes = 4;
  std::array<int, 3> conv_channels{8, 16, 16};
  int fc_width = 64;
  int roi_bins = 2;       // bins x bins region pooling
  int feature_stride = 4; // two 2x pools
  int base_image_size = 64;

  // dense square anchors for the strong branch, pixels at base image size
  std::vector<double> anchor_sizes{13.0, 19.0, 27.0};

  // weak-branch proposal grid, pixels at base image size
  std::vector<double> weak_sizes{14.0, 20.0, 27.0};
  int weak_grid = 7;
  double weak_jitter_pos = 3.0;     // +- pixels at base size
  double weak_jitter_scale = 0.12;  // +- in log size

  // fixed gain applied after region-feature normalization
  double roi_feature_gain = 8.0;

  // weak proposals from color-contrast blobs (grid fallback when false)
  bool guided_proposals = true;

  int roi_feat_dim() const { return conv_channels[2] * roi_bins * roi_bins; }
};

inline const std::vector<std::string>& shared_param_names() {
  static const std::vector<std::string> names = {"conv1.w", "conv1.b", "conv2.w", "conv2.b",
                                                 "conv3.w", "conv3.b", "fc6.w",   "fc6.b",
                                                 "fc7.w",   "fc7.b"};
  return names;
}

inline const std::vector<std::string>& weak_param_names() {
  static const std::vector<std::string> names = {"wcls.w", "wcls.b", "wloc.w", "wloc.b"};
  return names;
}

inline const std::vector<std::string>& strong_param_names() {
  static const std::vector<std::string> names = {"rpn.w",  "rpn.b",  "scls.w",
                                                 "scls.b", "sreg.w", "sreg.b"};
  return names;
}

namespace detail {

inline std::vector<double> fan_in_uniform(int n, int fan_in, Rng& rng) {
  const double a = std::sqrt(3.0 / static_cast<double>(fan_in));
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(-a, a);
  return v;
}

}  // namespace detail

// Registers every parameter of both branches with deterministic fan-in
// uniform weights and zero biases. Registration order is fixed: shared trunk
// first, then weak heads, then strong heads.
inline void init_model_params(Registry& reg, const ModelConfig& mc, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xC0DE1217ULL));
  const int c1 = mc.conv_channels[0], c2 = mc.conv_channels[1], c3 = mc.conv_channels[2];
  const int fw = mc.fc_width, C = mc.n_classes;
  const int rd = mc.roi_feat_dim();
  const int S = static_cast<int>(mc.anchor_sizes.size());

  auto conv = [&](const std::string& name, int out_c, int in_c) {
    reg.add(name + ".w", {out_c, in_c, 3, 3},
            detail::fan_in_uniform(out_c * in_c * 9, in_c * 9, rng));
    reg.add(name + ".b", {out_c}, std::vector<double>(static_cast<std::size_t>(out_c), 0.0));
  };
  auto fc = [&](const std::string& name, int in_d, int out_d) {
    reg.add(name + ".w", {in_d, out_d}, detail::fan_in_uniform(in_d * out_d, in_d, rng));
    reg.add(name + ".b", {out_d}, std::vector<double>(static_cast<std::size_t>(out_d), 0.0));
  };

  conv("conv1", c1, 3);
  conv("conv2", c2, c1);
  conv("conv3", c3, c2);
  fc("fc6", rd, fw);
  fc("fc7", fw, fw);
  fc("wcls", fw, C);
  fc("wloc", fw, C);
  reg.add("rpn.w", {S, c3, 1, 1}, detail::fan_in_uniform(S * c3, c3, rng));
  reg.add("rpn.b", {S}, std::vector<double>(static_cast<std::size_t>(S), 0.0));
  fc("scls", fw, C + 1);
  fc("sreg", fw, 4 * C);
}

// (3,H,W) image through the shared trunk; output (c3, H/4, W/4). Pixel
// values arrive in [0,1] and are centered first.
inline Value backbone_forward(Tape& t, const ModelConfig&, Value image) {
  Value x = t.offset(image, -0.5);
  Value h1 = t.max_pool2(t.relu(t.conv2d(x, t.param("conv1.w"), t.param("conv1.b"))));
  Value h2 = t.max_pool2(t.relu(t.conv2d(h1, t.param("conv2.w"), t.param("conv2.b"))));
  return t.relu(t.conv2d(h2, t.param("conv3.w"), t.param("conv3.b")));
}

// Pooled region rows (B, roi_feat_dim) through the shared fc stack. RMS
// normalization keeps region features at a fixed scale regardless of trunk
// drift, which conditions the heads for plain SGD.
inline Value shared_fc_forward(Tape& t, const ModelConfig& mc, Value pooled) {
  Value normed = t.scale(t.rms_normalize_rows(pooled), mc.roi_feature_gain);
  Value h6 = t.relu(t.fully_connected(normed, t.param("fc6.w"), t.param("fc6.b")));
  return t.relu(t.fully_connected(h6, t.param("fc7.w"), t.param("fc7.b")));
}

}  // namespace codetect
