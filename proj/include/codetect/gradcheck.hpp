#pragma once

// Finite-difference gradient verification harness.

#include <cmath>
#include <functional>
#include <vector>

#include "codetect/errors.hpp"
#include "codetect/registry.hpp"
#include "codetect/rng.hpp"

namespace codetect {

// `loss(true)` must run a full forward pass and a backward pass that
// accumulates analytic gradients into the registry; `loss(false)` must run
// the forward pass only. Both evaluate the current registry values and must
// be deterministic. Returns the worst relative error between the analytic
// gradient and a central difference over `samples` randomly chosen parameter
// coordinates: |a - n| / max(1e-8, |a| + |n|).
inline double grad_check(Registry& reg, const std::function<double(bool)>& loss, double epsilon,
                         int samples, Rng& rng) {
  if (epsilon <= 0.0) throw invalid_input("grad_check: epsilon must be positive");
  if (reg.size() == 0) throw invalid_input("grad_check: empty registry");

  reg.zero_grad();
  loss(true);
  std::vector<std::vector<double>> analytic(static_cast<std::size_t>(reg.size()));
  for (int i = 0; i < reg.size(); ++i) analytic[static_cast<std::size_t>(i)] = reg.entry(i).grad;
  reg.zero_grad();

  double worst = 0.0;
  for (int s = 0; s < samples; ++s) {
    const int e = rng.uniform_int(0, reg.size());
    auto& entry = reg.entry(e);
    if (entry.value.empty()) continue;
    const int k = rng.uniform_int(0, static_cast<int>(entry.value.size()));
    const double saved = entry.value[static_cast<std::size_t>(k)];

    entry.value[static_cast<std::size_t>(k)] = saved + epsilon;
    const double up = loss(false);
    entry.value[static_cast<std::size_t>(k)] = saved - epsilon;
    const double down = loss(false);
    entry.value[static_cast<std::size_t>(k)] = saved;

    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic[static_cast<std::size_t>(e)][static_cast<std::size_t>(k)];
    const double rel = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace codetect
