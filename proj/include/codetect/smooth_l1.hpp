#pragma once

#include <cmath>
#include <span>

namespace codetect {

/// Elementwise smooth L1, summed: 0.5*x^2 for |x|<1, |x|-0.5 otherwise.
inline double smooth_l1(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) {
    const double a = std::fabs(v);
    acc += a < 1.0 ? 0.5 * v * v : a - 0.5;
  }
  return acc;
}

inline double smooth_l1_prime(double x) { return std::fabs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0); }

}  // namespace codetect
