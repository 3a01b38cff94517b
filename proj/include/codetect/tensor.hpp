#pragma once

#include <initializer_list>
#include <numeric>
#include <vector>

#include "codetect/errors.hpp"

namespace codetect {

inline int shape_numel(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) {
    if (d < 0) throw invalid_input("negative dimension in shape");
    n *= d;
  }
  return n;
}

// Dense row-major array of doubles with an explicit shape.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<int>(v.size()) != shape_numel(shape))
      throw invalid_input("tensor data size does not match shape");
  }

  static Tensor zeros(std::vector<int> s) {
    const int n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  }

  int numel() const { return static_cast<int>(v.size()); }
};

}  // namespace codetect
