#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "rgrid/attack.hpp"
#include "rgrid/ops.hpp"
#include "rgrid/tensor.hpp"

namespace rgrid::testing {

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = shape_numel(shape);
  return Tensor::from_data(std::move(shape), random_values(n, seed, lo, hi));
}

/// logits = flatten(x) W^T + b, W [K, D]
inline LogitFn linear_logits(std::vector<double> w, std::size_t classes, std::vector<double> b = {}) {
  return [w = std::move(w), b = std::move(b), classes](const Tensor& x) {
    const std::size_t batch = x.size(0);
    const std::size_t d = x.numel() / batch;
    Tensor wt = ops::transpose(Tensor::from_data({classes, d}, w), 0, 1);
    Tensor out = ops::matmul(ops::reshape(x, {batch, d}), wt);
    if (!b.empty()) out = ops::add(out, Tensor::from_data({classes}, b));
    return out;
  };
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace rgrid::testing
