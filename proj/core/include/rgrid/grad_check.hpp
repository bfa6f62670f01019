#pragma once

#include <functional>

#include "rgrid/tensor.hpp"

namespace rgrid {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Compares the tape gradient of a scalar function against central finite
/// differences with step `h`. Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
/// Throws NumericError naming the coordinate if any evaluation is non-finite.
double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

}  // namespace rgrid
