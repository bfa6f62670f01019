#include "rgrid/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "rgrid/error.hpp"

namespace rgrid {

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw UsageError("grad_check: step must be positive");
  Tensor probe = Tensor::from_data(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  const Tensor loss = f(probe);
  if (loss.numel() != 1) throw UsageError("grad_check: function is not scalar-valued");
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite value at the base point");

  std::vector<double> analytic;
  if (loss.requires_grad()) {
    const Tensor wrt[] = {probe};
    analytic = std::move(gradients(loss, wrt)[0]);
  } else {
    analytic.assign(x.numel(), 0.0);
  }

  NoGradGuard no_grad;
  std::vector<double> base(x.data().begin(), x.data().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    // divide by the step actually taken, which may differ from 2h after rounding
    const double up = base[i] + h, down = base[i] - h;
    auto eval = [&](double coordinate) {
      std::vector<double> shifted = base;
      shifted[i] = coordinate;
      const double v = f(Tensor::from_data(x.shape(), std::move(shifted))).item();
      if (!std::isfinite(v)) {
        throw NumericError("grad_check: non-finite value at coordinate " + std::to_string(i));
      }
      return v;
    };
    const double numeric = (eval(up) - eval(down)) / (up - down);
    if (!std::isfinite(analytic[i])) {
      throw NumericError("grad_check: non-finite gradient at coordinate " + std::to_string(i));
    }
    worst = std::max(worst, std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(numeric)));
  }
  return worst;
}

}  // namespace rgrid
