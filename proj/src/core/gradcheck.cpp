#include "etm/core/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace ETM_NS {

namespace {

double finite_value(const Var& v) {
  const double x = v.value().item();
  if (!std::isfinite(x)) throw std::runtime_error("gradcheck: function value is not finite");
  return x;
}

double check_coordinates(const std::function<double()>& evaluate, Tensor& point, const Tensor& analytic, double h,
                         std::int64_t max_coords) {
  const std::int64_t n = point.numel();
  const std::int64_t count = max_coords > 0 ? std::min(max_coords, n) : n;
  double worst = 0.0;
  for (std::int64_t c = 0; c < count; ++c) {
    const std::int64_t i = count == n ? c : c * n / count;
    const real original = point[i];
    point[i] = static_cast<real>(original + h);
    const real up = point[i];
    const double f_up = evaluate();
    point[i] = static_cast<real>(original - h);
    const real down = point[i];
    const double f_down = evaluate();
    point[i] = original;
    const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace

double finite_difference_gradcheck(const ScalarFn& fn, const Tensor& point, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("gradcheck: step must be positive");
  Var x(point, true);
  Var out = fn(x);
  finite_value(out);
  out.backward();
  const Tensor analytic = x.has_grad() ? x.grad() : Tensor(point.shape(), 0.0f);

  NoGradGuard no_grad;
  Tensor probe = point;
  auto evaluate = [&]() { return finite_value(fn(Var(probe))); };
  return check_coordinates(evaluate, probe, analytic, h, -1);
}

double gradcheck_leaf(const std::function<Var()>& loss, Var& leaf, double h, std::int64_t max_coords) {
  if (!(h > 0.0)) throw std::invalid_argument("gradcheck: step must be positive");
  leaf.zero_grad();
  Var out = loss();
  finite_value(out);
  out.backward();
  const Tensor analytic = leaf.has_grad() ? leaf.grad() : Tensor(leaf.shape(), 0.0f);
  leaf.zero_grad();

  NoGradGuard no_grad;
  auto evaluate = [&]() { return finite_value(loss()); };
  return check_coordinates(evaluate, leaf.mutable_value(), analytic, h, max_coords);
}

}  // namespace etm
