#pragma once

#include <cstdint>
#include <functional>

#include "etm/core/autograd.hpp"

namespace ETM_NS {

/// Scalar function of one tensor, built from differentiable ops.
using ScalarFn = std::function<Var(const Var&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// The difference quotient divides by the step actually realised in `real`.
/// Throws if fn produces a non-finite value.
double finite_difference_gradcheck(const ScalarFn& fn, const Tensor& point, double h);

/// Same check against an existing leaf (e.g. a model parameter) of a closed-over
/// loss. Checks at most max_coords coordinates spread evenly over the tensor.
double gradcheck_leaf(const std::function<Var()>& loss, Var& leaf, double h, std::int64_t max_coords = -1);

}  // namespace etm
