#pragma once

#include <functional>

#include "davdd/tape.hpp"

namespace davdd {

/// Scalar-valued function of one tensor input, built on the given tape.
using ScalarFn = std::function<Var(Tape&, const Var&)>;

/// Max over coordinates of |analytic - central difference| /
/// max(|analytic|, |numeric|, 1e-8). Throws NumericError when f is not finite
/// at some perturbed point.
double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

}  // namespace davdd
