#pragma once

#include <functional>

#include "guard/autodiff.hpp"

namespace guard {

using ScalarFn = std::function<ad::Var(const ad::Var&)>;

// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-12).
double grad_check(const ScalarFn& f, const Tensor& x, double step);

// Central-difference gradient of f at x, evaluated without recording.
Tensor numeric_grad(const ScalarFn& f, const Tensor& x, double step);

}  // namespace guard
