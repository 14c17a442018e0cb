#include "guard/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "guard/errors.hpp"

namespace guard {

namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
  // f may differentiate internally, so it always runs under a record.
  ad::Tape tape(2);
  double v = f(ad::constant(x)).item();
  if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite function evaluation");
  return v;
}

}  // namespace

Tensor numeric_grad(const ScalarFn& f, const Tensor& x, double step) {
  if (!(step > 0.0)) throw Error("grad_check step must be positive");
  Buffer base = x.to_buffer();
  Buffer out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    Buffer plus = base, minus = base;
    plus[i] += step;
    minus[i] -= step;
    double fp = evaluate(f, Tensor(x.shape(), std::move(plus)));
    double fm = evaluate(f, Tensor(x.shape(), std::move(minus)));
    out[i] = (fp - fm) / (2.0 * step);
  }
  return Tensor(x.shape(), std::move(out));
}

double grad_check(const ScalarFn& f, const Tensor& x, double step) {
  Tensor analytic;
  {
    ad::Tape tape(2);
    ad::Var xv = tape.leaf(x);
    ad::Var y = f(xv);
    if (!std::isfinite(y.item())) throw NonFiniteError("grad_check: non-finite function value");
    analytic = ad::grad(y, xv).value();
  }
  Tensor numeric = numeric_grad(f, x, step);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i)
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / (std::abs(analytic[i]) + 1e-12));
  return worst;
}

}  // namespace guard
