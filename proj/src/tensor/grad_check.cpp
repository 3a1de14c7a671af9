#include "davdd/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "davdd/error.hpp"

namespace davdd {
namespace {

double evaluate(const ScalarFn& f, const Tensor& x, std::size_t coord) {
  Tape tape;
  Var in = tape.constant(x);
  double v = 0.0;
  try {
    v = f(tape, in).value().item();
  } catch (const NumericError& e) {
    throw NumericError("grad_check: f is not finite when perturbing coordinate " +
                       std::to_string(coord) + " (" + e.what() + ")");
  }
  if (!std::isfinite(v)) {
    throw NumericError("grad_check: f is not finite when perturbing coordinate " +
                       std::to_string(coord));
  }
  return v;
}

}  // namespace

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
  Tensor input = x;
  input.set_requires_grad(true);
  Tape tape;
  Var in = tape.leaf(input);
  Var loss = f(tape, in);
  const Tensor analytic = tape.backward(loss).of(in);

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = evaluate(f, probe, i);
    probe[i] = orig - h;
    const double down = evaluate(f, probe, i);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace davdd
