#include "dcal/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "dcal/errors.hpp"

namespace dcal {

namespace {

double evaluate(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Tensor copy = x;
  copy.set_requires_grad(false);
  const Var out = f(tape, tape.leaf(std::move(copy)));
  return out.value().item();
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  Tensor analytic;
  {
    Tape tape;
    Tensor input = x;
    input.set_requires_grad(true);
    const Var in = tape.leaf(std::move(input));
    const Var out = f(tape, in);
    tape.backward(out);
    analytic = tape.grad(in);
  }
  GradCheckResult result;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = evaluate(f, probe);
    probe[i] = orig - eps;
    const double down = evaluate(f, probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    if (!std::isfinite(err)) throw NumericError("grad_check produced a non-finite difference");
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace dcal
