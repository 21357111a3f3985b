#pragma once

#include <functional>

#include "dcal/autodiff.hpp"

namespace dcal {

/// Scalar-valued function recorded on a fresh tape per evaluation.
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

/// Compares the tape gradient of `f` at `x` with central differences.
/// Error per element is |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckResult grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

}  // namespace dcal
