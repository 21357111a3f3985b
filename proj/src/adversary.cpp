#include "dcal/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dcal/autodiff.hpp"
#include "dcal/errors.hpp"

namespace dcal {

void AdvConfig::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("adversary probability p=" + std::to_string(p) + " outside [0,1]");
  severities.validate(false);
  if (p == 0.0 && !severities.all_zero()) {
    throw ValidationError("adversary p=0 leaves E[m] undefined; disable the adversary instead");
  }
}

void perturb_row(std::span<double> x, std::span<const double> grad, double s, double u, double m, double p,
                 const InputRange& range, std::size_t plane) {
  if (x.size() != grad.size()) {
    throw DimensionError("perturb_row: input has " + std::to_string(x.size()) + " values, gradient " +
                         std::to_string(grad.size()));
  }
  if (s == 0.0 || u == 0.0 || m == 0.0) return;
  if (!(p > 0.0)) throw ValidationError("adversary p must be positive when perturbing");
  const double step = (m / p) * u * s;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double g = grad[j];
    const double sign = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
    double v = x[j] + step * sign;
    if (!range.empty()) {
      const std::size_t c = j / plane;
      v = std::clamp(v, range.lower[c], range.upper[c]);
    }
    x[j] = v;
  }
}

AdvResult adversarial_perturb(const Tensor& x, std::span<const int> labels, const ResidualClassifier& model,
                              std::span<const int> members, std::span<const double> row_severity, double p,
                              const Rng& rng, const InputRange& range, std::size_t step) {
  if (x.rank() != 4) throw DimensionError("adversarial_perturb: input " + shape_string(x.shape()) + " is not NCHW");
  const std::size_t rows = x.dim(0);
  if (labels.size() != rows || members.size() != rows || row_severity.size() != rows) {
    throw ValidationError("adversarial_perturb: per-row arrays do not match " + std::to_string(rows) + " rows");
  }
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("adversary probability p=" + std::to_string(p) + " outside [0,1]");
  if (!range.empty() && (range.lower.size() != x.dim(1) || range.upper.size() != x.dim(1))) {
    throw DimensionError("adversarial_perturb: input range has " + std::to_string(range.lower.size()) +
                         " channels, input " + std::to_string(x.dim(1)));
  }

  AdvResult out;
  out.x_adv = x;
  out.x_adv.set_requires_grad(false);
  out.u.resize(rows);
  out.m.resize(rows);
  bool any = false;
  for (std::size_t n = 0; n < rows; ++n) {
    if (!(row_severity[n] >= 0.0)) throw ValidationError("adversary severity must be >= 0");
    Rng row_rng = rng.derive(n);
    out.u[n] = row_rng.uniform();
    out.m[n] = row_rng.bernoulli(p) ? 1.0 : 0.0;
    if (row_severity[n] > 0.0 && out.m[n] != 0.0 && out.u[n] != 0.0) any = true;
  }
  if (!any) return out;
  if (p == 0.0) throw ValidationError("adversary p=0 leaves E[m] undefined");

  Tape tape;
  Tensor input = x;
  input.set_requires_grad(true);
  Var xv = tape.leaf(std::move(input));
  ForwardOptions opts;
  opts.train = false;
  opts.params_require_grad = false;
  const ForwardResult fr = model.forward(tape, xv, members, opts);
  const CrossEntropy ce = softmax_cross_entropy(fr.logits, labels);
  tape.backward(ce.loss);
  const Tensor grad = tape.grad(xv);
  if (!grad.all_finite()) {
    throw NumericError("adversary: non-finite input gradient at step " + std::to_string(step));
  }
  out.gradient_pass = true;

  const std::size_t row_size = x.numel() / rows;
  const std::size_t plane = x.dim(2) * x.dim(3);
  auto xs = out.x_adv.values();
  auto gs = grad.values();
  for (std::size_t n = 0; n < rows; ++n) {
    perturb_row(xs.subspan(n * row_size, row_size), gs.subspan(n * row_size, row_size), row_severity[n], out.u[n],
                out.m[n], p, range, plane);
  }
  return out;
}

AdvResult perturb_replicated_batch(const Tensor& x, std::span<const int> labels, const ResidualClassifier& model,
                                   const AdvConfig& cfg, const Rng& order_rng, const Rng& draw_rng,
                                   const InputRange& range, std::size_t step) {
  cfg.validate();
  const std::size_t k = model.members();
  if (cfg.severities.members() < k) {
    throw ValidationError("adversary severity vector has " + std::to_string(cfg.severities.members()) +
                          " entries for " + std::to_string(k) + " members");
  }
  if (x.rank() == 0 || x.dim(0) % k != 0) {
    throw DimensionError("replicated batch " + shape_string(x.shape()) + " is not a multiple of " + std::to_string(k));
  }
  const std::size_t batch = x.dim(0) / k;
  const std::vector<double> sev = member_severities(cfg.severities, order_rng);
  const std::vector<int> members = replicated_members(batch, k);
  std::vector<double> row_sev(x.dim(0));
  for (std::size_t n = 0; n < row_sev.size(); ++n) row_sev[n] = sev[static_cast<std::size_t>(members[n])];
  return adversarial_perturb(x, labels, model, members, row_sev, cfg.p, draw_rng, range, step);
}

}  // namespace dcal
