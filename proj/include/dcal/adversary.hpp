#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dcal/augmix.hpp"
#include "dcal/model.hpp"
#include "dcal/rng.hpp"
#include "dcal/tensor.hpp"

namespace dcal {

struct AdvConfig {
  double p = 0.875;  // probability of perturbing a row
  SeverityVector severities = SeverityVector::adversary(true);

  void validate() const;
};

/// Valid range of model-input values per channel. Empty bounds disable clipping.
struct InputRange {
  std::vector<double> lower;
  std::vector<double> upper;

  bool empty() const noexcept { return lower.empty(); }
};

/// One row: x + (m/p) * u * s * sign(grad), then clipped per channel.
/// `plane` is H*W, so element j belongs to channel j / plane.
/// Leaves `x` untouched when s, u or m is zero.
void perturb_row(std::span<double> x, std::span<const double> grad, double s, double u, double m, double p,
                 const InputRange& range = {}, std::size_t plane = 1);

struct AdvResult {
  Tensor x_adv;
  std::vector<double> u;  // per row
  std::vector<double> m;  // per row, 0 or 1
  bool gradient_pass = false;  // false when every row was left unchanged
};

/// Fast-gradient-sign perturbation of every row of `x` [N,C,H,W] with its own
/// severity. The input gradient comes from one eval-mode forward/backward of
/// the whole batch, each row through its member's adapted weights; weights are
/// constants. u ~ U(0,1) and m ~ Bernoulli(p) are drawn per row from
/// rng.derive(row).
AdvResult adversarial_perturb(const Tensor& x, std::span<const int> labels, const ResidualClassifier& model,
                              std::span<const int> members, std::span<const double> row_severity, double p,
                              const Rng& rng, const InputRange& range = {}, std::size_t step = 0);

/// Replicated layout (copy k in rows [kB,(k+1)B)): member k's rows use the
/// severity member_severities(cfg.severities, order_rng)[k].
AdvResult perturb_replicated_batch(const Tensor& x, std::span<const int> labels, const ResidualClassifier& model,
                                   const AdvConfig& cfg, const Rng& order_rng, const Rng& draw_rng,
                                   const InputRange& range = {}, std::size_t step = 0);

}  // namespace dcal
