#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "dcal/data.hpp"
#include "dcal/rng.hpp"

namespace dcal {

/// Augmentation operations. `identity` is not in the default set; it exists
/// so tests can force chains that leave the image untouched.
enum class AugOp {
  autocontrast,
  equalize,
  posterize,
  rotate,
  solarize,
  shear_x,
  shear_y,
  translate_x,
  translate_y,
  identity,
};

std::string_view op_name(AugOp op);
/// Throws ValidationError for an unknown name.
AugOp op_from_name(std::string_view name);
/// The nine operations sampled by AugMix (none overlaps the corruption suite).
std::span<const AugOp> default_ops();

inline constexpr int kMinSeverity = 1;
inline constexpr int kMaxSeverity = 10;

// Magnitude tables, linear in severity from 0 at severity 0 to the maximum at 10:
//   rotate       degrees            30
//   shear_x/y    shear factor       0.3
//   translate    pixels             side / 3
//   posterize    bits removed       floor(4 * severity / 10)
//   solarize     threshold          1 - 0.57 * severity / 10
// autocontrast and equalize take no magnitude.
double op_magnitude(AugOp op, int severity, std::size_t image_side);

/// Applies `op` at an explicit magnitude; `sign` (+1/-1) sets the direction of
/// rotate/shear/translate. Geometric ops sample bilinearly with zero fill.
/// Output is clipped to [0,1].
Image apply_op_magnitude(const Image& img, AugOp op, double magnitude, int sign = 1);

/// Applies `op` at the magnitude `severity` maps to, with a random direction.
Image apply_op(const Image& img, AugOp op, int severity, Rng& rng);

/// How the augmented and original images are interpolated.
struct MixPolicy {
  enum class Mode { bernoulli, beta };
  Mode mode = Mode::bernoulli;
  double param = 0.875;  // p for bernoulli, beta for Beta(beta, beta)

  static MixPolicy bernoulli(double p) { return {Mode::bernoulli, p}; }
  static MixPolicy beta(double b) { return {Mode::beta, b}; }

  void validate() const;
  /// Mixing weight m in [0,1].
  double sample(Rng& rng) const;
};

struct AugmentOptions {
  int chains = 3;      // k
  double alpha = 1.0;  // Dirichlet concentration
  std::vector<AugOp> ops{default_ops().begin(), default_ops().end()};
};

/// What `augment` sampled; filled when a trace pointer is passed.
struct AugmentTrace {
  std::vector<double> weights;
  std::vector<int> depths;
  std::vector<std::array<AugOp, 3>> ops;
};

/// sum_i w_i * chain_i(x) with w ~ Dirichlet(alpha), chain_i one of
/// op1, op2∘op1, op3∘op2∘op1 chosen uniformly.
Image augment(const Image& x, int severity, Rng& rng, const AugmentOptions& options = {},
              AugmentTrace* trace = nullptr);

/// (1 - m) * x + m * x_aug.
Image mix_images(const Image& original, const Image& augmented, double m);

/// Augments, samples m from the policy, interpolates.
Image augment_and_mix(const Image& x, int severity, const MixPolicy& policy, Rng& rng,
                      const AugmentOptions& options = {}, double* m_out = nullptr);

/// Per-member augmentation severities plus the diversity mode.
///
/// Diverse: member i gets values[i]. Not diverse: either every member gets
/// `constant`, or (shuffle) the members receive a random permutation of
/// `values`, drawn once per optimizer update.
struct SeverityVector {
  enum class Uniform { constant, shuffle };

  std::vector<double> values;
  bool diverse = true;
  Uniform uniform = Uniform::constant;
  double constant = 0.0;

  static SeverityVector augmix(bool diverse);
  static SeverityVector adversary(bool diverse);
  static SeverityVector depth(bool diverse);

  std::size_t members() const { return values.size(); }
  /// integer_valued: AugMix severities must be integers in [1,10]; otherwise values must be >= 0.
  void validate(bool integer_valued) const;
  bool all_zero() const;
};

/// Severity for member i in the update whose stream is `update_rng`
/// (not advanced; the shuffle is a pure function of its state).
double severity_for_member(const SeverityVector& sv, std::size_t i, const Rng& update_rng);
std::vector<double> member_severities(const SeverityVector& sv, const Rng& update_rng);

}  // namespace dcal
