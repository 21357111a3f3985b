#include "dcal/augmix.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "dcal/errors.hpp"

namespace dcal {

namespace {

constexpr double kPi = 3.14159265358979323846;

constexpr std::array<AugOp, 9> kDefaultOps = {
    AugOp::autocontrast, AugOp::equalize, AugOp::posterize,   AugOp::rotate,      AugOp::solarize,
    AugOp::shear_x,      AugOp::shear_y,  AugOp::translate_x, AugOp::translate_y,
};

constexpr std::array<std::pair<AugOp, std::string_view>, 10> kNames = {{
    {AugOp::autocontrast, "autocontrast"},
    {AugOp::equalize, "equalize"},
    {AugOp::posterize, "posterize"},
    {AugOp::rotate, "rotate"},
    {AugOp::solarize, "solarize"},
    {AugOp::shear_x, "shear_x"},
    {AugOp::shear_y, "shear_y"},
    {AugOp::translate_x, "translate_x"},
    {AugOp::translate_y, "translate_y"},
    {AugOp::identity, "identity"},
}};

int quantize(double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void clip(Image& img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
}

double sample_zero(const Image& img, std::ptrdiff_t y, std::ptrdiff_t x, std::size_t c) {
  if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(img.height) ||
      x >= static_cast<std::ptrdiff_t>(img.width)) {
    return 0.0;
  }
  return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c);
}

// out(y, x) = bilinear img(src(y, x)), zero outside.
template <typename SourceFn>
Image warp(const Image& img, SourceFn&& source) {
  Image out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto [sy, sx] = source(static_cast<double>(y), static_cast<double>(x));
      const double fy0 = std::floor(sy), fx0 = std::floor(sx);
      const double fy = sy - fy0, fx = sx - fx0;
      const auto y0 = static_cast<std::ptrdiff_t>(fy0), x0 = static_cast<std::ptrdiff_t>(fx0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = (1.0 - fx) * sample_zero(img, y0, x0, c) + fx * sample_zero(img, y0, x0 + 1, c);
        const double bottom =
            (1.0 - fx) * sample_zero(img, y0 + 1, x0, c) + fx * sample_zero(img, y0 + 1, x0 + 1, c);
        out.at(y, x, c) = (1.0 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

Image autocontrast(const Image& img) {
  Image out = img;
  const std::size_t C = img.channels, P = img.height * img.width;
  for (std::size_t c = 0; c < C; ++c) {
    double lo = 1.0, hi = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      lo = std::min(lo, img.pixels[p * C + c]);
      hi = std::max(hi, img.pixels[p * C + c]);
    }
    if (hi <= lo) continue;
    for (std::size_t p = 0; p < P; ++p) out.pixels[p * C + c] = (img.pixels[p * C + c] - lo) / (hi - lo);
  }
  return out;
}

// Histogram equalisation over 256 levels, per channel.
Image equalize(const Image& img) {
  Image out = img;
  const std::size_t C = img.channels, P = img.height * img.width;
  for (std::size_t c = 0; c < C; ++c) {
    std::array<long, 256> hist{};
    for (std::size_t p = 0; p < P; ++p) ++hist[static_cast<std::size_t>(quantize(img.pixels[p * C + c]))];
    long last_nonzero = 0, nonzero_bins = 0;
    for (long h : hist) {
      if (h) {
        last_nonzero = h;
        ++nonzero_bins;
      }
    }
    if (nonzero_bins <= 1) continue;
    const long step = (static_cast<long>(P) - last_nonzero) / 255;
    if (step == 0) continue;
    std::array<int, 256> lut{};
    long n = step / 2;
    for (std::size_t i = 0; i < 256; ++i) {
      lut[i] = static_cast<int>(std::min<long>(255, n / step));
      n += hist[i];
    }
    for (std::size_t p = 0; p < P; ++p) {
      out.pixels[p * C + c] = lut[static_cast<std::size_t>(quantize(img.pixels[p * C + c]))] / 255.0;
    }
  }
  return out;
}

Image posterize(const Image& img, int bits_removed) {
  Image out = img;
  const int mask = ~((1 << bits_removed) - 1) & 0xff;
  for (auto& v : out.pixels) v = (quantize(v) & mask) / 255.0;
  return out;
}

// Inverts pixels whose 8-bit level reaches the threshold expressed on a
// 256-level scale, so threshold 1.0 leaves every image unchanged.
Image solarize(const Image& img, double threshold) {
  Image out = img;
  const long level = std::lround(threshold * 256.0);
  for (auto& v : out.pixels) {
    if (quantize(v) >= level) v = 1.0 - v;
  }
  return out;
}

}  // namespace

std::string_view op_name(AugOp op) {
  for (const auto& [o, n] : kNames) {
    if (o == op) return n;
  }
  return "unknown";
}

AugOp op_from_name(std::string_view name) {
  for (const auto& [o, n] : kNames) {
    if (n == name) return o;
  }
  throw ValidationError("unknown augmentation op '" + std::string(name) + "'");
}

std::span<const AugOp> default_ops() { return kDefaultOps; }

double op_magnitude(AugOp op, int severity, std::size_t image_side) {
  if (severity < kMinSeverity || severity > kMaxSeverity) {
    throw ValidationError("augmentation severity " + std::to_string(severity) + " outside [1,10]");
  }
  const double frac = severity / 10.0;
  switch (op) {
    case AugOp::rotate: return 30.0 * frac;
    case AugOp::shear_x:
    case AugOp::shear_y: return 0.3 * frac;
    case AugOp::translate_x:
    case AugOp::translate_y: return static_cast<double>(image_side) / 3.0 * frac;
    case AugOp::posterize: return std::floor(4.0 * severity / 10.0);
    case AugOp::solarize: return 1.0 - 0.57 * frac;
    case AugOp::autocontrast:
    case AugOp::equalize:
    case AugOp::identity: return 0.0;
  }
  throw ValidationError("unknown augmentation op");
}

Image apply_op_magnitude(const Image& img, AugOp op, double magnitude, int sign) {
  const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
  const double m = sign < 0 ? -magnitude : magnitude;
  Image out;
  switch (op) {
    case AugOp::identity: out = img; break;
    case AugOp::autocontrast: out = autocontrast(img); break;
    case AugOp::equalize: out = equalize(img); break;
    case AugOp::posterize: {
      const int bits = static_cast<int>(magnitude);
      if (bits < 0 || bits > 8) throw ValidationError("posterize removes between 0 and 8 bits");
      out = posterize(img, bits);
      break;
    }
    case AugOp::solarize: out = solarize(img, magnitude); break;
    case AugOp::rotate: {
      const double theta = m * kPi / 180.0;
      const double c = std::cos(theta), s = std::sin(theta);
      out = warp(img, [&](double y, double x) {
        const double dy = y - cy, dx = x - cx;
        return std::pair{cy + c * dy - s * dx, cx + s * dy + c * dx};
      });
      break;
    }
    case AugOp::shear_x:
      out = warp(img, [&](double y, double x) { return std::pair{y, x + m * (y - cy)}; });
      break;
    case AugOp::shear_y:
      out = warp(img, [&](double y, double x) { return std::pair{y + m * (x - cx), x}; });
      break;
    case AugOp::translate_x: out = warp(img, [&](double y, double x) { return std::pair{y, x - m}; }); break;
    case AugOp::translate_y: out = warp(img, [&](double y, double x) { return std::pair{y - m, x}; }); break;
    default: throw ValidationError("unknown augmentation op");
  }
  clip(out);
  return out;
}

Image apply_op(const Image& img, AugOp op, int severity, Rng& rng) {
  const double magnitude = op_magnitude(op, severity, std::max(img.height, img.width));
  int sign = 1;
  switch (op) {
    case AugOp::rotate:
    case AugOp::shear_x:
    case AugOp::shear_y:
    case AugOp::translate_x:
    case AugOp::translate_y: sign = rng.sign(); break;
    default: break;
  }
  return apply_op_magnitude(img, op, magnitude, sign);
}

void MixPolicy::validate() const {
  if (mode == Mode::bernoulli && !(param >= 0.0 && param <= 1.0)) {
    throw ValidationError("bernoulli mixing probability " + std::to_string(param) + " outside [0,1]");
  }
  if (mode == Mode::beta && !(param > 0.0)) {
    throw ValidationError("beta mixing parameter must be positive");
  }
}

double MixPolicy::sample(Rng& rng) const {
  validate();
  if (mode == Mode::bernoulli) return rng.bernoulli(param) ? 1.0 : 0.0;
  return std::clamp(rng.beta(param, param), 0.0, 1.0);
}

Image augment(const Image& x, int severity, Rng& rng, const AugmentOptions& options, AugmentTrace* trace) {
  if (options.chains < 1) throw ValidationError("augment needs at least one chain");
  if (options.ops.empty()) throw ValidationError("augment needs a nonempty op set");
  if (severity < kMinSeverity || severity > kMaxSeverity) {
    throw ValidationError("augmentation severity " + std::to_string(severity) + " outside [1,10]");
  }
  // x + sum_i w_i (chain_i - x): equal to sum_i w_i chain_i on the simplex,
  // and exactly x when every chain leaves the image untouched.
  Image out = x;
  const std::vector<double> w = rng.dirichlet(static_cast<std::size_t>(options.chains), options.alpha);
  if (trace) {
    trace->weights = w;
    trace->depths.clear();
    trace->ops.clear();
  }
  for (int i = 0; i < options.chains; ++i) {
    std::array<AugOp, 3> ops{};
    for (auto& op : ops) op = options.ops[rng.index(options.ops.size())];
    const int depth = 1 + static_cast<int>(rng.index(3));
    Image chained = x;
    for (int d = 0; d < depth; ++d) chained = apply_op(chained, ops[static_cast<std::size_t>(d)], severity, rng);
    for (std::size_t p = 0; p < out.pixels.size(); ++p) out.pixels[p] += w[static_cast<std::size_t>(i)] * (chained.pixels[p] - x.pixels[p]);
    if (trace) {
      trace->depths.push_back(depth);
      trace->ops.push_back(ops);
    }
  }
  clip(out);
  return out;
}

Image mix_images(const Image& original, const Image& augmented, double m) {
  if (!original.same_shape(augmented)) throw DimensionError("mix_images: image shapes differ");
  if (m == 0.0) return original;
  if (m == 1.0) return augmented;
  Image out(original.height, original.width, original.channels);
  for (std::size_t p = 0; p < out.pixels.size(); ++p) {
    out.pixels[p] = std::clamp((1.0 - m) * original.pixels[p] + m * augmented.pixels[p], 0.0, 1.0);
  }
  return out;
}

Image augment_and_mix(const Image& x, int severity, const MixPolicy& policy, Rng& rng,
                      const AugmentOptions& options, double* m_out) {
  policy.validate();
  const Image x_aug = augment(x, severity, rng, options);
  const double m = policy.sample(rng);
  if (m_out) *m_out = m;
  return mix_images(x, x_aug, m);
}

SeverityVector SeverityVector::augmix(bool diverse) {
  return {{1, 2, 3, 4}, diverse, Uniform::constant, 3.0};
}

SeverityVector SeverityVector::adversary(bool diverse) {
  return {{0.0, 0.05, 0.1, 0.15}, diverse, Uniform::shuffle, 0.0};
}

SeverityVector SeverityVector::depth(bool diverse) {
  return {{0.0, 0.05, 0.1, 0.15}, diverse, Uniform::constant, 0.075};
}

void SeverityVector::validate(bool integer_valued) const {
  if (values.empty()) throw ValidationError("severity vector is empty");
  auto check = [&](double v) {
    if (integer_valued) {
      if (v != std::floor(v) || v < kMinSeverity || v > kMaxSeverity) {
        throw ValidationError("AugMix severity " + std::to_string(v) + " is not an integer in [1,10]");
      }
    } else if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ValidationError("severity " + std::to_string(v) + " must be finite and >= 0");
    }
  };
  for (double v : values) check(v);
  if (!diverse && uniform == Uniform::constant) check(constant);
}

bool SeverityVector::all_zero() const {
  const bool values_zero = std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0; });
  if (diverse || uniform == Uniform::shuffle) return values_zero;
  return constant == 0.0;
}

std::vector<double> member_severities(const SeverityVector& sv, const Rng& update_rng) {
  if (sv.diverse) return sv.values;
  if (sv.uniform == SeverityVector::Uniform::constant) return std::vector<double>(sv.values.size(), sv.constant);
  std::vector<double> shuffled = sv.values;
  Rng rng = update_rng;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  return shuffled;
}

double severity_for_member(const SeverityVector& sv, std::size_t i, const Rng& update_rng) {
  if (i >= sv.values.size()) {
    throw ValidationError("member index " + std::to_string(i) + " outside severity vector of length " +
                          std::to_string(sv.values.size()));
  }
  return member_severities(sv, update_rng)[i];
}

}  // namespace dcal
