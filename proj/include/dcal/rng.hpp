#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace dcal {

/// Seeded random stream.
///
/// A run seed is split into named, independent streams (init, data-order,
/// flip-crop, augmix, adversary, depth) so that toggling one source of
/// randomness never shifts the draws of another. Child streams keyed by
/// integers (step, row, ...) allow order-independent sampling inside
/// parallel loops.
class Rng {
 public:
  using result_type = std::mt19937_64::result_type;

  explicit Rng(std::uint64_t seed);

  /// Named stream of a run seed.
  static Rng stream(std::uint64_t run_seed, std::string_view name);

  /// Child stream keyed by (a, b); does not advance this stream.
  Rng derive(std::uint64_t a, std::uint64_t b = 0) const;
  Rng derive(std::string_view name) const;

  std::uint64_t seed() const noexcept { return seed_; }

  result_type operator()() { return engine_(); }
  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }

  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  double normal(double mean, double stddev);
  bool bernoulli(double p);
  double gamma(double shape);
  double beta(double a, double b);
  std::vector<double> dirichlet(std::size_t k, double alpha);
  std::size_t index(std::size_t n);  // uniform in [0, n)
  int sign();                         // -1 or +1

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Mixes a 64-bit key (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace dcal
