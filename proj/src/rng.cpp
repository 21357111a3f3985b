#include "dcal/rng.hpp"

#include <algorithm>

#include "dcal/errors.hpp"

namespace dcal {

namespace {

std::uint64_t hash_name(std::string_view name) noexcept {
  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(mix64(seed)) {}

Rng Rng::stream(std::uint64_t run_seed, std::string_view name) {
  return Rng(mix64(run_seed) ^ hash_name(name));
}

Rng Rng::derive(std::uint64_t a, std::uint64_t b) const {
  return Rng(mix64(mix64(seed_ ^ mix64(a)) + b));
}

Rng Rng::derive(std::string_view name) const { return Rng(mix64(seed_) ^ hash_name(name)); }

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double Rng::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double Rng::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

bool Rng::bernoulli(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("bernoulli probability outside [0,1]");
  return std::bernoulli_distribution(p)(engine_);
}

double Rng::gamma(double shape) { return std::gamma_distribution<double>(shape, 1.0)(engine_); }

double Rng::beta(double a, double b) {
  const double x = gamma(a);
  const double y = gamma(b);
  if (x + y == 0.0) return 0.5;
  return x / (x + y);
}

std::vector<double> Rng::dirichlet(std::size_t k, double alpha) {
  if (k == 0) throw ValidationError("dirichlet needs at least one component");
  if (!(alpha > 0.0)) throw ValidationError("dirichlet concentration must be positive");
  std::vector<double> w(k);
  double total = 0.0;
  for (auto& v : w) {
    v = gamma(alpha);
    total += v;
  }
  if (total == 0.0) {
    // all draws underflowed (tiny alpha); fall back to a uniformly chosen vertex
    std::fill(w.begin(), w.end(), 0.0);
    w[index(k)] = 1.0;
    return w;
  }
  for (auto& v : w) v /= total;
  return w;
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw ValidationError("index range must be nonempty");
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

int Rng::sign() { return (engine_() >> 63) ? 1 : -1; }

}  // namespace dcal
