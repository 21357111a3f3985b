#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dcal/adversary.hpp"
#include "dcal/errors.hpp"
#include "test_util.hpp"

using namespace dcal;
using dcal::testing::random_tensor;
using dcal::testing::randomize;
using dcal::testing::tiny_spec;

namespace {

ResidualClassifier random_model(const ModelSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  ResidualClassifier m(spec, rng);
  randomize(m, rng);
  return m;
}

double loss_of(const ResidualClassifier& m, const Tensor& x, std::span<const int> members, std::span<const int> labels) {
  Tape t;
  return softmax_cross_entropy(t.constant(m.logits(x, members)), labels).loss.value().item();
}

}  // namespace

TEST(PerturbRow, WorkedExample) {
  std::vector<double> x{0.5};
  const std::vector<double> g{-2.0};
  perturb_row(x, g, 0.1, 0.5, 1.0, 0.875);
  EXPECT_NEAR(x[0], 0.5 - (1.0 / 0.875) * 0.5 * 0.1, 1e-15);
  EXPECT_NEAR(x[0], 0.442857142857, 1e-9);
}

TEST(PerturbRow, ZeroSeverityOrGateLeavesInput) {
  const std::vector<double> x0{0.3, -0.7, 1.2};
  const std::vector<double> g{1.0, -1.0, 0.5};
  std::vector<double> x = x0;
  perturb_row(x, g, 0.0, 0.5, 1.0, 0.875);
  EXPECT_EQ(x, x0);
  perturb_row(x, g, 0.1, 0.5, 0.0, 0.875);
  EXPECT_EQ(x, x0);
}

TEST(PerturbRow, SignOfZeroIsZeroAndClipping) {
  std::vector<double> x{0.0, 0.95, 0.05, 0.5};
  const std::vector<double> g{0.0, 1.0, -1.0, 1.0};
  InputRange range{{0.0}, {1.0}};
  perturb_row(x, g, 0.2, 1.0, 1.0, 1.0, range, 4);
  EXPECT_EQ(x[0], 0.0);
  EXPECT_EQ(x[1], 1.0);
  EXPECT_EQ(x[2], 0.0);
  EXPECT_NEAR(x[3], 0.7, 1e-15);
}

TEST(PerturbRow, PerChannelRange) {
  // two channels of two pixels; the second channel has a narrower range
  std::vector<double> x{0.0, 0.0, 0.0, 0.0};
  const std::vector<double> g{1.0, -1.0, 1.0, -1.0};
  InputRange range{{-1.0, -0.05}, {1.0, 0.05}};
  perturb_row(x, g, 0.1, 1.0, 1.0, 1.0, range, 2);
  EXPECT_NEAR(x[0], 0.1, 1e-15);
  EXPECT_NEAR(x[1], -0.1, 1e-15);
  EXPECT_EQ(x[2], 0.05);
  EXPECT_EQ(x[3], -0.05);
}

TEST(AdvConfig, Validation) {
  AdvConfig c;
  EXPECT_NO_THROW(c.validate());
  c.p = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c.severities.values = {0, 0, 0, 0};
  EXPECT_NO_THROW(c.validate());
  c.p = 1.5;
  EXPECT_THROW(c.validate(), ValidationError);
  std::vector<double> x{0.5};
  EXPECT_THROW(perturb_row(x, std::vector<double>{1.0}, 0.1, 0.5, 1.0, 0.0), ValidationError);
  EXPECT_THROW(perturb_row(x, std::vector<double>{1.0, 2.0}, 0.1, 0.5, 1.0, 1.0), DimensionError);
}

TEST(Adversary, GateIsUnbiased) {
  ModelSpec spec = tiny_spec(1);
  spec.in_channels = 1;
  spec.image_size = 2;
  spec.width = 1;
  spec.blocks = 1;
  const auto m = random_model(spec, 1);
  const std::size_t rows = 100000;
  const Tensor x({rows, 1, 2, 2}, 0.5);
  const std::vector<int> labels(rows, 0), members(rows, 0);
  const std::vector<double> sev(rows, 0.0);
  const double p = 0.875;
  const AdvResult r = adversarial_perturb(x, labels, m, members, sev, p, Rng(1));
  double sum = 0.0, u_sum = 0.0;
  for (std::size_t n = 0; n < rows; ++n) {
    sum += r.m[n] / p;
    u_sum += r.u[n];
  }
  EXPECT_NEAR(sum / 1e5, 1.0, 0.01);
  EXPECT_NEAR(u_sum / 1e5, 0.5, 0.01);
}

TEST(Adversary, BoundAndZeroCases) {
  const auto m = random_model(tiny_spec(4), 2);
  Rng rng(3);
  const std::size_t B = 6, K = 4;
  const Tensor x = random_tensor({B * K, 3, 4, 4}, rng);
  std::vector<int> labels(B * K);
  for (auto& l : labels) l = static_cast<int>(rng.index(3));
  AdvConfig cfg;
  const AdvResult r = perturb_replicated_batch(x, labels, m, cfg, Rng(4), Rng(5));
  ASSERT_TRUE(r.gradient_pass);
  const std::size_t row = 48;
  const std::vector<double> s{0.0, 0.05, 0.1, 0.15};
  bool moved = false;
  for (std::size_t n = 0; n < B * K; ++n) {
    const double sev = s[n / B];
    double worst = 0.0;
    for (std::size_t j = 0; j < row; ++j) worst = std::max(worst, std::abs(r.x_adv[n * row + j] - x[n * row + j]));
    EXPECT_LE(worst, r.u[n] * sev * r.m[n] / cfg.p + 1e-15);
    if (sev == 0.0 || r.m[n] == 0.0) {
      for (std::size_t j = 0; j < row; ++j) EXPECT_EQ(r.x_adv[n * row + j], x[n * row + j]);
    } else if (worst > 0.0) {
      moved = true;
    }
  }
  EXPECT_TRUE(moved);
}

TEST(Adversary, AllZeroSeveritiesSkipGradientPass) {
  const auto m = random_model(tiny_spec(2), 6);
  Rng rng(7);
  const Tensor x = random_tensor({4, 3, 4, 4}, rng);
  const std::vector<int> labels{0, 1, 2, 0};
  AdvConfig cfg;
  cfg.severities.values = {0.0, 0.0};
  const AdvResult r = perturb_replicated_batch(x, labels, m, cfg, Rng(1), Rng(2));
  EXPECT_FALSE(r.gradient_pass);
  EXPECT_TRUE(r.x_adv.identical(x));
}

TEST(Adversary, UsesPerMemberWeights) {
  // The same image under two members gets the sign of its own member's gradient.
  const auto m = random_model(tiny_spec(2), 8);
  Rng rng(9);
  const Tensor one = random_tensor({1, 3, 4, 4}, rng);
  Tensor x({2, 3, 4, 4});
  std::copy_n(one.data(), 48, x.data());
  std::copy_n(one.data(), 48, x.data() + 48);
  const std::vector<int> labels{1, 1}, members{0, 1};
  const std::vector<double> sev{0.1, 0.1};
  const AdvResult r = adversarial_perturb(x, labels, m, members, sev, 1.0, Rng(10));
  for (std::size_t k = 0; k < 2; ++k) {
    Tape t;
    Var xv = t.leaf(Tensor(one).set_requires_grad(true));
    const std::vector<int> mk{static_cast<int>(k)}, lk{1};
    t.backward(softmax_cross_entropy(m.forward(t, xv, mk).logits, lk).loss);
    const Tensor g = t.grad(xv);
    for (std::size_t j = 0; j < 48; ++j) {
      const double sign = g[j] > 0 ? 1.0 : (g[j] < 0 ? -1.0 : 0.0);
      EXPECT_NEAR(r.x_adv[k * 48 + j], one[j] + r.u[k] * 0.1 * sign, 1e-15);
    }
  }
}

TEST(Adversary, IncreasesLossToFirstOrder) {
  int increased = 0;
  const int trials = 100;
  for (int trial = 0; trial < trials; ++trial) {
    const auto m = random_model(tiny_spec(1), 1000 + static_cast<std::uint64_t>(trial));
    Rng rng(2000 + static_cast<std::uint64_t>(trial));
    const Tensor x = random_tensor({2, 3, 4, 4}, rng);
    const std::vector<int> labels{static_cast<int>(rng.index(3)), static_cast<int>(rng.index(3))};
    const std::vector<int> members{0, 0};
    const std::vector<double> sev{0.01, 0.01};
    const AdvResult r = adversarial_perturb(x, labels, m, members, sev, 1.0, Rng(static_cast<std::uint64_t>(trial)));
    if (loss_of(m, r.x_adv, members, labels) >= loss_of(m, x, members, labels)) ++increased;
  }
  EXPECT_GE(increased, 95);
}

TEST(Adversary, DeterministicUnderSeed) {
  const auto m = random_model(tiny_spec(4), 11);
  Rng rng(12);
  const Tensor x = random_tensor({8, 3, 4, 4}, rng);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1};
  AdvConfig cfg;
  cfg.severities = SeverityVector::adversary(false);
  const AdvResult a = perturb_replicated_batch(x, labels, m, cfg, Rng(13), Rng(14));
  const AdvResult b = perturb_replicated_batch(x, labels, m, cfg, Rng(13), Rng(14));
  EXPECT_TRUE(a.x_adv.identical(b.x_adv));
  EXPECT_EQ(a.u, b.u);
}

TEST(Adversary, NotDiverseAssignsPermutedSeverities) {
  const auto m = random_model(tiny_spec(4), 15);
  Rng rng(16);
  const std::size_t B = 3;
  const Tensor x = random_tensor({B * 4, 3, 4, 4}, rng);
  std::vector<int> labels(B * 4, 1);
  AdvConfig cfg;
  cfg.p = 1.0;
  cfg.severities = SeverityVector::adversary(false);
  const Rng order(17);
  const auto sev = member_severities(cfg.severities, order);
  const AdvResult r = perturb_replicated_batch(x, labels, m, cfg, order, Rng(18));
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t n = 0; n < B; ++n) {
      const std::size_t row = k * B + n;
      double worst = 0.0;
      for (std::size_t j = 0; j < 48; ++j) worst = std::max(worst, std::abs(r.x_adv[row * 48 + j] - x[row * 48 + j]));
      EXPECT_LE(worst, r.u[row] * sev[k] + 1e-15);
      if (sev[k] == 0.0) EXPECT_EQ(worst, 0.0);
    }
  }
}
