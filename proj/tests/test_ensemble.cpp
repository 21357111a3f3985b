#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dcal/ensemble_layers.hpp"
#include "dcal/errors.hpp"
#include "dcal/grad_check.hpp"
#include "dcal/rng.hpp"

using namespace dcal;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<int> random_members(std::size_t rows, std::size_t k, Rng& rng) {
  std::vector<int> m(rows);
  for (auto& v : m) v = static_cast<int>(rng.index(k));
  return m;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

// y_n = (W o r_i s_i^T) x_n + b_i with the member weight written out.
std::vector<double> materialized_dense(const Tensor& x, const Tensor& w, const Tensor& r, const Tensor& s,
                                       const Tensor& b, const std::vector<int>& members) {
  const std::size_t N = x.dim(0), in = x.dim(1), out = w.dim(0);
  std::vector<double> y(N * out);
  for (std::size_t n = 0; n < N; ++n) {
    const auto i = static_cast<std::size_t>(members[n]);
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b[i * out + o];
      for (std::size_t j = 0; j < in; ++j) acc += w[o * in + j] * r[i * out + o] * s[i * in + j] * x[n * in + j];
      y[n * out + o] = acc;
    }
  }
  return y;
}

// Direct convolution of row n with the kernel K[o,c] * r_i[o] * s_i[c].
std::vector<double> materialized_conv(const Tensor& x, const Tensor& k, const Tensor& r, const Tensor& s,
                                      const Tensor& b, const std::vector<int>& members) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), O = k.dim(0);
  std::vector<double> y(N * O * H * W);
  for (std::size_t n = 0; n < N; ++n) {
    const auto m = static_cast<std::size_t>(members[n]);
    for (std::size_t o = 0; o < O; ++o) {
      std::vector<double> kern(C * 9);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < 9; ++t) kern[c * 9 + t] = k[(o * C + c) * 9 + t] * r[m * O + o] * s[m * C + c];
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          double acc = b[m * O + o];
          for (std::size_t c = 0; c < C; ++c)
            for (int di = -1; di <= 1; ++di)
              for (int dj = -1; dj <= 1; ++dj) {
                const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
                if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
                acc += x[((n * C + c) * H + ii) * W + jj] * kern[c * 9 + (di + 1) * 3 + (dj + 1)];
              }
          y[((n * O + o) * H + i) * W + j] = acc;
        }
    }
  }
  return y;
}

ConvVars conv_vars(Tape& t, const Tensor& k, const Tensor& r, const Tensor& s, const Tensor& b) {
  ConvVars v;
  v.kernel = t.constant(k);
  v.adapted = !r.empty();
  if (v.adapted) {
    v.r = t.constant(r);
    v.s = t.constant(s);
  }
  v.bias = t.constant(b);
  return v;
}

LinearVars linear_vars(Tape& t, const Tensor& w, const Tensor& r, const Tensor& s, const Tensor& b) {
  LinearVars v;
  v.weight = t.constant(w);
  v.adapted = !r.empty();
  if (v.adapted) {
    v.r = t.constant(r);
    v.s = t.constant(s);
  }
  v.bias = t.constant(b);
  return v;
}

}  // namespace

TEST(InitEnsembleParams, NormalOneHalf) {
  Rng rng(1);
  const AdapterPair p = init_ensemble_params(4, 25000, 25000, rng);
  std::vector<double> all(p.r.values().begin(), p.r.values().end());
  all.insert(all.end(), p.s.values().begin(), p.s.values().end());
  ASSERT_EQ(all.size(), 200000u);
  double mean = 0.0;
  for (double v : all) mean += v;
  mean /= static_cast<double>(all.size());
  double var = 0.0;
  for (double v : all) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(all.size() - 1));
  EXPECT_NEAR(mean, 1.0, 0.01);
  EXPECT_NEAR(sd, 0.5, 0.01);
}

TEST(InitEnsembleParams, Deterministic) {
  Rng a(42), b(42);
  const AdapterPair pa = init_ensemble_params(3, 5, 7, a), pb = init_ensemble_params(3, 5, 7, b);
  EXPECT_TRUE(pa.r.identical(pb.r));
  EXPECT_TRUE(pa.s.identical(pb.s));
  EXPECT_EQ(pa.r.shape(), (Shape{3, 5}));
  EXPECT_EQ(pa.s.shape(), (Shape{3, 7}));
  Rng c(0);
  EXPECT_THROW(init_ensemble_params(0, 2, 2, c), ValidationError);
}

TEST(BeDense, WorkedExample) {
  // W o r s^T = [[3,8],[18,32]]
  Tape t;
  const Tensor w = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor r = Tensor::matrix({{1, 2}}), s = Tensor::matrix({{3, 4}}), b = Tensor::zeros({1, 2});
  const std::vector<int> members{0};
  const Tensor y = be_dense_forward(t.constant(Tensor::matrix({{1, 1}})), linear_vars(t, w, r, s, b), members).value();
  EXPECT_EQ(y[0], 3.0 + 8.0);
  EXPECT_EQ(y[1], 18.0 + 32.0);
}

TEST(BeDense, UnitAdaptersArePlainDense) {
  Rng rng(2);
  Tape t;
  const Tensor x = random_tensor({6, 5}, rng), w = random_tensor({3, 5}, rng), b = random_tensor({2, 3}, rng);
  const std::vector<int> members{0, 1, 0, 1, 1, 0};
  const Tensor y = be_dense_forward(t.constant(x), linear_vars(t, w, Tensor::ones({2, 3}), Tensor::ones({2, 5}), b),
                                    members)
                       .value();
  const Tensor plain = dense(t.constant(x), t.constant(w)).value();
  for (std::size_t n = 0; n < 6; ++n)
    for (std::size_t o = 0; o < 3; ++o)
      EXPECT_EQ(y[n * 3 + o], plain[n * 3 + o] + b[static_cast<std::size_t>(members[n]) * 3 + o]);
}

TEST(BeDense, ZeroInputAdapterLeavesBias) {
  Rng rng(3);
  Tape t;
  const Tensor x = random_tensor({4, 5}, rng), w = random_tensor({3, 5}, rng), b = random_tensor({2, 3}, rng);
  const std::vector<int> members{1, 0, 1, 1};
  const Tensor y =
      be_dense_forward(t.constant(x), linear_vars(t, w, random_tensor({2, 3}, rng), Tensor::zeros({2, 5}), b), members)
          .value();
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t o = 0; o < 3; ++o) EXPECT_EQ(y[n * 3 + o], b[static_cast<std::size_t>(members[n]) * 3 + o]);
}

TEST(BeDense, MatchesMaterializedWeights) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(1000 + seed);
    const std::size_t K = 1 + rng.index(4), in = 1 + rng.index(9), out = 1 + rng.index(9), N = 1 + rng.index(12);
    const Tensor x = random_tensor({N, in}, rng), w = random_tensor({out, in}, rng);
    const Tensor r = random_tensor({K, out}, rng, -2, 2), s = random_tensor({K, in}, rng, -2, 2);
    const Tensor b = random_tensor({K, out}, rng);
    const auto members = random_members(N, K, rng);
    Tape t;
    const Tensor y = be_dense_forward(t.constant(x), linear_vars(t, w, r, s, b), members).value();
    const auto ref = materialized_dense(x, w, r, s, b, members);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_LE(rel_err(y[i], ref[i]), 1e-6);
  }
}

TEST(BeDense, MemberOutOfRange) {
  Tape t;
  const std::vector<int> members{2};
  EXPECT_THROW(be_dense_forward(t.constant(Tensor::ones({1, 2})),
                                linear_vars(t, Tensor::ones({2, 2}), Tensor::ones({2, 2}), Tensor::ones({2, 2}),
                                            Tensor::zeros({2, 2})),
                                members),
               ValidationError);
}

TEST(BeConv, UnitAdaptersArePlainConvolution) {
  Rng rng(4);
  Tape t;
  const Tensor x = random_tensor({4, 3, 5, 6}, rng), k = random_tensor({2, 3, 3, 3}, rng);
  const std::vector<int> members{0, 1, 2, 1};
  const Tensor y =
      be_conv_forward(t.constant(x), conv_vars(t, k, Tensor::ones({3, 2}), Tensor::ones({3, 3}), Tensor::zeros({3, 2})),
                      members)
          .value();
  const Tensor plain = conv2d(t.constant(x), t.constant(k)).value();
  EXPECT_TRUE(y.identical(plain));
}

TEST(BeConv, SingleChannelSinglePixelIsScalarProduct) {
  Tape t;
  Tensor k({1, 1, 3, 3});
  k[4] = 1.5;
  const std::vector<int> members{0};
  const Tensor y = be_conv_forward(t.constant(Tensor({1, 1, 1, 1}, 2.0)),
                                   conv_vars(t, k, Tensor({1, 1}, 3.0), Tensor({1, 1}, -0.5), Tensor({1, 1}, 0.25)),
                                   members)
                       .value();
  EXPECT_DOUBLE_EQ(y.item(), 3.0 * -0.5 * 1.5 * 2.0 + 0.25);
}

TEST(BeConv, MatchesMaterializedKernels) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(2000 + seed);
    const std::size_t K = 1 + rng.index(4), C = 1 + rng.index(5), O = 1 + rng.index(5);
    const std::size_t H = 1 + rng.index(6), W = 1 + rng.index(9), N = 1 + rng.index(6);
    const Tensor x = random_tensor({N, C, H, W}, rng), k = random_tensor({O, C, 3, 3}, rng);
    const Tensor r = random_tensor({K, O}, rng, -2, 2), s = random_tensor({K, C}, rng, -2, 2);
    const Tensor b = random_tensor({K, O}, rng);
    const auto members = random_members(N, K, rng);
    Tape t;
    const Tensor y = be_conv_forward(t.constant(x), conv_vars(t, k, r, s, b), members).value();
    const auto ref = materialized_conv(x, k, r, s, b, members);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_LE(rel_err(y[i], ref[i]), 1e-6) << "seed " << seed;
  }
}

TEST(BeConv, FusedReluEqualsSeparateRelu) {
  Rng rng(5);
  Tape t;
  const Tensor x = random_tensor({3, 4, 6, 6}, rng), k = random_tensor({5, 4, 3, 3}, rng);
  const Tensor r = random_tensor({2, 5}, rng), s = random_tensor({2, 4}, rng), b = random_tensor({2, 5}, rng);
  const std::vector<int> members{1, 0, 1};
  const ConvVars v = conv_vars(t, k, r, s, b);
  const Tensor fused = be_conv_forward(t.constant(x), v, members, true).value();
  const Tensor split = relu(be_conv_forward(t.constant(x), v, members)).value();
  EXPECT_TRUE(fused.identical(split));
}

TEST(BeConv, Errors) {
  Tape t;
  const std::vector<int> members{0, 3};
  const ConvVars v = conv_vars(t, Tensor::ones({2, 3, 3, 3}), Tensor::ones({2, 2}), Tensor::ones({2, 3}),
                               Tensor::zeros({2, 2}));
  EXPECT_THROW(be_conv_forward(t.constant(Tensor::ones({2, 3, 4, 4})), v, members), ValidationError);
  const std::vector<int> ok{0, 1};
  EXPECT_THROW(be_conv_forward(t.constant(Tensor::ones({2, 2, 4, 4})), v, ok), DimensionError);
  const std::vector<int> short_list{0};
  EXPECT_THROW(be_conv_forward(t.constant(Tensor::ones({2, 3, 4, 4})), v, short_list), DimensionError);
}

TEST(BeConv, GradientsOfEveryInput) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(3000 + seed);
    const Tensor x = random_tensor({3, 2, 4, 5}, rng), k = random_tensor({3, 2, 3, 3}, rng);
    const Tensor r = random_tensor({2, 3}, rng), s = random_tensor({2, 2}, rng), b = random_tensor({2, 3}, rng);
    const Tensor target = random_tensor({3, 3, 4, 5}, rng);
    const std::vector<int> members{1, 0, 1};
    // which argument is the variable: 0 x, 1 kernel, 2 r, 3 s, 4 bias
    for (int which = 0; which < 5; ++which) {
      for (bool fuse : {false, true}) {
        const auto f = [&](Tape& t, Var v) {
          ConvVars cv = conv_vars(t, k, r, s, b);
          Var xv = t.constant(x);
          if (which == 0) xv = v;
          if (which == 1) cv.kernel = v;
          if (which == 2) cv.r = v;
          if (which == 3) cv.s = v;
          if (which == 4) cv.bias = v;
          Var y = be_conv_forward(xv, cv, members, fuse);
          return sum(mul(y, t.constant(target)));
        };
        const Tensor& at = which == 0 ? x : which == 1 ? k : which == 2 ? r : which == 3 ? s : b;
        EXPECT_LE(grad_check(f, at).max_rel_error, 1e-4) << "argument " << which << " relu " << fuse;
      }
    }
  }
}

TEST(BeDense, GradientsOfEveryInput) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(4000 + seed);
    const Tensor x = random_tensor({5, 4}, rng), w = random_tensor({3, 4}, rng);
    const Tensor r = random_tensor({2, 3}, rng), s = random_tensor({2, 4}, rng), b = random_tensor({2, 3}, rng);
    const std::vector<int> members{1, 0, 1, 1, 0};
    std::vector<int> labels{0, 2, 1, 1, 0};
    for (int which = 0; which < 5; ++which) {
      const auto f = [&](Tape& t, Var v) {
        LinearVars lv = linear_vars(t, w, r, s, b);
        Var xv = t.constant(x);
        if (which == 0) xv = v;
        if (which == 1) lv.weight = v;
        if (which == 2) lv.r = v;
        if (which == 3) lv.s = v;
        if (which == 4) lv.bias = v;
        return softmax_cross_entropy(be_dense_forward(xv, lv, members), labels).loss;
      };
      const Tensor& at = which == 0 ? x : which == 1 ? w : which == 2 ? r : which == 3 ? s : b;
      EXPECT_LE(grad_check(f, at).max_rel_error, 1e-4) << "argument " << which;
    }
  }
}

TEST(DepthMask, ExtremesAndRange) {
  Rng rng(6);
  const DepthMask keep = sample_depth_mask(0.0, 4, 50, rng);
  EXPECT_TRUE(keep.all_kept());
  EXPECT_EQ(keep.factor(3, 2), 1.0);
  const DepthMask drop = sample_depth_mask(1.0, 4, 50, rng);
  for (auto k : drop.keep) EXPECT_EQ(k, 0);
  EXPECT_EQ(drop.factor(0, 0), 0.0);
  EXPECT_THROW(sample_depth_mask(-0.1, 1, 1, rng), ValidationError);
  EXPECT_THROW(sample_depth_mask(1.5, 1, 1, rng), ValidationError);
}

TEST(DepthMask, DropFrequency) {
  Rng rng(7);
  const DepthMask m = sample_depth_mask(0.15, 1, 100000, rng);
  const auto dropped = std::count(m.keep.begin(), m.keep.end(), std::uint8_t{0});
  EXPECT_NEAR(static_cast<double>(dropped) / 1e5, 0.15, 0.005);
}

TEST(DepthMask, InvertedScalingIsUnbiased) {
  Rng rng(8);
  const DepthMask m = sample_depth_mask(0.15, 1, 100000, rng);
  double mean = 0.0;
  for (std::size_t n = 0; n < m.rows; ++n) mean += m.factor(n, 0);
  mean /= static_cast<double>(m.rows);
  EXPECT_NEAR(mean, 1.0, 0.01);
  EXPECT_DOUBLE_EQ(m.factor(std::find(m.keep.begin(), m.keep.end(), 1) - m.keep.begin(), 0), 1.0 / 0.85);
}

TEST(DepthMask, Concat) {
  Rng rng(9);
  const std::vector<DepthMask> parts{sample_depth_mask(0.0, 2, 3, rng), sample_depth_mask(1.0, 2, 2, rng)};
  const DepthMask m = concat_masks(parts);
  EXPECT_EQ(m.rows, 5u);
  EXPECT_EQ(m.blocks, 2u);
  EXPECT_TRUE(m.kept(2, 1));
  EXPECT_FALSE(m.kept(3, 0));
  EXPECT_EQ(m.drop_prob[4], 1.0);
}

TEST(ReplicatedMembers, Layout) {
  const auto m = replicated_members(3, 2);
  EXPECT_EQ(m, (std::vector<int>{0, 0, 0, 1, 1, 1}));
}
