// Acceptance checks. Prints one PASS/FAIL line per criterion.
//
//   dcal_acceptance                 criteria 1-7 and 9
//   dcal_acceptance --criteria 8    desk-scale trend study (long)

#include <malloc.h>
#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dcal/adversary.hpp"
#include "dcal/augmix.hpp"
#include "dcal/corruptions.hpp"
#include "dcal/ensemble_layers.hpp"
#include "dcal/grad_check.hpp"
#include "dcal/metrics.hpp"
#include "dcal/model.hpp"
#include "dcal/trainer.hpp"

using namespace dcal;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

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

void randomize(ResidualClassifier& model, Rng& rng) {
  for (auto& p : model.parameters()) {
    for (auto& v : p.tensor->values()) {
      switch (p.kind) {
        case ParamKind::shared: v = rng.uniform(-0.5, 0.5); break;
        case ParamKind::adapter: v = rng.uniform(0.5, 1.5); break;
        case ParamKind::bias: v = rng.uniform(-0.2, 0.2); break;
      }
    }
  }
}

ModelSpec small_spec(std::size_t members) {
  ModelSpec s;
  s.in_channels = 3;
  s.image_size = 4;
  s.width = 4;
  s.blocks = 2;
  s.classes = 3;
  s.members = members;
  return s;
}

struct Verdict {
  bool pass = true;
  std::string detail;
};

void report(int id, const std::string& title, const Verdict& v, double secs) {
  std::printf("CRITERION %d %s: %s  (%s; %.1f s)\n", id, title.c_str(), v.pass ? "PASS" : "FAIL", v.detail.c_str(),
              secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- 1: gradients -----------------------------------------------------------

Verdict criterion_gradients() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const std::vector<int> members{0, 1, 1};
    const std::vector<int> labels{0, 2, 1};

    // dense (BatchEnsemble) layer, gradient w.r.t. the shared weight
    const Tensor xd = random_tensor({3, 5}, rng), wd = random_tensor({4, 5}, rng);
    const Tensor rd = random_tensor({2, 4}, rng, 0.5, 1.5), sd = random_tensor({2, 5}, rng, 0.5, 1.5);
    const Tensor bd = random_tensor({2, 4}, rng);
    worst = std::max(worst, grad_check(
                                [&](Tape& t, Var w) {
                                  LinearVars l{w, t.constant(rd), t.constant(sd), t.constant(bd), true};
                                  Var y = be_dense_forward(t.constant(xd), l, members);
                                  return sum(mul(y, y));
                                },
                                wd)
                                .max_rel_error);

    // conv layer, gradient w.r.t. the kernel
    const Tensor xc = random_tensor({3, 2, 5, 4}, rng), kc = random_tensor({3, 2, 3, 3}, rng);
    const Tensor rc = random_tensor({2, 3}, rng, 0.5, 1.5), sc = random_tensor({2, 2}, rng, 0.5, 1.5);
    const Tensor bc = random_tensor({2, 3}, rng);
    worst = std::max(worst, grad_check(
                                [&](Tape& t, Var k) {
                                  ConvVars c{k, t.constant(rc), t.constant(sc), t.constant(bc), true};
                                  Var y = be_conv_forward(t.constant(xc), c, members, true);
                                  return sum(mul(y, y));
                                },
                                kc)
                                .max_rel_error);

    // residual block x + conv(relu(conv(x))), gradient w.r.t. its input
    const Tensor xb = random_tensor({3, 3, 4, 4}, rng);
    const Tensor k1 = random_tensor({3, 3, 3, 3}, rng, -0.5, 0.5), k2 = random_tensor({3, 3, 3, 3}, rng, -0.5, 0.5);
    const Tensor r1 = random_tensor({2, 3}, rng, 0.5, 1.5), s1 = random_tensor({2, 3}, rng, 0.5, 1.5);
    const Tensor r2 = random_tensor({2, 3}, rng, 0.5, 1.5), s2 = random_tensor({2, 3}, rng, 0.5, 1.5);
    const Tensor b1 = random_tensor({2, 3}, rng), b2 = random_tensor({2, 3}, rng);
    worst = std::max(worst, grad_check(
                                [&](Tape& t, Var x) {
                                  ConvVars c1{t.constant(k1), t.constant(r1), t.constant(s1), t.constant(b1), true};
                                  ConvVars c2{t.constant(k2), t.constant(r2), t.constant(s2), t.constant(b2), true};
                                  Var y = add(x, be_conv_forward(be_conv_forward(x, c1, members, true), c2, members));
                                  return sum(mul(y, y));
                                },
                                xb)
                                .max_rel_error);

    // full model: cross-entropy gradient w.r.t. the input (the adversary's gradient)
    ResidualClassifier model(small_spec(2), rng);
    randomize(model, rng);
    const Tensor xm = random_tensor({3, 3, 4, 4}, rng);
    worst = std::max(worst, grad_check(
                                [&](Tape& t, Var x) {
                                  return softmax_cross_entropy(model.forward(t, x, members).logits, labels).loss;
                                },
                                xm)
                                .max_rel_error);

    // full model: every parameter tensor against central differences
    auto ce = [&] {
      Tape t;
      return softmax_cross_entropy(t.constant(model.logits(xm, members)), labels).loss.value().item();
    };
    Tape t;
    ForwardOptions opts;
    opts.params_require_grad = true;
    const ForwardResult fr = model.forward(t, t.constant(xm), members, opts);
    t.backward(softmax_cross_entropy(fr.logits, labels).loss);
    auto params = model.parameters();
    const double eps = 1e-5;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor g = t.grad(fr.params[i]);
      auto vals = params[i].tensor->values();
      for (std::size_t j = 0; j < vals.size(); ++j) {
        const double keep = vals[j];
        vals[j] = keep + eps;
        const double up = ce();
        vals[j] = keep - eps;
        const double down = ce();
        vals[j] = keep;
        const double num = (up - down) / (2 * eps);
        worst = std::max(worst, std::abs(g[j] - num) / std::max({1.0, std::abs(g[j]), std::abs(num)}));
      }
    }
  }
  return {worst <= 1e-4, "max rel error " + fmt("%.3g", worst) + " over 10 seeds, tol 1e-4"};
}

// ---- 2: rank-1 equivalence -----------------------------------------------------

Verdict criterion_rank1() {
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(5000 + seed);
    const std::size_t K = 1 + rng.index(4), in = 1 + rng.index(9), out = 1 + rng.index(9), N = 1 + rng.index(12);
    const Tensor x = random_tensor({N, in}, rng), w = random_tensor({out, in}, rng);
    const Tensor r = random_tensor({K, out}, rng, -2, 2), s = random_tensor({K, in}, rng, -2, 2);
    const Tensor b = random_tensor({K, out}, rng);
    const auto members = random_members(N, K, rng);
    Tape t;
    LinearVars l{t.constant(w), t.constant(r), t.constant(s), t.constant(b), true};
    const Tensor y = be_dense_forward(t.constant(x), l, members).value();
    for (std::size_t n = 0; n < N; ++n) {
      const auto i = static_cast<std::size_t>(members[n]);
      for (std::size_t o = 0; o < out; ++o) {
        double acc = b[i * out + o];
        for (std::size_t j = 0; j < in; ++j) acc += (w[o * in + j] * r[i * out + o] * s[i * in + j]) * x[n * in + j];
        worst = std::max(worst, rel(y[n * out + o], acc));
      }
    }
  }
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(6000 + seed);
    const std::size_t K = 1 + rng.index(4), C = 1 + rng.index(5), O = 1 + rng.index(5);
    const std::size_t H = 1 + rng.index(6), W = 1 + rng.index(9), N = 1 + rng.index(6);
    const Tensor x = random_tensor({N, C, H, W}, rng), k = random_tensor({O, C, 3, 3}, rng);
    const Tensor r = random_tensor({K, O}, rng, -2, 2), s = random_tensor({K, C}, rng, -2, 2);
    const Tensor b = random_tensor({K, O}, rng);
    const auto members = random_members(N, K, rng);
    Tape t;
    ConvVars c{t.constant(k), t.constant(r), t.constant(s), t.constant(b), true};
    const Tensor y = be_conv_forward(t.constant(x), c, members).value();
    for (std::size_t n = 0; n < N; ++n) {
      const auto m = static_cast<std::size_t>(members[n]);
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) {
            double acc = b[m * O + o];
            for (std::size_t ch = 0; ch < C; ++ch)
              for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                  const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
                  if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
                  const double kern = k[(o * C + ch) * 9 + static_cast<std::size_t>((di + 1) * 3 + dj + 1)] *
                                      r[m * O + o] * s[m * C + ch];
                  acc += kern * x[((n * C + ch) * H + static_cast<std::size_t>(ii)) * W + static_cast<std::size_t>(jj)];
                }
            worst = std::max(worst, rel(y[((n * O + o) * H + i) * W + j], acc));
          }
    }
  }
  return {worst <= 1e-6, "max rel deviation " + fmt("%.3g", worst) + " over 100 dense + 100 conv, tol 1e-6"};
}

// ---- 3: metric oracles ----------------------------------------------------------

Verdict criterion_metrics() {
  double worst = 0.0;
  bool rms_ge = true, one_bin_exact = true;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(7000 + seed);
    const std::size_t C = 2 + rng.index(9), N = 1 + rng.index(300), M = 1 + rng.index(20);
    std::vector<double> probs(N * C);
    std::vector<int> labels(N);
    const double sharp = rng.uniform(0.0, 6.0);
    for (std::size_t n = 0; n < N; ++n) {
      double z = 0.0;
      for (std::size_t c = 0; c < C; ++c) z += (probs[n * C + c] = std::exp(sharp * rng.normal(0.0, 1.0)));
      for (std::size_t c = 0; c < C; ++c) probs[n * C + c] /= z;
      labels[n] = static_cast<int>(rng.index(C));
    }
    const PredictionSet ps(C, probs, labels);

    std::vector<double> conf(N), hit(N);
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (probs[n * C + c] > probs[n * C + best]) best = c;
      conf[n] = probs[n * C + best];
      hit[n] = static_cast<int>(best) == labels[n] ? 1.0 : 0.0;
    }
    double e = 0.0, q = 0.0;
    for (std::size_t b = 0; b < M; ++b) {
      const double lo = static_cast<double>(b) / static_cast<double>(M);
      const double hi = static_cast<double>(b + 1) / static_cast<double>(M);
      double cnt = 0.0, a = 0.0, s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        if ((conf[n] > lo || (b == 0 && conf[n] >= lo)) && conf[n] <= hi) {
          cnt += 1.0;
          a += hit[n];
          s += conf[n];
        }
      }
      if (cnt == 0.0) continue;
      const double gap = a / cnt - s / cnt;
      e += cnt / static_cast<double>(N) * std::abs(gap);
      q += cnt / static_cast<double>(N) * gap * gap;
    }
    const double got = ece(ps, M), got_rms = ece_rms(ps, M);
    worst = std::max({worst, std::abs(got - e), std::abs(got_rms - std::sqrt(q))});
    if (got_rms < got) rms_ge = false;

    double acc = 0.0, mc = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      acc += hit[n];
      mc += conf[n];
    }
    if (ece(ps, 1) != std::abs(acc / static_cast<double>(N) - mc / static_cast<double>(N))) one_bin_exact = false;
  }
  const bool ok = worst <= 1e-12 && rms_ge && one_bin_exact;
  return {ok, "max |diff| " + fmt("%.3g", worst) + ", ece_rms>=ece " + (rms_ge ? "all" : "violated") +
                  ", 1-bin exact " + (one_bin_exact ? "yes" : "no")};
}

// ---- 4: adversarial perturbation --------------------------------------------------

Verdict criterion_adversary() {
  bool ok = true;
  std::string detail;
  std::vector<double> x{0.5};
  perturb_row(x, std::vector<double>{-2.0}, 0.1, 0.5, 1.0, 0.875);
  const bool worked = std::abs(x[0] - 0.442857142857143) <= 1e-9;
  ok &= worked;
  detail += "worked example " + fmt("%.12f", x[0]);

  Rng rng(1);
  ResidualClassifier model(small_spec(4), rng);
  randomize(model, rng);
  bool identity = true, bounded = true;
  double worst_ratio = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 8, K = 4, row = 48;
    const Tensor xb = random_tensor({B * K, 3, 4, 4}, rng);
    std::vector<int> labels(B * K);
    for (auto& l : labels) l = static_cast<int>(rng.index(3));
    AdvConfig cfg;
    cfg.p = trial % 2 ? 0.875 : 0.5;
    const AdvResult r = perturb_replicated_batch(xb, labels, model, cfg, Rng(2 * trial), Rng(2 * trial + 1));
    const std::vector<double> s{0.0, 0.05, 0.1, 0.15};
    for (std::size_t n = 0; n < B * K; ++n) {
      const double sev = s[n / B];
      double d = 0.0;
      for (std::size_t j = 0; j < row; ++j) d = std::max(d, std::abs(r.x_adv[n * row + j] - xb[n * row + j]));
      if ((sev == 0.0 || r.m[n] == 0.0) && d != 0.0) identity = false;
      const double bound = r.u[n] * sev / cfg.p;
      if (d > bound * (1 + 1e-12)) bounded = false;
      if (bound > 0) worst_ratio = std::max(worst_ratio, d / bound);
    }
  }
  ok &= identity && bounded;
  detail += std::string(", identity at s=0/m=0 ") + (identity ? "holds" : "violated") + ", bound " +
            (bounded ? "holds" : "violated") + " (max ratio " + fmt("%.3f", worst_ratio) + ")";

  ModelSpec tiny = small_spec(1);
  tiny.in_channels = 1;
  tiny.image_size = 2;
  tiny.width = 1;
  tiny.blocks = 1;
  ResidualClassifier one(tiny, rng);
  const std::size_t rows = 100000;
  const double p = 0.875;
  const AdvResult g = adversarial_perturb(Tensor({rows, 1, 2, 2}, 0.5), std::vector<int>(rows, 0), one,
                                          std::vector<int>(rows, 0), std::vector<double>(rows, 0.0), p, Rng(99));
  double mean = 0.0;
  for (double m : g.m) mean += m / p;
  mean /= static_cast<double>(rows);
  const bool unbiased = std::abs(mean - 1.0) <= 0.01;
  ok &= unbiased;
  detail += ", mean(m/p) " + fmt("%.4f", mean);
  return {ok, detail};
}

// ---- 5: AugMix -----------------------------------------------------------------------

Verdict criterion_augmix() {
  Rng rng(11);
  double simplex_err = 0.0;
  bool in_range = true, exact = true;
  for (int trial = 0; trial < 2000; ++trial) {
    Image img(8, 8, 3);
    for (auto& v : img.pixels) v = rng.uniform();
    AugmentTrace trace;
    Rng r = rng.derive(static_cast<std::uint64_t>(trial));
    const Image aug = augment(img, 1 + static_cast<int>(rng.index(10)), r, {}, &trace);
    double s = 0.0;
    for (double w : trace.weights) {
      s += w;
      if (w < 0.0) simplex_err = std::max(simplex_err, -w);
    }
    simplex_err = std::max(simplex_err, std::abs(s - 1.0));
    for (double v : aug.pixels) in_range &= v >= 0.0 && v <= 1.0;
    const Image mixed = augment_and_mix(img, 3, MixPolicy::beta(1.0), r);
    for (double v : mixed.pixels) in_range &= v >= 0.0 && v <= 1.0;
    exact &= mix_images(img, aug, 0.0).pixels == img.pixels;
    exact &= augment_and_mix(img, 3, MixPolicy::bernoulli(0.0), r).pixels == img.pixels;
  }
  const MixPolicy bern = MixPolicy::bernoulli(0.875);
  Rng mr(12);
  double ones = 0.0;
  for (int i = 0; i < 100000; ++i) ones += bern.sample(mr);
  const double freq = ones / 1e5;
  const bool ok = simplex_err <= 1e-9 && std::abs(freq - 0.875) <= 0.005 && in_range && exact;
  return {ok, "simplex err " + fmt("%.2g", simplex_err) + ", bernoulli freq " + fmt("%.4f", freq) +
                  ", m=0 exact " + (exact ? "yes" : "no") + ", range " + (in_range ? "ok" : "violated")};
}

// ---- 6: Jensen ------------------------------------------------------------------------

Verdict criterion_jensen() {
  TrainConfig cfg = preset_config("be");
  cfg.data.train_size = 400;
  cfg.data.test_size = 200;
  cfg.model.width = 8;
  cfg.model.blocks = 2;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  const ExperimentInputs in = prepare_inputs(cfg);
  TrainState st;
  run_experiment(cfg, in, {}, {}, &st);
  std::vector<const LabeledImageDataset*> sets{&in.test};
  for (const auto& cell : in.grid) sets.push_back(&cell.data);
  std::size_t held = 0;
  double min_gap = 1e300;
  for (const auto* ds : sets) {
    const Evaluation ev = evaluate(st.model, st.normalizer, *ds);
    double mean_member = 0.0;
    for (const auto& m : ev.members) mean_member += nll(m);
    mean_member /= static_cast<double>(ev.members.size());
    const double ens = nll(ev.ensemble);
    if (ens <= mean_member) ++held;
    min_gap = std::min(min_gap, mean_member - ens);
  }
  return {held == sets.size(), std::to_string(held) + "/" + std::to_string(sets.size()) +
                                   " datasets, min(mean member NLL - ensemble NLL) " + fmt("%.3g", min_gap)};
}

// ---- 7: degenerate configuration ------------------------------------------------------

Verdict criterion_degenerate() {
  TrainConfig base;
  base.data.train_size = 512;
  base.data.test_size = 256;
  base.model.width = 8;
  base.model.blocks = 2;
  base.epochs = 2;
  base.batch_size = 64;
  base.corruptions.enabled = true;

  TrainConfig single = base;
  single.model.ensemble = false;
  single.model.members = 1;

  TrainConfig be = base;
  be.model.members = 1;
  be.adapters_at_ones = true;
  be.train_adapters = false;
  be.adversary.enabled = true;
  be.adversary.config.severities.values = {0.0};
  be.depth.enabled = true;
  be.depth.severities.values = {0.0};

  const ExperimentInputs in = prepare_inputs(base);
  const RunReport a = run_experiment(single, in);
  const RunReport b = run_experiment(be, in);

  double worst = 0.0;
  auto cmp = [&](const Metrics& x, const Metrics& y) {
    worst = std::max({worst, std::abs(x.error - y.error), std::abs(x.ece - y.ece), std::abs(x.ece_rms - y.ece_rms),
                      std::abs(x.nll - y.nll)});
  };
  for (std::size_t e = 0; e < a.history.size(); ++e)
    worst = std::max(worst, std::abs(a.history[e].train_loss - b.history[e].train_loss));
  cmp(a.test, b.test);
  const auto& ca = *a.corruption;
  const auto& cb = *b.corruption;
  worst = std::max({worst, std::abs(ca.error_summary.overall - cb.error_summary.overall),
                    std::abs(ca.ece_summary.overall - cb.ece_summary.overall),
                    std::abs(ca.ece_rms_summary.overall - cb.ece_rms_summary.overall),
                    std::abs(ca.nll_summary.overall - cb.nll_summary.overall)});
  return {worst <= 1e-9, "max |diff| over train loss, test and grid metrics " + fmt("%.3g", worst) + ", tol 1e-9"};
}

// ---- 9: determinism -------------------------------------------------------------------

Verdict criterion_determinism() {
  std::size_t same = 0;
  std::string first_diff;
  for (const auto& name : preset_names()) {
    TrainConfig cfg = preset_config(name);
    cfg.data.train_size = 128;
    cfg.data.test_size = 64;
    cfg.data.n_val = 32;
    cfg.model.width = 4;
    cfg.model.blocks = 2;
    cfg.epochs = 2;
    cfg.batch_size = 32;
    const ExperimentInputs in = prepare_inputs(cfg);
    RunReport a = run_experiment(cfg, in), b = run_experiment(cfg, in);
    a.wall_seconds = b.wall_seconds = 0.0;
    if (report_to_json(a) == report_to_json(b)) {
      ++same;
    } else if (first_diff.empty()) {
      first_diff = ", first difference in " + name;
    }
  }
  return {same == preset_names().size(),
          std::to_string(same) + "/" + std::to_string(preset_names().size()) + " presets bit-identical" + first_diff};
}

// ---- 8: desk-scale trend study ----------------------------------------------------------

struct TrendOptions {
  std::size_t train_size = 8000;
  std::size_t test_size = 2000;
  std::size_t epochs = 30;
  int seeds = 3;
  double budget_seconds = 7200.0;
};

Verdict criterion_trend(const TrendOptions& o) {
  struct Pair {
    std::string label;
    std::string diverse_preset;
    std::string control_preset;
  };
  const std::vector<Pair> pairs{{"BE+Adv", "be-adv", "be-adv"}, {"AM", "am-bern", "am-beta"}};
  const auto t0 = Clock::now();
  Verdict v;
  std::string detail;
  bool trend = true;
  for (const auto& pair : pairs) {
    int wins = 0;
    for (int seed = 0; seed < o.seeds; ++seed) {
      double ece_of[2] = {0.0, 0.0};
      for (int diverse = 1; diverse >= 0; --diverse) {
        TrainConfig cfg = preset_config(diverse ? pair.diverse_preset : pair.control_preset, diverse != 0);
        cfg.data.train_size = o.train_size;
        cfg.data.test_size = o.test_size;
        cfg.data.image_size = 16;
        cfg.epochs = o.epochs;
        cfg.seed = static_cast<std::uint64_t>(seed);
        cfg.data.seed = static_cast<std::uint64_t>(seed);
        const auto r0 = Clock::now();
        const RunReport r = run_experiment(cfg);
        ece_of[diverse] = r.corruption->ece_summary.overall;
        std::printf("  %-24s seed %d  test err %.2f%%  test ECE %.2f%%  grid err %.2f%%  grid ECE %.2f%%  %.0f s\n",
                    cfg.preset.c_str(), seed, 100 * r.test.error, 100 * r.test.ece,
                    100 * r.corruption->error_summary.overall, 100 * ece_of[diverse], seconds_since(r0));
        std::fflush(stdout);
      }
      if (ece_of[1] <= ece_of[0]) ++wins;
    }
    const bool held = 3 * wins >= 2 * o.seeds;
    trend &= held;
    detail += pair.label + " diverse<=not-diverse grid ECE in " + std::to_string(wins) + "/" +
              std::to_string(o.seeds) + " seeds; ";
  }
  const double wall = seconds_since(t0);
  const bool in_budget = wall <= o.budget_seconds;
  v.pass = trend && in_budget;
  detail += "matrix wall " + fmt("%.0f", wall) + " s on " + std::to_string(omp_get_max_threads()) +
            " thread(s), budget " + fmt("%.0f", o.budget_seconds) + " s " + (in_budget ? "met" : "exceeded");
  v.detail = detail;
  return v;
}

std::set<int> parse_criteria(const std::string& spec) {
  std::set<int> out;
  std::size_t pos = 0;
  while (pos < spec.size()) {
    const std::size_t comma = spec.find(',', pos);
    const std::string part = spec.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    const std::size_t dash = part.find('-');
    if (dash == std::string::npos) {
      out.insert(std::stoi(part));
    } else {
      for (int i = std::stoi(part.substr(0, dash)); i <= std::stoi(part.substr(dash + 1)); ++i) out.insert(i);
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  // per-thread arenas fragment badly under the tape's short-lived buffers
  mallopt(M_ARENA_MAX, 2);

  CLI::App app{"acceptance checks"};
  std::string which = "1-7,9";
  TrendOptions trend;
  bool strict_trend = false;
  app.add_option("--criteria", which, "comma separated list or ranges, e.g. 1-7,9");
  app.add_option("--trend-train-size", trend.train_size);
  app.add_option("--trend-test-size", trend.test_size);
  app.add_option("--trend-epochs", trend.epochs);
  app.add_option("--trend-seeds", trend.seeds);
  app.add_flag("--strict-trend", strict_trend, "non-zero exit when the trend study fails");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> run = parse_criteria(which);
  struct Entry {
    int id;
    const char* title;
    std::function<Verdict()> fn;
  };
  const std::vector<Entry> entries{
      {1, "gradient correctness", criterion_gradients},
      {2, "rank-1 equivalence", criterion_rank1},
      {3, "metric oracles", criterion_metrics},
      {4, "adversarial perturbation contract", criterion_adversary},
      {5, "augmix contract", criterion_augmix},
      {6, "ensemble NLL (Jensen)", criterion_jensen},
      {7, "degenerate configuration", criterion_degenerate},
      {8, "desk-scale trend study", [&] { return criterion_trend(trend); }},
      {9, "determinism", criterion_determinism},
  };
  int hard_failures = 0;
  for (const auto& e : entries) {
    if (!run.count(e.id)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = e.fn();
    } catch (const std::exception& ex) {
      v = {false, std::string("exception: ") + ex.what()};
    }
    report(e.id, e.title, v, seconds_since(t0));
    // the trend study is a soft gate: reported, not fatal unless asked
    if (!v.pass && (e.id != 8 || strict_trend)) ++hard_failures;
  }
  return hard_failures == 0 ? 0 : 1;
}
