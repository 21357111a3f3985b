#include "dcal/ensemble_layers.hpp"

#include <algorithm>
#include <memory>
#include <string>

#include "dcal/kernels.hpp"

#include "dcal/errors.hpp"

namespace dcal {

AdapterPair init_ensemble_params(std::size_t members, std::size_t out_dim, std::size_t in_dim, Rng& rng) {
  if (members < 1) throw ValidationError("ensemble needs at least one member");
  AdapterPair p{Tensor({members, out_dim}), Tensor({members, in_dim})};
  for (auto& v : p.r.values()) v = rng.normal(1.0, 0.5);
  for (auto& v : p.s.values()) v = rng.normal(1.0, 0.5);
  return p;
}

Var be_dense_forward(Var x, const LinearVars& layer, std::span<const int> members) {
  Var h = x;
  if (layer.adapted) h = scale_by_member(h, layer.s, members);
  h = dense(h, layer.weight);
  if (layer.adapted) h = scale_by_member(h, layer.r, members);
  return add_bias_by_member(h, layer.bias, members);
}

namespace {

void check_conv_layer(const Tensor& xv, const ConvVars& layer, std::span<const int> members) {
  const Tensor& kv = layer.kernel.value();
  if (xv.rank() != 4 || kv.rank() != 4 || kv.dim(2) != 3 || kv.dim(3) != 3 || xv.dim(1) != kv.dim(1)) {
    throw DimensionError("be_conv_forward: input " + shape_string(xv.shape()) + " does not fit kernel " +
                         shape_string(kv.shape()));
  }
  if (members.size() != xv.dim(0)) {
    throw DimensionError("be_conv_forward: " + std::to_string(members.size()) + " member indices for " +
                         std::to_string(xv.dim(0)) + " rows");
  }
  const Tensor& bv = layer.bias.value();
  if (bv.rank() != 2 || bv.dim(1) != kv.dim(0)) {
    throw DimensionError("be_conv_forward: bias " + shape_string(bv.shape()) + " does not match kernel " +
                         shape_string(kv.shape()));
  }
  const std::size_t k = bv.dim(0);
  if (layer.adapted) {
    const Tensor& rv = layer.r.value();
    const Tensor& sv = layer.s.value();
    if (rv.rank() != 2 || sv.rank() != 2 || rv.dim(0) != k || sv.dim(0) != k || rv.dim(1) != kv.dim(0) ||
        sv.dim(1) != kv.dim(1)) {
      throw DimensionError("be_conv_forward: adapters " + shape_string(rv.shape()) + ", " + shape_string(sv.shape()) +
                           " do not match kernel " + shape_string(kv.shape()) + " with " + std::to_string(k) +
                           " members");
    }
  }
  for (int m : members) {
    if (m < 0 || static_cast<std::size_t>(m) >= k) {
      throw ValidationError("member index " + std::to_string(m) + " outside [0," + std::to_string(k) + ")");
    }
  }
}

}  // namespace

// One tape node for s-scaling, convolution, r-scaling, bias and the optional
// ReLU. Scaling by an adapter of exactly 1 is a no-op in floating point, so a
// one-member layer with unit adapters reproduces the unadapted layer bit for bit.
Var be_conv_forward(Var x, const ConvVars& layer, std::span<const int> members, bool relu) {
  const Tensor& xv = x.value();
  check_conv_layer(xv, layer, members);
  const Tensor& kv = layer.kernel.value();
  const kernels::ConvShape cs{xv.dim(0), xv.dim(1), kv.dim(0), xv.dim(2), xv.dim(3)};
  const std::size_t rows = cs.batch, cin = cs.in_channels, cout = cs.out_channels;
  const bool adapted = layer.adapted;
  std::vector<int> idx(members.begin(), members.end());

  // member parameters expanded to one row per example
  auto per_row = [&](const Tensor& t, std::size_t width) {
    auto out = std::make_shared<std::vector<double>>(rows * width);
    for (std::size_t n = 0; n < rows; ++n) {
      std::copy_n(t.data() + static_cast<std::size_t>(idx[n]) * width, width, out->data() + n * width);
    }
    return out;
  };
  const auto bias_rows = per_row(layer.bias.value(), cout);
  std::shared_ptr<std::vector<double>> s_rows, r_rows;
  if (adapted) {
    s_rows = per_row(layer.s.value(), cin);
    r_rows = per_row(layer.r.value(), cout);
  }

  Tensor out({rows, cout, cs.height, cs.width});
  std::shared_ptr<double[]> pre;  // conv output before r, adapted only
  if (adapted) pre.reset(new double[cs.output_size()]);
  std::shared_ptr<std::uint8_t[]> active;
  if (relu) active.reset(new std::uint8_t[cs.output_size()]);
  kernels::ConvScaling scaling;
  scaling.in_scale = adapted ? s_rows->data() : nullptr;
  scaling.out_scale = adapted ? r_rows->data() : nullptr;
  scaling.bias = bias_rows->data();
  scaling.relu = relu;
  kernels::parallel::conv3x3_forward_scaled(cs, xv.values(), kv.values(), scaling, out.values(), pre.get(),
                                            active.get());

  const Var kernel = layer.kernel, r = layer.r, s = layer.s, bias = layer.bias;
  auto backward = [x, kernel, r, s, bias, adapted, cs, idx, s_rows, r_rows, pre, active](Tape& t, const Tensor& g) {
    const std::size_t cin = cs.in_channels, cout = cs.out_channels, plane = cs.height * cs.width;
    // gradient at the conv output, before r
    std::vector<double> gy0(g.values().begin(), g.values().end());
    if (active) {
      for (std::size_t i = 0; i < gy0.size(); ++i) {
        if (!active[i]) gy0[i] = 0.0;
      }
    }
    std::span<double> gb = bias.requires_grad() ? t.grad_buffer(bias) : std::span<double>{};
    std::span<double> gr = adapted && r.requires_grad() ? t.grad_buffer(r) : std::span<double>{};
    for (std::size_t n = 0; n < cs.batch; ++n) {
      const auto m = static_cast<std::size_t>(idx[n]);
      for (std::size_t o = 0; o < cout; ++o) {
        const std::size_t off = (n * cout + o) * plane;
        double* gp = gy0.data() + off;
        double sb = 0.0, sr = 0.0;
        if (adapted) {
          const double* yp = pre.get() + off;
          const double ro = (*r_rows)[n * cout + o];
          for (std::size_t i = 0; i < plane; ++i) {
            sb += gp[i];
            sr += gp[i] * yp[i];
            gp[i] *= ro;
          }
        } else {
          for (std::size_t i = 0; i < plane; ++i) sb += gp[i];
        }
        if (!gb.empty()) gb[m * cout + o] += sb;
        if (!gr.empty()) gr[m * cout + o] += sr;
      }
    }
    const double* in_scale = adapted ? s_rows->data() : nullptr;
    if (kernel.requires_grad()) {
      std::vector<double> dk(cs.kernel_size());
      kernels::parallel::conv3x3_backward_kernel_scaled(cs, x.value().values(), in_scale, gy0, dk);
      t.accumulate_grad(kernel, std::move(dk));
    }
    const bool want_s = adapted && s.requires_grad();
    if (!x.requires_grad() && !want_s) return;
    std::vector<double> dx(cs.input_size());
    kernels::parallel::conv3x3_backward_input(cs, gy0, kernel.value().values(), dx);
    if (adapted) {
      const double* xv = x.value().data();
      std::span<double> gs = want_s ? t.grad_buffer(s) : std::span<double>{};
      for (std::size_t n = 0; n < cs.batch; ++n) {
        const auto m = static_cast<std::size_t>(idx[n]);
        for (std::size_t c = 0; c < cin; ++c) {
          const std::size_t off = (n * cin + c) * plane;
          double* dp = dx.data() + off;
          const double sc = in_scale[n * cin + c];
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) {
            acc += dp[i] * xv[off + i];
            dp[i] *= sc;
          }
          if (!gs.empty()) gs[m * cin + c] += acc;
        }
      }
    }
    if (x.requires_grad()) t.accumulate_grad(x, std::move(dx));
  };
  if (adapted) return x.tape()->record(std::move(out), {x, kernel, r, s, bias}, std::move(backward));
  return x.tape()->record(std::move(out), {x, kernel, bias}, std::move(backward));
}

std::vector<int> replicated_members(std::size_t batch, std::size_t members) {
  std::vector<int> idx(batch * members);
  for (std::size_t k = 0; k < members; ++k) {
    for (std::size_t n = 0; n < batch; ++n) idx[k * batch + n] = static_cast<int>(k);
  }
  return idx;
}

double DepthMask::factor(std::size_t row, std::size_t block) const {
  if (!kept(row, block)) return 0.0;
  return 1.0 / (1.0 - drop_prob[row]);
}

bool DepthMask::all_kept() const {
  for (auto k : keep) {
    if (!k) return false;
  }
  return true;
}

DepthMask sample_depth_mask(double drop_prob, std::size_t blocks, std::size_t rows, Rng& rng) {
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) {
    throw ValidationError("drop probability " + std::to_string(drop_prob) + " outside [0,1]");
  }
  DepthMask m;
  m.rows = rows;
  m.blocks = blocks;
  m.keep.resize(rows * blocks);
  m.drop_prob.assign(rows, drop_prob);
  for (auto& k : m.keep) k = rng.bernoulli(drop_prob) ? 0 : 1;
  return m;
}

DepthMask concat_masks(std::span<const DepthMask> parts) {
  DepthMask out;
  if (parts.empty()) return out;
  out.blocks = parts.front().blocks;
  for (const auto& p : parts) {
    if (p.blocks != out.blocks) throw ValidationError("depth masks disagree on block count");
    out.rows += p.rows;
    out.keep.insert(out.keep.end(), p.keep.begin(), p.keep.end());
    out.drop_prob.insert(out.drop_prob.end(), p.drop_prob.begin(), p.drop_prob.end());
  }
  return out;
}

}  // namespace dcal
