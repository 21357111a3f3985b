#include "dcal/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dcal/errors.hpp"
#include "dcal/kernels.hpp"

namespace dcal {

const Tensor& Var::value() const {
  if (!tape_) throw UsageError("value() on an unbound Var");
  return tape_->value(*this);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(*this); }

void Tape::check_owned(Var v, const char* what) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) {
    throw UsageError(std::string(what) + ": variable does not belong to this tape");
  }
}

Var Tape::leaf(Tensor value) {
  const bool rg = value.requires_grad();
  nodes_.push_back(Node{std::move(value), {}, rg, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  value.set_requires_grad(false);
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  bool rg = false;
  for (const Var& p : parents) {
    check_owned(p, "record");
    rg = rg || nodes_[p.id_].requires_grad;
  }
  value.set_requires_grad(rg);
  nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  check_owned(loss, "backward");
  Node& root = nodes_[loss.id_];
  if (root.value.numel() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " + shape_string(root.value.shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  visits_.clear();
  if (!root.requires_grad) return;
  root.grad.assign(1, 1.0);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || node.grad.empty()) continue;
    visits_.push_back(i);
    // lend the gradient to the closure, then take it back so grad() still sees it
    Tensor g(node.value.shape(), std::move(node.grad));
    node.backward(*this, g);
    nodes_[i].grad = std::move(g.storage());
  }
}

const Tensor& Tape::value(Var v) const {
  check_owned(v, "value");
  return nodes_[v.id_].value;
}

Tensor Tape::grad(Var v) const {
  check_owned(v, "grad");
  const Node& n = nodes_[v.id_];
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return Tensor(n.value.shape(), n.grad);
}

bool Tape::requires_grad(Var v) const {
  check_owned(v, "requires_grad");
  return nodes_[v.id_].requires_grad;
}

void Tape::accumulate_grad(Var v, std::vector<double>&& contribution) {
  check_owned(v, "accumulate_grad");
  Node& n = nodes_[v.id_];
  if (contribution.size() != n.value.numel()) {
    throw DimensionError("gradient of " + std::to_string(contribution.size()) + " values for a tensor of shape " +
                         shape_string(n.value.shape()));
  }
  if (n.grad.empty()) {
    n.grad = std::move(contribution);
    return;
  }
  for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad[i] += contribution[i];
}

void Tape::accumulate_grad(Var v, std::span<const double> contribution) {
  check_owned(v, "accumulate_grad");
  Node& n = nodes_[v.id_];
  if (contribution.size() != n.value.numel()) {
    throw DimensionError("gradient of " + std::to_string(contribution.size()) + " values for a tensor of shape " +
                         shape_string(n.value.shape()));
  }
  if (n.grad.empty()) {
    n.grad.assign(contribution.begin(), contribution.end());
    return;
  }
  for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad[i] += contribution[i];
}

std::span<double> Tape::grad_buffer(Var v) {
  check_owned(v, "grad_buffer");
  Node& n = nodes_[v.id_];
  if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
  return n.grad;
}

// ---------------------------------------------------------------------------

namespace {

void require_same_tape(Var a, Var b) {
  if (!a.valid() || a.tape() != b.tape()) throw UsageError("operands recorded on different tapes");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void add_into(std::span<double> dst, std::span<const double> src) {
  const std::size_t n = dst.size();
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
}

// inner = product of dims after axis 1
std::size_t inner_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

void check_members(std::span<const int> members, std::size_t rows, std::size_t k) {
  if (members.size() != rows) {
    throw ValidationError("member index list has " + std::to_string(members.size()) + " entries for " +
                          std::to_string(rows) + " rows");
  }
  for (int m : members) {
    if (m < 0 || static_cast<std::size_t>(m) >= k) {
      throw ValidationError("member index " + std::to_string(m) + " outside [0," + std::to_string(k) + ")");
    }
  }
}

}  // namespace

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "add");
  Tensor out = av;
  add_into(out.values(), bv.values());
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (a.requires_grad()) t.accumulate_grad(a, g.values());
    if (b.requires_grad()) t.accumulate_grad(b, g.values());
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (a.requires_grad()) {
      auto ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= factor;
  return a.tape()->record(std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * g[i];
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return a.tape()->record(Tensor::scalar(total), {a}, [a](Tape& t, const Tensor& g) {
    const double gv = g.item();
    for (auto& v : t.grad_buffer(a)) v += gv;
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (av[i] > 0.0) ga[i] += g[i];
    }
  });
}

Var dense(Var x, Var weight) {
  require_same_tape(x, weight);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) {
    throw DimensionError("dense: input " + shape_string(xv.shape()) + " incompatible with weight " +
                         shape_string(wv.shape()));
  }
  const kernels::DenseShape s{xv.dim(0), xv.dim(1), wv.dim(0)};
  Tensor out({s.rows, s.out});
  kernels::parallel::dense_forward(s, xv.values(), wv.values(), out.values());
  return x.tape()->record(std::move(out), {x, weight}, [x, weight, s](Tape& t, const Tensor& g) {
    if (x.requires_grad()) {
      std::vector<double> dx(s.rows * s.in);
      kernels::parallel::dense_backward_input(s, g.values(), weight.value().values(), dx);
      t.accumulate_grad(x, std::move(dx));
    }
    if (weight.requires_grad()) {
      std::vector<double> dw(s.out * s.in);
      kernels::parallel::dense_backward_weight(s, x.value().values(), g.values(), dw);
      t.accumulate_grad(weight, std::move(dw));
    }
  });
}

Var dense(Var x, Var weight, Var bias) {
  const Tensor& bv = bias.value();
  if (bv.rank() != 1 || bv.dim(0) != weight.value().dim(0)) {
    throw DimensionError("dense: bias " + shape_string(bv.shape()) + " does not match weight " +
                         shape_string(weight.value().shape()));
  }
  return add_channel_bias(dense(x, weight), bias);
}

Var conv2d(Var x, Var kernel) {
  require_same_tape(x, kernel);
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  if (xv.rank() != 4 || kv.rank() != 4) {
    throw DimensionError("conv2d: expected input [B,C,H,W] and kernel [O,C,3,3], got " +
                         shape_string(xv.shape()) + " and " + shape_string(kv.shape()));
  }
  if (kv.dim(2) != 3 || kv.dim(3) != 3) {
    throw DimensionError("conv2d: kernel must be 3x3, got " + shape_string(kv.shape()));
  }
  if (xv.dim(1) != kv.dim(1)) {
    throw DimensionError("conv2d: input channels of " + shape_string(xv.shape()) +
                         " do not match kernel " + shape_string(kv.shape()));
  }
  const kernels::ConvShape s{xv.dim(0), xv.dim(1), kv.dim(0), xv.dim(2), xv.dim(3)};
  Tensor out({s.batch, s.out_channels, s.height, s.width});
  kernels::parallel::conv3x3_forward(s, xv.values(), kv.values(), out.values());
  return x.tape()->record(std::move(out), {x, kernel}, [x, kernel, s](Tape& t, const Tensor& g) {
    if (x.requires_grad()) {
      std::vector<double> dx(s.input_size());
      kernels::parallel::conv3x3_backward_input(s, g.values(), kernel.value().values(), dx);
      t.accumulate_grad(x, std::move(dx));
    }
    if (kernel.requires_grad()) {
      std::vector<double> dk(s.kernel_size());
      kernels::parallel::conv3x3_backward_kernel(s, x.value().values(), g.values(), dk);
      t.accumulate_grad(kernel, std::move(dk));
    }
  });
}

Var add_channel_bias(Var x, Var bias) {
  require_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() < 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw DimensionError("bias " + shape_string(bv.shape()) + " does not match channels of " +
                         shape_string(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), ch = xv.dim(1), inner = inner_size(xv.shape());
  Tensor out = xv;
  for (std::size_t n = 0; n < rows; ++n) {
    for (std::size_t c = 0; c < ch; ++c) {
      double* p = out.data() + (n * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bv[c];
    }
  }
  return x.tape()->record(std::move(out), {x, bias}, [x, bias, rows, ch, inner](Tape& t, const Tensor& g) {
    if (x.requires_grad()) t.accumulate_grad(x, g.values());
    if (bias.requires_grad()) {
      auto gb = t.grad_buffer(bias);
      for (std::size_t n = 0; n < rows; ++n) {
        for (std::size_t c = 0; c < ch; ++c) {
          const double* p = g.data() + (n * ch + c) * inner;
          double acc = 0.0;
          for (std::size_t i = 0; i < inner; ++i) acc += p[i];
          gb[c] += acc;
        }
      }
    }
  });
}

Var avg_pool2(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4 || xv.dim(2) % 2 != 0 || xv.dim(3) % 2 != 0) {
    throw DimensionError("avg_pool2 needs [B,C,H,W] with even H and W, got " + shape_string(xv.shape()));
  }
  const std::size_t planes = xv.dim(0) * xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t oh = H / 2, ow = W / 2;
  Tensor out({xv.dim(0), xv.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xv.data() + p * H * W;
    double* dst = out.data() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        const double* s = src + 2 * i * W + 2 * j;
        dst[i * ow + j] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
      }
    }
  }
  return x.tape()->record(std::move(out), {x}, [x, planes, H, W, oh, ow](Tape& t, const Tensor& g) {
    auto gx = t.grad_buffer(x);
    for (std::size_t p = 0; p < planes; ++p) {
      const double* src = g.data() + p * oh * ow;
      double* dst = gx.data() + p * H * W;
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j) {
          const double v = 0.25 * src[i * ow + j];
          double* d = dst + 2 * i * W + 2 * j;
          d[0] += v;
          d[1] += v;
          d[W] += v;
          d[W + 1] += v;
        }
      }
    }
  });
}

Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("global_avg_pool needs [B,C,H,W], got " + shape_string(xv.shape()));
  const std::size_t rows = xv.dim(0), ch = xv.dim(1), inner = xv.dim(2) * xv.dim(3);
  Tensor out({rows, ch});
  for (std::size_t p = 0; p < rows * ch; ++p) {
    const double* s = xv.data() + p * inner;
    double acc = 0.0;
    for (std::size_t i = 0; i < inner; ++i) acc += s[i];
    out[p] = acc / static_cast<double>(inner);
  }
  return x.tape()->record(std::move(out), {x}, [x, rows, ch, inner](Tape& t, const Tensor& g) {
    auto gx = t.grad_buffer(x);
    const double inv = 1.0 / static_cast<double>(inner);
    for (std::size_t p = 0; p < rows * ch; ++p) {
      const double v = g[p] * inv;
      double* d = gx.data() + p * inner;
      for (std::size_t i = 0; i < inner; ++i) d[i] += v;
    }
  });
}

Var scale_by_member(Var x, Var table, std::span<const int> members) {
  require_same_tape(x, table);
  const Tensor& xv = x.value();
  const Tensor& tv = table.value();
  if (xv.rank() < 2 || tv.rank() != 2 || tv.dim(1) != xv.dim(1)) {
    throw DimensionError("member scaling table " + shape_string(tv.shape()) + " does not match " +
                         shape_string(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), ch = xv.dim(1), inner = inner_size(xv.shape());
  check_members(members, rows, tv.dim(0));
  std::vector<int> idx(members.begin(), members.end());
  Tensor out = xv;
  for (std::size_t n = 0; n < rows; ++n) {
    const double* f = tv.data() + static_cast<std::size_t>(idx[n]) * ch;
    for (std::size_t c = 0; c < ch; ++c) {
      double* p = out.data() + (n * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] *= f[c];
    }
  }
  return x.tape()->record(
      std::move(out), {x, table}, [x, table, idx = std::move(idx), rows, ch, inner](Tape& t, const Tensor& g) {
        const Tensor& tv = table.value();
        if (x.requires_grad()) {
          auto gx = t.grad_buffer(x);
          for (std::size_t n = 0; n < rows; ++n) {
            const double* f = tv.data() + static_cast<std::size_t>(idx[n]) * ch;
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t off = (n * ch + c) * inner;
              for (std::size_t i = 0; i < inner; ++i) gx[off + i] += g[off + i] * f[c];
            }
          }
        }
        if (table.requires_grad()) {
          const Tensor& xv = x.value();
          auto gt = t.grad_buffer(table);
          for (std::size_t n = 0; n < rows; ++n) {
            double* f = gt.data() + static_cast<std::size_t>(idx[n]) * ch;
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t off = (n * ch + c) * inner;
              double acc = 0.0;
              for (std::size_t i = 0; i < inner; ++i) acc += g[off + i] * xv[off + i];
              f[c] += acc;
            }
          }
        }
      });
}

Var add_bias_by_member(Var x, Var table, std::span<const int> members) {
  require_same_tape(x, table);
  const Tensor& xv = x.value();
  const Tensor& tv = table.value();
  if (xv.rank() < 2 || tv.rank() != 2 || tv.dim(1) != xv.dim(1)) {
    throw DimensionError("member bias table " + shape_string(tv.shape()) + " does not match " +
                         shape_string(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), ch = xv.dim(1), inner = inner_size(xv.shape());
  check_members(members, rows, tv.dim(0));
  std::vector<int> idx(members.begin(), members.end());
  Tensor out = xv;
  for (std::size_t n = 0; n < rows; ++n) {
    const double* b = tv.data() + static_cast<std::size_t>(idx[n]) * ch;
    for (std::size_t c = 0; c < ch; ++c) {
      double* p = out.data() + (n * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += b[c];
    }
  }
  return x.tape()->record(
      std::move(out), {x, table}, [x, table, idx = std::move(idx), rows, ch, inner](Tape& t, const Tensor& g) {
        if (x.requires_grad()) t.accumulate_grad(x, g.values());
        if (table.requires_grad()) {
          auto gt = t.grad_buffer(table);
          for (std::size_t n = 0; n < rows; ++n) {
            double* b = gt.data() + static_cast<std::size_t>(idx[n]) * ch;
            for (std::size_t c = 0; c < ch; ++c) {
              const double* p = g.data() + (n * ch + c) * inner;
              double acc = 0.0;
              for (std::size_t i = 0; i < inner; ++i) acc += p[i];
              b[c] += acc;
            }
          }
        }
      });
}

Var scale_rows(Var x, std::span<const double> factors) {
  const Tensor& xv = x.value();
  if (xv.rank() < 1 || factors.size() != xv.dim(0)) {
    throw DimensionError("scale_rows: " + std::to_string(factors.size()) + " factors for shape " +
                         shape_string(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), row_size = xv.numel() / rows;
  std::vector<double> f(factors.begin(), factors.end());
  Tensor out = xv;
  for (std::size_t n = 0; n < rows; ++n) {
    double* p = out.data() + n * row_size;
    for (std::size_t i = 0; i < row_size; ++i) p[i] *= f[n];
  }
  return x.tape()->record(std::move(out), {x}, [x, f = std::move(f), rows, row_size](Tape& t, const Tensor& g) {
    auto gx = t.grad_buffer(x);
    for (std::size_t n = 0; n < rows; ++n) {
      for (std::size_t i = 0; i < row_size; ++i) gx[n * row_size + i] += g[n * row_size + i] * f[n];
    }
  });
}

namespace {

// probs row and log-sum-exp shifted by the row max; `lse_tail` = log(sum exp(z - max)).
void softmax_row(const double* z, std::size_t c, double* p, double& max_out, double& lse_tail) {
  std::size_t arg = 0;
  for (std::size_t j = 1; j < c; ++j) {
    if (z[j] > z[arg]) arg = j;
  }
  const double zmax = z[arg];
  double rest = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    p[j] = j == arg ? 1.0 : std::exp(z[j] - zmax);
    if (j != arg) rest += p[j];
  }
  const double denom = 1.0 + rest;
  for (std::size_t j = 0; j < c; ++j) p[j] /= denom;
  max_out = zmax;
  lse_tail = std::log1p(rest);
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax expects [B,C], got " + shape_string(logits.shape()));
  const std::size_t rows = logits.dim(0), c = logits.dim(1);
  Tensor probs({rows, c});
  for (std::size_t n = 0; n < rows; ++n) {
    double m = 0.0, tail = 0.0;
    softmax_row(logits.data() + n * c, c, probs.data() + n * c, m, tail);
  }
  return probs;
}

CrossEntropy softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2) throw DimensionError("cross-entropy expects logits [B,C], got " + shape_string(z.shape()));
  const std::size_t rows = z.dim(0), c = z.dim(1);
  if (labels.size() != rows) {
    throw ValidationError("cross-entropy: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ValidationError("label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
    }
  }
  Tensor probs({rows, c});
  double total = 0.0;
  for (std::size_t n = 0; n < rows; ++n) {
    double m = 0.0, tail = 0.0;
    const double* zr = z.data() + n * c;
    softmax_row(zr, c, probs.data() + n * c, m, tail);
    total += (m - zr[labels[n]]) + tail;
  }
  const double loss = total / static_cast<double>(rows);
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor saved = probs;
  Var out = logits.tape()->record(
      Tensor::scalar(loss), {logits},
      [logits, lab = std::move(lab), saved = std::move(saved), rows, c](Tape& t, const Tensor& g) {
        const double scale = g.item() / static_cast<double>(rows);
        auto gz = t.grad_buffer(logits);
        for (std::size_t n = 0; n < rows; ++n) {
          for (std::size_t j = 0; j < c; ++j) {
            const double target = static_cast<int>(j) == lab[n] ? 1.0 : 0.0;
            gz[n * c + j] += scale * (saved[n * c + j] - target);
          }
        }
      });
  return CrossEntropy{out, std::move(probs)};
}

}  // namespace dcal
