#include "dcal/model.hpp"

#include <cmath>
#include <string>

#include "dcal/errors.hpp"

namespace dcal {

namespace {

EnsembleConv conv_shell(std::size_t in, std::size_t out, std::size_t k, bool adapted) {
  EnsembleConv c;
  c.kernel = Tensor({out, in, 3, 3});
  if (adapted) {
    c.r = Tensor({k, out}, 1.0);
    c.s = Tensor({k, in}, 1.0);
  }
  c.bias = Tensor({k, out});
  return c;
}

EnsembleLinear linear_shell(std::size_t in, std::size_t out, std::size_t k, bool adapted) {
  EnsembleLinear l;
  l.weight = Tensor({out, in});
  if (adapted) {
    l.r = Tensor({k, out}, 1.0);
    l.s = Tensor({k, in}, 1.0);
  }
  l.bias = Tensor({k, out});
  return l;
}

void fill_normal(Tensor& t, double stddev, Rng& rng) {
  for (auto& v : t.values()) v = rng.normal(0.0, stddev);
}

ConvVars bind(Tape& tape, const EnsembleConv& c, bool rg, std::vector<Var>& out) {
  auto leaf = [&](const Tensor& t) {
    Tensor copy = t;
    copy.set_requires_grad(rg);
    Var v = tape.leaf(std::move(copy));
    out.push_back(v);
    return v;
  };
  ConvVars v;
  v.kernel = leaf(c.kernel);
  v.adapted = c.adapted();
  if (v.adapted) {
    v.r = leaf(c.r);
    v.s = leaf(c.s);
  }
  v.bias = leaf(c.bias);
  return v;
}

LinearVars bind(Tape& tape, const EnsembleLinear& l, bool rg, std::vector<Var>& out) {
  auto leaf = [&](const Tensor& t) {
    Tensor copy = t;
    copy.set_requires_grad(rg);
    Var v = tape.leaf(std::move(copy));
    out.push_back(v);
    return v;
  };
  LinearVars v;
  v.weight = leaf(l.weight);
  v.adapted = l.adapted();
  if (v.adapted) {
    v.r = leaf(l.r);
    v.s = leaf(l.s);
  }
  v.bias = leaf(l.bias);
  return v;
}

template <typename Fn>
void visit_params(EnsembleConv& stem, std::vector<ResidualBlock>& blocks, EnsembleLinear& head, Fn&& emit) {
  auto conv = [&](const std::string& name, auto& c) {
    emit(name + ".kernel", c.kernel, ParamKind::shared);
    if (c.adapted()) {
      emit(name + ".r", c.r, ParamKind::adapter);
      emit(name + ".s", c.s, ParamKind::adapter);
    }
    emit(name + ".bias", c.bias, ParamKind::bias);
  };
  conv("stem", stem);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    conv("block" + std::to_string(b) + ".first", blocks[b].first);
    conv("block" + std::to_string(b) + ".second", blocks[b].second);
  }
  emit("head.weight", head.weight, ParamKind::shared);
  if (head.adapted()) {
    emit("head.r", head.r, ParamKind::adapter);
    emit("head.s", head.s, ParamKind::adapter);
  }
  emit("head.bias", head.bias, ParamKind::bias);
}

}  // namespace

ResidualClassifier make_model_shell(const ModelSpec& spec) {
  if (spec.members < 1) throw ValidationError("ensemble size must be at least 1");
  if (spec.blocks < 1 || spec.width < 1 || spec.classes < 2 || spec.in_channels < 1) {
    throw ValidationError("model spec has an empty dimension");
  }
  if (spec.stem_pool && spec.image_size % 2 != 0) {
    throw ValidationError("stem pooling needs an even image size");
  }
  ResidualClassifier m;
  const std::size_t k = spec.ensemble_size();
  m.stem = conv_shell(spec.in_channels, spec.width, k, spec.ensemble);
  m.blocks.resize(spec.blocks);
  for (auto& b : m.blocks) {
    b.first = conv_shell(spec.width, spec.width, k, spec.ensemble);
    b.second = conv_shell(spec.width, spec.width, k, spec.ensemble);
  }
  m.head = linear_shell(spec.width, spec.classes, k, spec.ensemble);
  m.spec_ = spec;
  return m;
}

ResidualClassifier::ResidualClassifier(const ModelSpec& spec, Rng& init_rng) {
  *this = make_model_shell(spec);
  const double w = static_cast<double>(spec.width);
  // Shared weights from the init stream, adapters from its own child stream.
  // There is no normalisation layer, so every residual branch starts as the
  // identity (second conv zero) and the head starts at zero; each block then
  // grows from a well-scaled signal.
  fill_normal(stem.kernel, std::sqrt(2.0 / (9.0 * static_cast<double>(spec.in_channels))), init_rng);
  for (auto& b : blocks) fill_normal(b.first.kernel, std::sqrt(2.0 / (9.0 * w)), init_rng);
  if (spec.ensemble) {
    Rng adapter_rng = init_rng.derive("adapters");
    const std::size_t k = spec.members;
    auto init_conv = [&](EnsembleConv& c) {
      auto p = init_ensemble_params(k, c.kernel.dim(0), c.kernel.dim(1), adapter_rng);
      c.r = std::move(p.r);
      c.s = std::move(p.s);
    };
    init_conv(stem);
    for (auto& b : blocks) {
      init_conv(b.first);
      init_conv(b.second);
    }
    auto p = init_ensemble_params(k, head.weight.dim(0), head.weight.dim(1), adapter_rng);
    head.r = std::move(p.r);
    head.s = std::move(p.s);
  }
}

ForwardResult ResidualClassifier::forward(Tape& tape, Var input, std::span<const int> members,
                                          const ForwardOptions& options) const {
  const Tensor& x = input.value();
  if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
    throw DimensionError("model input " + shape_string(x.shape()) + " does not have " +
                         std::to_string(spec_.in_channels) + " channels in NCHW layout");
  }
  const std::size_t rows = x.dim(0);
  if (members.size() != rows) {
    throw ValidationError("model forward: " + std::to_string(members.size()) + " member indices for " +
                          std::to_string(rows) + " rows");
  }
  const DepthMask* mask = options.train ? options.depth : nullptr;
  if (mask && (mask->rows != rows || mask->blocks != blocks.size())) {
    throw ValidationError("depth mask is " + std::to_string(mask->rows) + "x" + std::to_string(mask->blocks) +
                          ", model needs " + std::to_string(rows) + "x" + std::to_string(blocks.size()));
  }

  ForwardResult result;
  const bool rg = options.params_require_grad;
  const ConvVars stem_v = bind(tape, stem, rg, result.params);
  std::vector<std::pair<ConvVars, ConvVars>> block_v;
  block_v.reserve(blocks.size());
  for (const auto& b : blocks) {
    ConvVars first = bind(tape, b.first, rg, result.params);
    ConvVars second = bind(tape, b.second, rg, result.params);
    block_v.emplace_back(first, second);
  }
  const LinearVars head_v = bind(tape, head, rg, result.params);

  Var h = be_conv_forward(input, stem_v, members, true);
  if (spec_.stem_pool) h = avg_pool2(h);
  std::vector<double> factors(rows);
  for (std::size_t b = 0; b < block_v.size(); ++b) {
    Var branch = be_conv_forward(h, block_v[b].first, members, true);
    branch = be_conv_forward(branch, block_v[b].second, members);
    if (mask) {
      for (std::size_t n = 0; n < rows; ++n) factors[n] = mask->factor(n, b);
      branch = scale_rows(branch, factors);
    }
    h = add(h, branch);
  }
  result.logits = be_dense_forward(global_avg_pool(h), head_v, members);
  return result;
}

Tensor ResidualClassifier::logits(const Tensor& input, std::span<const int> members) const {
  Tape tape;
  Tensor x = input;
  x.set_requires_grad(false);
  return forward(tape, tape.leaf(std::move(x)), members).logits.value();
}

std::vector<ResidualClassifier::ParamRef> ResidualClassifier::parameters() {
  std::vector<ParamRef> out;
  visit_params(stem, blocks, head, [&](std::string name, Tensor& t, ParamKind kind) {
    out.push_back(ParamRef{std::move(name), &t, kind});
  });
  return out;
}

std::vector<ResidualClassifier::ConstParamRef> ResidualClassifier::parameters() const {
  auto& self = const_cast<ResidualClassifier&>(*this);
  std::vector<ConstParamRef> out;
  for (const auto& p : self.parameters()) out.push_back(ConstParamRef{p.name, p.tensor, p.kind});
  return out;
}

std::size_t ResidualClassifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor->numel();
  return n;
}

void ResidualClassifier::set_adapters_to_ones() {
  for (auto& p : parameters()) {
    if (p.kind == ParamKind::adapter) {
      for (auto& v : p.tensor->values()) v = 1.0;
    }
  }
}

}  // namespace dcal
