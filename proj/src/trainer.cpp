#include "dcal/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "dcal/checkpoint.hpp"
#include "dcal/errors.hpp"

namespace dcal {

namespace {

using nlohmann::json;

constexpr double kPi = 3.14159265358979323846;

SeverityVector with_mode(SeverityVector sv, bool diverse) {
  sv.diverse = diverse;
  return sv;
}

void check_member_count(const SeverityVector& sv, std::size_t k, bool diverse, const char* what) {
  const bool per_member = diverse || sv.uniform == SeverityVector::Uniform::shuffle;
  if (!per_member) return;
  if (diverse ? sv.members() != k : sv.members() < k) {
    throw ValidationError(std::string(what) + " severity vector has " + std::to_string(sv.members()) +
                          " entries for " + std::to_string(k) + " members");
  }
}

json severity_to_json(const SeverityVector& sv) {
  return {{"values", sv.values},
          {"uniform", sv.uniform == SeverityVector::Uniform::shuffle ? "shuffle" : "constant"},
          {"constant", sv.constant}};
}

SeverityVector severity_from_json(const json& j, SeverityVector sv) {
  sv.values = j.value("values", sv.values);
  if (j.contains("uniform")) {
    const auto u = j.at("uniform").get<std::string>();
    if (u == "shuffle") {
      sv.uniform = SeverityVector::Uniform::shuffle;
    } else if (u == "constant") {
      sv.uniform = SeverityVector::Uniform::constant;
    } else {
      throw ValidationError("severity mode '" + u + "' is neither 'constant' nor 'shuffle'");
    }
  }
  sv.constant = j.value("constant", sv.constant);
  return sv;
}

json metrics_to_json(const Metrics& m) {
  return {{"error", m.error}, {"ece", m.ece}, {"ece_rms", m.ece_rms}, {"nll", m.nll}};
}

json grid_to_json(const CorruptionGrid& grid, const CorruptionSummary& summary) {
  json cells = json::object();
  for (const auto& [type, row] : grid.cells) {
    json r = json::object();
    for (const auto& [sev, v] : row) r[std::to_string(sev)] = v;
    cells[type] = r;
  }
  json per_type = json::object();
  for (const auto& [type, v] : summary.per_type) per_type[type] = v;
  return {{"overall", summary.overall}, {"per_type", per_type}, {"cells", cells}};
}

LabeledImageDataset load_cifar_files(const std::string& paths, std::size_t classes) {
  LabeledImageDataset out;
  std::stringstream list(paths);
  std::string path;
  bool first = true;
  while (std::getline(list, path, ',')) {
    if (path.empty()) continue;
    LabeledImageDataset part = load_cifar_binary(path, classes);
    if (first) {
      out = std::move(part);
      first = false;
      continue;
    }
    out.pixels.insert(out.pixels.end(), part.pixels.begin(), part.pixels.end());
    out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
  }
  if (first) throw ValidationError("no CIFAR files given");
  return out;
}

std::vector<Image> gather(const LabeledImageDataset& ds, std::span<const std::size_t> idx, std::vector<int>& labels) {
  std::vector<Image> images;
  images.reserve(idx.size());
  labels.clear();
  for (std::size_t i : idx) {
    images.push_back(ds.image(i));
    labels.push_back(ds.labels[i]);
  }
  return images;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string pct(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * v;
  return s.str();
}

}  // namespace

// ---- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  if (model.members < 1) throw ValidationError("ensemble size K must be at least 1");
  if (model.members > 8) throw ValidationError("ensemble size K above 8 is not supported");
  if (batch_size < 1) throw ValidationError("batch size must be at least 1");
  if (epochs < 1) throw ValidationError("epochs must be at least 1");
  if (eval_batch < 1) throw ValidationError("evaluation batch must be at least 1");
  if (!(lr0 > 0.0)) throw ValidationError("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) throw ValidationError("weight decay must be >= 0");
  if (!(clip_norm >= 0.0)) throw ValidationError("gradient clip norm must be >= 0");
  if (data.source != "synthetic" && data.source != "cifar") {
    throw ValidationError("dataset source '" + data.source + "' is neither 'synthetic' nor 'cifar'");
  }
  const std::size_t k = members();
  if (augmix.enabled) {
    augmix.policy.validate();
    if (augmix.chains < 1) throw ValidationError("augmix needs at least one chain");
    if (!(augmix.alpha > 0.0)) throw ValidationError("augmix Dirichlet alpha must be positive");
    const auto sv = with_mode(augmix.severities, diverse);
    sv.validate(true);
    check_member_count(sv, k, diverse, "augmix");
  }
  if (adversary.enabled) {
    AdvConfig a = adversary.config;
    a.severities = with_mode(a.severities, diverse);
    a.validate();
    check_member_count(a.severities, k, diverse, "adversary");
  }
  if (depth.enabled) {
    const auto sv = with_mode(depth.severities, diverse);
    sv.validate(false);
    for (double v : sv.values) {
      if (v > 1.0) throw ValidationError("stochastic-depth drop probability above 1");
    }
    if (!diverse && sv.uniform == SeverityVector::Uniform::constant && sv.constant > 1.0) {
      throw ValidationError("stochastic-depth drop probability above 1");
    }
    check_member_count(sv, k, diverse, "stochastic depth");
  }
}

json config_to_json(const TrainConfig& c) {
  return {
      {"preset", c.preset},
      {"data",
       {{"source", c.data.source},
        {"train_size", c.data.train_size},
        {"test_size", c.data.test_size},
        {"image_size", c.data.image_size},
        {"classes", c.data.classes},
        {"train_path", c.data.train_path},
        {"test_path", c.data.test_path},
        {"n_val", c.data.n_val},
        {"seed", c.data.seed}}},
      {"model", model_spec_to_json(c.model)},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"lr0", c.lr0},
      {"momentum", c.momentum},
      {"weight_decay", c.weight_decay},
      {"clip_norm", c.clip_norm},
      {"decay_adapters", c.decay_adapters},
      {"train_adapters", c.train_adapters},
      {"adapters_at_ones", c.adapters_at_ones},
      {"flip_crop", c.flip_crop},
      {"augmix",
       {{"enabled", c.augmix.enabled},
        {"mix", c.augmix.policy.mode == MixPolicy::Mode::beta ? "beta" : "bernoulli"},
        {"mix_param", c.augmix.policy.param},
        {"severities", severity_to_json(c.augmix.severities)},
        {"chains", c.augmix.chains},
        {"alpha", c.augmix.alpha}}},
      {"adversary",
       {{"enabled", c.adversary.enabled},
        {"p", c.adversary.config.p},
        {"severities", severity_to_json(c.adversary.config.severities)}}},
      {"depth", {{"enabled", c.depth.enabled}, {"severities", severity_to_json(c.depth.severities)}}},
      {"diverse", c.diverse},
      {"seed", c.seed},
      {"eval_batch", c.eval_batch},
      {"bins", c.bins},
      {"corruptions",
       {{"enabled", c.corruptions.enabled},
        {"table_path", c.corruptions.table_path},
        {"cache_dir", c.corruptions.cache_dir},
        {"seed", c.corruptions.seed},
        {"sum_intensities", c.corruptions.sum_intensities}}},
  };
}

TrainConfig config_from_json(const json& j, const TrainConfig& base) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  TrainConfig c = base;
  try {
    c.preset = j.value("preset", c.preset);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.data.source = d.value("source", c.data.source);
      c.data.train_size = d.value("train_size", c.data.train_size);
      c.data.test_size = d.value("test_size", c.data.test_size);
      c.data.image_size = d.value("image_size", c.data.image_size);
      c.data.classes = d.value("classes", c.data.classes);
      c.data.train_path = d.value("train_path", c.data.train_path);
      c.data.test_path = d.value("test_path", c.data.test_path);
      c.data.n_val = d.value("n_val", c.data.n_val);
      c.data.seed = d.value("seed", c.data.seed);
    }
    if (j.contains("model")) {
      json merged = model_spec_to_json(c.model);
      merged.update(j.at("model"));
      c.model = model_spec_from_json(merged);
    }
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr0 = j.value("lr0", c.lr0);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.decay_adapters = j.value("decay_adapters", c.decay_adapters);
    c.train_adapters = j.value("train_adapters", c.train_adapters);
    c.adapters_at_ones = j.value("adapters_at_ones", c.adapters_at_ones);
    c.flip_crop = j.value("flip_crop", c.flip_crop);
    if (j.contains("augmix")) {
      const auto& a = j.at("augmix");
      c.augmix.enabled = a.value("enabled", c.augmix.enabled);
      const std::string mix =
          a.value("mix", std::string(c.augmix.policy.mode == MixPolicy::Mode::beta ? "beta" : "bernoulli"));
      if (mix != "beta" && mix != "bernoulli") throw ValidationError("augmix mix '" + mix + "' is not beta/bernoulli");
      c.augmix.policy.mode = mix == "beta" ? MixPolicy::Mode::beta : MixPolicy::Mode::bernoulli;
      c.augmix.policy.param = a.value("mix_param", c.augmix.policy.param);
      if (a.contains("severities")) c.augmix.severities = severity_from_json(a.at("severities"), c.augmix.severities);
      c.augmix.chains = a.value("chains", c.augmix.chains);
      c.augmix.alpha = a.value("alpha", c.augmix.alpha);
    }
    if (j.contains("adversary")) {
      const auto& a = j.at("adversary");
      c.adversary.enabled = a.value("enabled", c.adversary.enabled);
      c.adversary.config.p = a.value("p", c.adversary.config.p);
      if (a.contains("severities")) {
        c.adversary.config.severities = severity_from_json(a.at("severities"), c.adversary.config.severities);
      }
    }
    if (j.contains("depth")) {
      const auto& a = j.at("depth");
      c.depth.enabled = a.value("enabled", c.depth.enabled);
      if (a.contains("severities")) c.depth.severities = severity_from_json(a.at("severities"), c.depth.severities);
    }
    c.diverse = j.value("diverse", c.diverse);
    c.seed = j.value("seed", c.seed);
    c.eval_batch = j.value("eval_batch", c.eval_batch);
    c.bins = j.value("bins", c.bins);
    if (j.contains("corruptions")) {
      const auto& a = j.at("corruptions");
      c.corruptions.enabled = a.value("enabled", c.corruptions.enabled);
      c.corruptions.table_path = a.value("table_path", c.corruptions.table_path);
      c.corruptions.cache_dir = a.value("cache_dir", c.corruptions.cache_dir);
      c.corruptions.seed = a.value("seed", c.corruptions.seed);
      c.corruptions.sum_intensities = a.value("sum_intensities", c.corruptions.sum_intensities);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return c;
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"vanilla", "be",         "be-sd",      "be-adv",      "be-adv-p1",
                                                 "am-beta", "am-bern",    "am-bern-p1", "am-bern-adv"};
  return names;
}

TrainConfig preset_config(const std::string& name, bool diverse, bool ensemble) {
  TrainConfig c;
  c.preset = name;
  if (name == "vanilla") {
    ensemble = false;
  } else if (name == "be") {
  } else if (name == "be-sd") {
    c.depth.enabled = true;
  } else if (name == "be-adv") {
    c.adversary.enabled = true;
    c.adversary.config.p = 0.875;
  } else if (name == "be-adv-p1") {
    c.adversary.enabled = true;
    c.adversary.config.p = 1.0;
  } else if (name == "am-beta") {
    c.augmix.enabled = true;
    c.augmix.policy = MixPolicy::beta(1.0);
  } else if (name == "am-bern") {
    c.augmix.enabled = true;
    c.augmix.policy = MixPolicy::bernoulli(0.875);
  } else if (name == "am-bern-p1") {
    c.augmix.enabled = true;
    c.augmix.policy = MixPolicy::bernoulli(1.0);
  } else if (name == "am-bern-adv") {
    c.augmix.enabled = true;
    c.augmix.policy = MixPolicy::bernoulli(0.875);
    c.adversary.enabled = true;
    c.adversary.config.p = 0.875;
  } else {
    throw ValidationError("unknown preset '" + name + "'");
  }
  c.diverse = diverse;
  if (!ensemble) {
    c.model.ensemble = false;
    c.model.members = 1;
    c.diverse = false;
    c.preset += "-single";
  } else if (!diverse) {
    c.preset += "-not-diverse";
  }
  return c;
}

// ---- optimisation -----------------------------------------------------------

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) throw ValidationError("cosine schedule needs at least one step");
  if (step > total_steps) {
    throw ValidationError("step " + std::to_string(step) + " beyond schedule of " + std::to_string(total_steps));
  }
  return 0.5 * lr0 * (1.0 + std::cos(kPi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

void sgd_nesterov_update(std::span<double> param, std::span<const double> grad, std::span<double> velocity,
                         double lr, double momentum, double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw DimensionError("sgd update: parameter " + std::to_string(param.size()) + ", gradient " +
                         std::to_string(grad.size()) + ", velocity " + std::to_string(velocity.size()));
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    if (!std::isfinite(grad[i])) throw NumericError("sgd update: non-finite gradient at element " + std::to_string(i));
    const double g = grad[i] + weight_decay * param[i];
    velocity[i] = momentum * velocity[i] + g;
    param[i] -= lr * (g + momentum * velocity[i]);
  }
}

TrainState init_train_state(const TrainConfig& cfg, const Normalizer& normalizer, std::size_t total_steps) {
  TrainState st;
  Rng init = Rng::stream(cfg.seed, "init");
  st.model = ResidualClassifier(cfg.model, init);
  if (cfg.adapters_at_ones) st.model.set_adapters_to_ones();
  for (const auto& p : st.model.parameters()) st.velocity.emplace_back(p.tensor->numel(), 0.0);
  st.normalizer = normalizer;
  st.total_steps = total_steps;
  return st;
}

// ---- one step -----------------------------------------------------------------

PreparedBatch prepare_batch(const TrainState& state, const TrainConfig& cfg, std::span<const Image> images,
                            std::span<const int> labels) {
  const std::size_t batch = images.size();
  if (batch == 0) throw ValidationError("empty training batch");
  if (labels.size() != batch) throw ValidationError("training batch: images and labels differ in count");
  const std::size_t k = state.model.members();
  const std::size_t rows = batch * k;
  const std::size_t H = images[0].height, W = images[0].width, C = images[0].channels;
  for (const auto& img : images) {
    if (img.height != H || img.width != W || img.channels != C) throw DimensionError("training batch mixes image shapes");
  }
  const std::size_t step = state.step;
  const std::uint64_t seed = cfg.seed;

  PreparedBatch pb;
  pb.members = replicated_members(batch, k);
  pb.labels.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) pb.labels[r] = labels[r % batch];

  // flip/crop, one decision per original shared by its K copies
  std::vector<Image> base(images.begin(), images.end());
  if (cfg.flip_crop) {
    const Rng fc = Rng::stream(seed, "flip-crop");
    for (std::size_t n = 0; n < batch; ++n) {
      Rng rng = fc.derive(step, n);
      base[n] = apply_flip_crop(base[n], sample_flip_crop(rng));
    }
  }

  if (cfg.augmix.enabled) {
    const auto sv = with_mode(cfg.augmix.severities, cfg.diverse);
    const auto sev = member_severities(sv, Rng::stream(seed, "augmix-order").derive(step));
    pb.augmix_severity.assign(sev.begin(), sev.begin() + static_cast<std::ptrdiff_t>(k));
  }

  pb.input = Tensor({rows, C, H, W});
  const std::size_t row_size = C * H * W;
  const Rng aug = Rng::stream(seed, "augmix");
  AugmentOptions opts;
  opts.chains = cfg.augmix.chains;
  opts.alpha = cfg.augmix.alpha;
  auto xs = pb.input.values();
  const auto total_rows = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(dynamic, 8)
  for (std::ptrdiff_t r = 0; r < total_rows; ++r) {
    const auto row = static_cast<std::size_t>(r);
    const std::size_t n = row % batch, member = row / batch;
    auto out = xs.subspan(row * row_size, row_size);
    if (cfg.augmix.enabled) {
      Rng rng = aug.derive(step, row);
      const Image mixed = augment_and_mix(base[n], static_cast<int>(pb.augmix_severity[member]), cfg.augmix.policy,
                                          rng, opts);
      state.normalizer.normalize_into(mixed, out);
    } else {
      state.normalizer.normalize_into(base[n], out);
    }
  }

  if (cfg.adversary.enabled) {
    AdvConfig a = cfg.adversary.config;
    a.severities = with_mode(a.severities, cfg.diverse);
    const Rng order = Rng::stream(seed, "adversary-order").derive(step);
    const auto sev = member_severities(a.severities, order);
    pb.adversary_severity.assign(sev.begin(), sev.begin() + static_cast<std::ptrdiff_t>(k));
    InputRange range;
    for (std::size_t c = 0; c < C; ++c) {
      range.lower.push_back(state.normalizer.lower(c));
      range.upper.push_back(state.normalizer.upper(c));
    }
    pb.input = perturb_replicated_batch(pb.input, pb.labels, state.model, a, order,
                                        Rng::stream(seed, "adversary").derive(step), range, step)
                   .x_adv;
  }

  if (cfg.depth.enabled) {
    const auto sv = with_mode(cfg.depth.severities, cfg.diverse);
    const auto sev = member_severities(sv, Rng::stream(seed, "depth-order").derive(step));
    pb.depth_severity.assign(sev.begin(), sev.begin() + static_cast<std::ptrdiff_t>(k));
    const Rng depth = Rng::stream(seed, "depth");
    std::vector<DepthMask> parts;
    for (std::size_t m = 0; m < k; ++m) {
      Rng rng = depth.derive(step, m);
      parts.push_back(sample_depth_mask(pb.depth_severity[m], state.model.blocks.size(), batch, rng));
    }
    pb.depth = concat_masks(parts);
  }
  return pb;
}

StepResult train_step(TrainState& state, const TrainConfig& cfg, std::span<const Image> images,
                      std::span<const int> labels) {
  if (state.step >= state.total_steps) {
    throw UsageError("train_step beyond the schedule of " + std::to_string(state.total_steps) + " steps");
  }
  PreparedBatch pb = prepare_batch(state, cfg, images, labels);

  Tape tape;
  Var x = tape.leaf(std::move(pb.input));
  ForwardOptions opts;
  opts.train = true;
  opts.depth = cfg.depth.enabled ? &pb.depth : nullptr;
  opts.params_require_grad = true;
  const ForwardResult fr = state.model.forward(tape, x, pb.members, opts);
  const CrossEntropy ce = softmax_cross_entropy(fr.logits, pb.labels);
  const double loss = ce.loss.value().item();
  if (!std::isfinite(loss)) throw NumericError("non-finite training loss at step " + std::to_string(state.step));
  tape.backward(ce.loss);

  StepResult result;
  result.loss = loss;
  result.lr = cosine_lr(state.step, state.total_steps, cfg.lr0);
  auto params = state.model.parameters();
  std::vector<Tensor> grads(params.size());
  double sq_norm = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].kind == ParamKind::adapter && !cfg.train_adapters) continue;
    grads[i] = tape.grad(fr.params[i]);
    if (!grads[i].all_finite()) {
      throw NumericError("non-finite gradient for " + params[i].name + " at step " + std::to_string(state.step));
    }
    for (double g : grads[i].values()) sq_norm += g * g;
  }
  result.grad_norm = std::sqrt(sq_norm);
  if (cfg.clip_norm > 0.0 && result.grad_norm > cfg.clip_norm) {
    const double shrink = cfg.clip_norm / result.grad_norm;
    for (auto& g : grads) {
      for (auto& v : g.values()) v *= shrink;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool adapter = params[i].kind == ParamKind::adapter;
    if (adapter && !cfg.train_adapters) continue;
    const double wd = adapter && !cfg.decay_adapters ? 0.0 : cfg.weight_decay;
    sgd_nesterov_update(params[i].tensor->values(), grads[i].values(), state.velocity[i], result.lr, cfg.momentum, wd);
  }
  ++state.step;
  return result;
}

// ---- evaluation ---------------------------------------------------------------

Evaluation evaluate(const ResidualClassifier& model, const Normalizer& normalizer, const LabeledImageDataset& ds,
                    std::size_t batch, std::size_t bins) {
  if (ds.size() == 0) throw ValidationError("cannot evaluate on an empty dataset");
  if (batch == 0) throw ValidationError("evaluation batch must be at least 1");
  if (ds.channels != model.spec().in_channels) {
    throw ValidationError("dataset has " + std::to_string(ds.channels) + " channels, model expects " +
                          std::to_string(model.spec().in_channels));
  }
  if (ds.classes != model.spec().classes) {
    throw ValidationError("dataset has " + std::to_string(ds.classes) + " classes, model predicts " +
                          std::to_string(model.spec().classes));
  }
  const std::size_t k = model.members(), classes = model.spec().classes;
  const std::size_t row_size = ds.image_size();
  std::vector<std::vector<double>> member_probs(k, std::vector<double>(ds.size() * classes));
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t b = std::min(batch, ds.size() - start);
    Tensor input({b * k, ds.channels, ds.height, ds.width});
    auto xs = input.values();
    for (std::size_t n = 0; n < b; ++n) {
      normalizer.normalize_into(ds.image(start + n), xs.subspan(n * row_size, row_size));
    }
    for (std::size_t m = 1; m < k; ++m) {
      std::copy_n(xs.begin(), b * row_size, xs.begin() + static_cast<std::ptrdiff_t>(m * b * row_size));
    }
    const Tensor probs = softmax_rows(model.logits(input, replicated_members(b, k)));
    for (std::size_t m = 0; m < k; ++m) {
      std::copy_n(probs.data() + m * b * classes, b * classes, member_probs[m].begin() +
                                                                  static_cast<std::ptrdiff_t>(start * classes));
    }
  }
  Evaluation ev;
  for (auto& p : member_probs) ev.members.emplace_back(classes, std::move(p), ds.labels);
  ev.ensemble = ensemble_average(ev.members);
  ev.metrics = compute_metrics(ev.ensemble, bins);
  return ev;
}

// ---- experiments ----------------------------------------------------------------

ExperimentInputs prepare_inputs(const TrainConfig& cfg) {
  ExperimentInputs in;
  LabeledImageDataset train;
  if (cfg.data.source == "synthetic") {
    train = synth_dataset(cfg.data.train_size + cfg.data.n_val, cfg.data.classes, cfg.data.image_size, cfg.data.seed);
    in.test = synth_dataset(cfg.data.test_size, cfg.data.classes, cfg.data.image_size, mix64(cfg.data.seed + 1));
    train.name = "synthetic-train";
    in.test.name = "synthetic-test";
  } else if (cfg.data.source == "cifar") {
    train = load_cifar_files(cfg.data.train_path, cfg.data.classes);
    in.test = load_cifar_files(cfg.data.test_path, cfg.data.classes);
  } else {
    throw ValidationError("dataset source '" + cfg.data.source + "' is neither 'synthetic' nor 'cifar'");
  }
  if (cfg.data.n_val > 0) {
    auto [tr, val] = split_train_val(train, cfg.data.n_val, cfg.data.seed);
    in.train = std::move(tr);
    in.val = std::move(val);
  } else {
    in.train = std::move(train);
  }
  if (cfg.corruptions.enabled) {
    const std::filesystem::path cache = cfg.corruptions.cache_dir;
    if (!cache.empty() && std::filesystem::is_directory(cache) && !std::filesystem::is_empty(cache)) {
      in.grid = load_grid(cache);
    } else {
      const CorruptionTable table = cfg.corruptions.table_path.empty()
                                        ? CorruptionTable::defaults()
                                        : CorruptionTable::load(cfg.corruptions.table_path);
      in.grid = build_corruption_grid(in.test, table, cfg.corruptions.seed);
      if (!cache.empty()) save_grid(cache, in.grid);
    }
  }
  return in;
}

RunReport evaluate_report(const ResidualClassifier& model, const Normalizer& normalizer,
                          const LabeledImageDataset& test, const std::vector<GridCell>& grid,
                          const TrainConfig& cfg) {
  RunReport report;
  report.config = cfg;
  const Evaluation ev = evaluate(model, normalizer, test, cfg.eval_batch, cfg.bins);
  report.test = ev.metrics;
  for (const auto& m : ev.members) report.test_members.push_back(compute_metrics(m, cfg.bins));
  if (!grid.empty()) {
    CorruptionReport cr;
    for (const auto& cell : grid) {
      const Metrics m = evaluate(model, normalizer, cell.data, cfg.eval_batch, cfg.bins).metrics;
      cr.error.set(cell.type, cell.severity, m.error);
      cr.ece.set(cell.type, cell.severity, m.ece);
      cr.ece_rms.set(cell.type, cell.severity, m.ece_rms);
      cr.nll.set(cell.type, cell.severity, m.nll);
    }
    const bool sum = cfg.corruptions.sum_intensities;
    cr.error_summary = corruption_summary(cr.error, sum);
    cr.ece_summary = corruption_summary(cr.ece, sum);
    cr.ece_rms_summary = corruption_summary(cr.ece_rms, sum);
    cr.nll_summary = corruption_summary(cr.nll, sum);
    report.corruption = std::move(cr);
  }
  return report;
}

RunReport run_experiment(const TrainConfig& cfg_in, const ExperimentInputs& inputs, const RunOutputs& outputs,
                         const ProgressFn& progress, TrainState* final_state) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig cfg = cfg_in;
  const LabeledImageDataset& train = inputs.train;
  if (train.size() == 0) throw ValidationError("training set is empty");
  cfg.model.in_channels = train.channels;
  cfg.model.image_size = train.height;
  cfg.model.classes = train.classes;
  cfg.validate();

  RunReport report;
  report.config = cfg;
  if (!outputs.dir.empty()) std::filesystem::create_directories(outputs.dir);
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  try {
    const Normalizer normalizer = Normalizer::fit(train);
    const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    TrainState state = init_train_state(cfg, normalizer, steps_per_epoch * cfg.epochs);

    std::vector<std::size_t> order(train.size());
    std::vector<int> labels;
    const Rng data_order = Rng::stream(cfg.seed, "data-order");
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng = data_order.derive(epoch);
      std::shuffle(order.begin(), order.end(), rng);
      EpochRecord rec;
      rec.epoch = epoch + 1;
      double loss_sum = 0.0;
      for (std::size_t s = 0; s < steps_per_epoch; ++s) {
        const std::size_t lo = s * cfg.batch_size, hi = std::min(train.size(), lo + cfg.batch_size);
        const auto images = gather(train, std::span(order).subspan(lo, hi - lo), labels);
        const StepResult r = train_step(state, cfg, images, labels);
        loss_sum += r.loss;
        rec.lr = r.lr;
      }
      rec.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
      if (inputs.val.size() > 0) {
        rec.val = evaluate(state.model, normalizer, inputs.val, cfg.eval_batch, cfg.bins).metrics;
      }
      report.history.push_back(rec);
      if (progress) progress(rec);
    }

    if (inputs.val.size() > 0) report.val = report.history.back().val;
    RunReport eval = evaluate_report(state.model, normalizer, inputs.test, inputs.grid, cfg);
    report.test = eval.test;
    report.test_members = std::move(eval.test_members);
    report.corruption = std::move(eval.corruption);
    report.wall_seconds = elapsed();

    if (!outputs.dir.empty()) {
      const auto& dir = outputs.dir;
      if (outputs.predictions) {
        const Evaluation test_ev = evaluate(state.model, normalizer, inputs.test, cfg.eval_batch, cfg.bins);
        write_predictions_csv(dir / "predictions_test.csv", test_ev.ensemble);
        std::ofstream rel(dir / "reliability_test.csv");
        write_reliability_csv(rel, reliability_table(test_ev.ensemble, cfg.bins));
        if (inputs.val.size() > 0) {
          const Evaluation val_ev = evaluate(state.model, normalizer, inputs.val, cfg.eval_batch, cfg.bins);
          write_predictions_csv(dir / "predictions_val.csv", val_ev.ensemble);
        }
      }
      if (outputs.checkpoint) {
        json extra = {{"normalizer", {{"mean", normalizer.mean}, {"stddev", normalizer.stddev}}},
                      {"config", config_to_json(cfg)}};
        save_checkpoint(dir / "checkpoint.json", state.model, extra);
      }
      write_text(dir / "report.json", report_to_json(report).dump(2) + "\n");
      write_text(dir / "report.csv", report_to_csv(report));
    }
    if (final_state) *final_state = std::move(state);
  } catch (const std::exception& e) {
    report.status = std::string("failed: ") + e.what();
    report.wall_seconds = elapsed();
    if (!outputs.dir.empty()) {
      try {
        write_text(outputs.dir / "report.json", report_to_json(report).dump(2) + "\n");
      } catch (...) {
      }
    }
    throw;
  }
  return report;
}

RunReport run_experiment(const TrainConfig& cfg, const RunOutputs& outputs, const ProgressFn& progress) {
  cfg.validate();
  return run_experiment(cfg, prepare_inputs(cfg), outputs, progress);
}

// ---- reports ----------------------------------------------------------------------

json report_to_json(const RunReport& r) {
  json history = json::array();
  for (const auto& h : r.history) {
    json e = {{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"lr", h.lr}};
    if (h.val) e["val"] = metrics_to_json(*h.val);
    history.push_back(e);
  }
  json splits = {{"test", metrics_to_json(r.test)}};
  if (r.val) splits["val"] = metrics_to_json(*r.val);
  json members = json::array();
  for (const auto& m : r.test_members) members.push_back(metrics_to_json(m));
  json doc = {{"status", r.status},
              {"seed", r.config.seed},
              {"preset", r.config.preset},
              {"config", config_to_json(r.config)},
              {"wall_seconds", r.wall_seconds},
              {"metrics", splits},
              {"test_members", members},
              {"history", history}};
  if (r.corruption) {
    const auto& c = *r.corruption;
    doc["corruption"] = {{"aggregation", r.config.corruptions.sum_intensities ? "sum" : "mean"},
                         {"error", grid_to_json(c.error, c.error_summary)},
                         {"ece", grid_to_json(c.ece, c.ece_summary)},
                         {"ece_rms", grid_to_json(c.ece_rms, c.ece_rms_summary)},
                         {"nll", grid_to_json(c.nll, c.nll_summary)}};
  }
  return doc;
}

std::string report_to_csv(const RunReport& r) {
  std::ostringstream out;
  out << std::setprecision(17) << "split,metric,value\n";
  auto emit = [&](const std::string& split, const Metrics& m) {
    out << split << ",error," << 100.0 * m.error << '\n'
        << split << ",ece," << 100.0 * m.ece << '\n'
        << split << ",ece_rms," << 100.0 * m.ece_rms << '\n'
        << split << ",nll," << m.nll << '\n';
  };
  if (r.val) emit("val", *r.val);
  emit("test", r.test);
  if (r.corruption) {
    const auto& c = *r.corruption;
    emit("corrupted", {c.error_summary.overall, c.ece_summary.overall, c.ece_rms_summary.overall,
                       c.nll_summary.overall});
    for (std::size_t t = 0; t < c.error_summary.per_type.size(); ++t) {
      emit("corrupted:" + c.error_summary.per_type[t].first,
           {c.error_summary.per_type[t].second, c.ece_summary.per_type[t].second,
            c.ece_rms_summary.per_type[t].second, c.nll_summary.per_type[t].second});
    }
  }
  return out.str();
}

std::string report_table(const RunReport& r) {
  std::ostringstream out;
  out << "preset " << r.config.preset << "  seed " << r.config.seed << "  K=" << r.config.members() << "  "
      << std::fixed << std::setprecision(1) << r.wall_seconds << " s\n";
  out << std::left << std::setw(26) << "split" << std::right << std::setw(9) << "Err." << std::setw(9) << "ECE"
      << std::setw(9) << "ECE-rms" << std::setw(9) << "NLL" << '\n';
  auto row = [&](const std::string& name, const Metrics& m) {
    out << std::left << std::setw(26) << name << std::right << std::setw(9) << pct(m.error) << std::setw(9)
        << pct(m.ece) << std::setw(9) << pct(m.ece_rms) << std::setw(9) << std::fixed << std::setprecision(4)
        << m.nll << '\n';
  };
  if (r.val) row("val", *r.val);
  row("test", r.test);
  if (r.corruption) {
    const auto& c = *r.corruption;
    row("corrupted", {c.error_summary.overall, c.ece_summary.overall, c.ece_rms_summary.overall,
                      c.nll_summary.overall});
    for (std::size_t t = 0; t < c.error_summary.per_type.size(); ++t) {
      row("  " + c.error_summary.per_type[t].first,
          {c.error_summary.per_type[t].second, c.ece_summary.per_type[t].second,
           c.ece_rms_summary.per_type[t].second, c.nll_summary.per_type[t].second});
    }
  }
  return out.str();
}

}  // namespace dcal
