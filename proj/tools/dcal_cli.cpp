// dcal: train, evaluate and inspect diverse BatchEnsemble classifiers.

#include <malloc.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <png.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "dcal/checkpoint.hpp"
#include "dcal/corruptions.hpp"
#include "dcal/errors.hpp"
#include "dcal/metrics.hpp"
#include "dcal/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct DataFlags {
  std::optional<std::string> source;
  std::optional<std::size_t> train_size, test_size, image_size, classes, n_val;
  std::optional<std::string> train_path, test_path;
  std::optional<std::uint64_t> data_seed;

  void add(CLI::App& app) {
    app.add_option("--data", source, "synthetic or cifar")->check(CLI::IsMember({"synthetic", "cifar"}));
    app.add_option("--train-size", train_size, "synthetic training images");
    app.add_option("--test-size", test_size, "synthetic test images");
    app.add_option("--image-size", image_size, "synthetic image side");
    app.add_option("--classes", classes, "class count");
    app.add_option("--n-val", n_val, "images held out of training for validation");
    app.add_option("--train-path", train_path, "CIFAR binary file(s), comma separated");
    app.add_option("--test-path", test_path, "CIFAR binary test file(s), comma separated");
    app.add_option("--data-seed", data_seed, "seed of the synthetic data and the split");
  }

  void apply(dcal::DatasetSpec& d) const {
    if (source) d.source = *source;
    if (train_size) d.train_size = *train_size;
    if (test_size) d.test_size = *test_size;
    if (image_size) d.image_size = *image_size;
    if (classes) d.classes = *classes;
    if (n_val) d.n_val = *n_val;
    if (train_path) d.train_path = *train_path;
    if (test_path) d.test_path = *test_path;
    if (data_seed) d.seed = *data_seed;
  }
};

struct GridFlags {
  bool no_corruptions = false;
  std::optional<std::string> table, cache;
  std::optional<std::uint64_t> seed;
  bool sum = false;

  void add(CLI::App& app) {
    app.add_flag("--no-corruptions", no_corruptions, "skip the corruption grid");
    app.add_option("--corruption-table", table, "corruption parameter table")->check(CLI::ExistingFile);
    app.add_option("--grid-cache", cache, "directory caching the corrupted test sets");
    app.add_option("--corruption-seed", seed, "seed of the corruption noise");
    app.add_flag("--sum-intensities", sum, "sum the metric over severities instead of averaging");
  }

  void apply(dcal::CorruptionSettings& c) const {
    if (no_corruptions) c.enabled = false;
    if (table) c.table_path = *table;
    if (cache) c.cache_dir = *cache;
    if (seed) c.seed = *seed;
    if (sum) c.sum_intensities = true;
  }
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw dcal::FormatError(path.string() + ": " + e.what());
  }
}

dcal::Normalizer normalizer_from(const json& extra, std::size_t channels) {
  if (!extra.contains("normalizer")) return dcal::Normalizer::identity(channels);
  const auto& n = extra.at("normalizer");
  return dcal::Normalizer(n.at("mean").get<std::vector<double>>(), n.at("stddev").get<std::vector<double>>());
}

void write_png(const fs::path& path, const dcal::Image& img) {
  if (img.channels != 3 && img.channels != 1) throw dcal::ValidationError("PNG export needs 1 or 3 channels");
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(img.width * img.channels);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      row[i] = static_cast<png_byte>(std::lround(std::clamp(img.pixels[y * row.size() + i], 0.0, 1.0) * 255.0));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

int error_exit(const std::string& type, const std::string& message, int code) {
  std::cerr << json{{"error", {{"type", type}, {"message", message}}}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  // the tape allocates and frees large activations every step; keep them on the heap
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Diverse-ensemble calibration lab"};
  app.require_subcommand(1);

  // ---- train
  auto* train = app.add_subcommand("train", "train a model and report clean and corrupted metrics");
  std::optional<std::string> config_path, preset;
  bool not_diverse = false, no_ensemble = false, freeze_adapters = false, no_decay_adapters = false, quiet = false;
  bool adapters_ones = false, no_flip_crop = false;
  std::optional<std::size_t> epochs, batch, members, eval_batch, bins;
  std::optional<double> lr, wd, momentum, mix_param, adv_p, clip;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mix;
  std::string out_dir;
  bool print_config = false;
  DataFlags train_data;
  GridFlags train_grid;
  train->add_option("--config", config_path, "JSON config (flags override it)")->check(CLI::ExistingFile);
  train->add_option("--preset", preset, "named preset")->check(CLI::IsMember(dcal::preset_names()));
  train->add_flag("--not-diverse", not_diverse, "same severity for every member (shuffled for adversary)");
  train->add_flag("--no-ensemble", no_ensemble, "single model without rank-1 adapters");
  train->add_option("--epochs", epochs);
  train->add_option("--batch-size", batch, "originals per step");
  train->add_option("--members,-K", members, "ensemble size");
  train->add_option("--lr", lr, "initial learning rate");
  train->add_option("--weight-decay", wd);
  train->add_option("--momentum", momentum);
  train->add_option("--clip-norm", clip, "global gradient norm cap (0 disables)");
  train->add_option("--mix", mix, "augmix interpolation")->check(CLI::IsMember({"bernoulli", "beta"}));
  train->add_option("--mix-param", mix_param, "bernoulli p or beta parameter");
  train->add_option("--adv-p", adv_p, "adversary perturbation probability");
  train->add_flag("--freeze-adapters", freeze_adapters, "keep r, s at their initial values");
  train->add_flag("--adapters-at-ones", adapters_ones, "initialise r, s to ones");
  train->add_flag("--no-decay-adapters", no_decay_adapters, "no weight decay on r, s");
  train->add_flag("--no-flip-crop", no_flip_crop, "disable random flip and crop");
  train->add_option("--seed", seed, "run seed");
  train->add_option("--eval-batch", eval_batch);
  train->add_option("--bins", bins, "calibration bins");
  train->add_option("--out,-o", out_dir, "output directory");
  train->add_flag("--print-config", print_config, "print the resolved config and exit");
  train->add_flag("--quiet,-q", quiet, "no per-epoch progress");
  train_data.add(*train);
  train_grid.add(*train);

  // ---- eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ck_path, eval_out;
  std::optional<std::string> eval_grid_dir;
  bool eval_corrupt = false;
  DataFlags eval_data;
  GridFlags eval_grid;
  eval->add_option("--checkpoint,-c", ck_path, "checkpoint.json")->required()->check(CLI::ExistingFile);
  eval->add_flag("--corrupt", eval_corrupt, "also evaluate the corruption grid");
  eval->add_option("--out,-o", eval_out, "output directory");
  eval_data.add(*eval);
  eval_grid.add(*eval);

  // ---- corrupt
  auto* corrupt = app.add_subcommand("corrupt", "write the corruption grid of a test set");
  std::string corrupt_out;
  DataFlags corrupt_data;
  std::optional<std::string> corrupt_table;
  std::uint64_t corrupt_seed = 0;
  std::vector<std::string> corrupt_types;
  corrupt->add_option("--out,-o", corrupt_out, "output directory")->required();
  corrupt->add_option("--corruption-table", corrupt_table)->check(CLI::ExistingFile);
  corrupt->add_option("--corruption-seed", corrupt_seed);
  corrupt->add_option("--types", corrupt_types, "subset of corruption types");
  corrupt_data.add(*corrupt);

  // ---- report
  auto* report = app.add_subcommand("report", "score a prediction dump or print a run report");
  std::optional<std::string> pred_path, report_path, reliability_out;
  std::size_t report_bins = dcal::kDefaultBins;
  auto* pred_opt = report->add_option("--predictions,-p", pred_path, "CSV: label,p0,...")->check(CLI::ExistingFile);
  report->add_option("--report,-r", report_path, "report.json of a run")->check(CLI::ExistingFile)->excludes(pred_opt);
  report->add_option("--bins", report_bins);
  report->add_option("--reliability", reliability_out, "write the reliability table CSV here");

  // ---- augdump
  auto* augdump = app.add_subcommand("augdump", "dump augmented samples");
  std::string aug_out;
  std::size_t aug_count = 8;
  int aug_severity = 3;
  std::string aug_mix = "bernoulli";
  double aug_param = 1.0;
  std::uint64_t aug_seed = 0;
  std::string aug_format = "png";
  std::optional<std::string> aug_op;
  DataFlags aug_data;
  augdump->add_option("--out,-o", aug_out, "output directory")->required();
  augdump->add_option("--count,-n", aug_count, "images");
  augdump->add_option("--severity", aug_severity)->check(CLI::Range(1, 10));
  augdump->add_option("--mix", aug_mix)->check(CLI::IsMember({"bernoulli", "beta"}));
  augdump->add_option("--mix-param", aug_param);
  augdump->add_option("--op", aug_op, "apply one op instead of the full mix");
  augdump->add_option("--seed", aug_seed);
  augdump->add_option("--format", aug_format)->check(CLI::IsMember({"png", "raw"}));
  aug_data.add(*augdump);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return error_exit("UsageError", e.what(), 2);
  }

  try {
    if (*train) {
      dcal::TrainConfig cfg = preset ? dcal::preset_config(*preset, !not_diverse, !no_ensemble) : dcal::TrainConfig{};
      if (config_path) cfg = dcal::config_from_json(read_json(*config_path), cfg);
      if (!preset && (not_diverse || no_ensemble)) {
        if (not_diverse) cfg.diverse = false;
        if (no_ensemble) {
          cfg.model.ensemble = false;
          cfg.model.members = 1;
          cfg.diverse = false;
        }
      }
      if (epochs) cfg.epochs = *epochs;
      if (batch) cfg.batch_size = *batch;
      if (members) cfg.model.members = *members;
      if (lr) cfg.lr0 = *lr;
      if (wd) cfg.weight_decay = *wd;
      if (momentum) cfg.momentum = *momentum;
      if (clip) cfg.clip_norm = *clip;
      if (mix) cfg.augmix.policy.mode = *mix == "beta" ? dcal::MixPolicy::Mode::beta : dcal::MixPolicy::Mode::bernoulli;
      if (mix_param) cfg.augmix.policy.param = *mix_param;
      if (adv_p) cfg.adversary.config.p = *adv_p;
      if (freeze_adapters) cfg.train_adapters = false;
      if (adapters_ones) cfg.adapters_at_ones = true;
      if (no_decay_adapters) cfg.decay_adapters = false;
      if (no_flip_crop) cfg.flip_crop = false;
      if (seed) cfg.seed = *seed;
      if (eval_batch) cfg.eval_batch = *eval_batch;
      if (bins) cfg.bins = *bins;
      train_data.apply(cfg.data);
      train_grid.apply(cfg.corruptions);
      cfg.validate();
      if (print_config) {
        std::cout << dcal::config_to_json(cfg).dump(2) << '\n';
        return 0;
      }
      dcal::ProgressFn progress;
      if (!quiet) {
        progress = [](const dcal::EpochRecord& r) {
          std::cerr << "epoch " << r.epoch << "  loss " << r.train_loss << "  lr " << r.lr;
          if (r.val) std::cerr << "  val err " << 100.0 * r.val->error << "%  ece " << 100.0 * r.val->ece << "%";
          std::cerr << '\n';
        };
      }
      const auto rep = dcal::run_experiment(cfg, dcal::RunOutputs{out_dir}, progress);
      std::cout << dcal::report_table(rep);
      return 0;
    }

    if (*eval) {
      const dcal::Checkpoint ck = dcal::load_checkpoint(ck_path);
      dcal::TrainConfig cfg;
      if (ck.extra.contains("config")) cfg = dcal::config_from_json(ck.extra.at("config"));
      eval_data.apply(cfg.data);
      eval_grid.apply(cfg.corruptions);
      cfg.corruptions.enabled = eval_corrupt && !eval_grid.no_corruptions;
      const dcal::ExperimentInputs in = dcal::prepare_inputs(cfg);
      const dcal::Normalizer norm = normalizer_from(ck.extra, ck.model.spec().in_channels);
      auto rep = dcal::evaluate_report(ck.model, norm, in.test, in.grid, cfg);
      if (!eval_out.empty()) {
        fs::create_directories(eval_out);
        const auto ev = dcal::evaluate(ck.model, norm, in.test, cfg.eval_batch, cfg.bins);
        dcal::write_predictions_csv(fs::path(eval_out) / "predictions_test.csv", ev.ensemble);
        std::ofstream(fs::path(eval_out) / "report.json") << dcal::report_to_json(rep).dump(2) << '\n';
        std::ofstream(fs::path(eval_out) / "report.csv") << dcal::report_to_csv(rep);
      }
      std::cout << dcal::report_table(rep);
      return 0;
    }

    if (*corrupt) {
      dcal::TrainConfig cfg;
      corrupt_data.apply(cfg.data);
      cfg.corruptions.enabled = false;
      const auto in = dcal::prepare_inputs(cfg);
      const auto table = corrupt_table ? dcal::CorruptionTable::load(*corrupt_table) : dcal::CorruptionTable::defaults();
      for (const auto& t : corrupt_types) {
        if (!dcal::is_corruption_type(t)) throw dcal::ValidationError("unknown corruption type '" + t + "'");
      }
      const auto grid = dcal::build_corruption_grid(in.test, table, corrupt_seed, corrupt_types);
      dcal::save_grid(corrupt_out, grid);
      dcal::save_dataset(fs::path(corrupt_out) / "clean.dcds", in.test);
      std::cout << "wrote " << grid.size() << " corrupted copies of " << in.test.size() << " images to " << corrupt_out
                << '\n';
      return 0;
    }

    if (*report) {
      if (report_path) {
        const json doc = read_json(*report_path);
        std::cout << doc.dump(2) << '\n';
        return 0;
      }
      if (!pred_path) throw dcal::ValidationError("report needs --predictions or --report");
      const auto preds = dcal::read_predictions_csv(*pred_path);
      const auto bins_stats = dcal::reliability_table(preds, report_bins);
      const dcal::Metrics m = dcal::compute_metrics(preds, report_bins);
      std::cout << json{{"n", preds.size()},
                        {"classes", preds.classes},
                        {"bins", report_bins},
                        {"error_pct", 100.0 * m.error},
                        {"ece_pct", 100.0 * m.ece},
                        {"ece_rms_pct", 100.0 * m.ece_rms},
                        {"nll", m.nll}}
                       .dump(2)
                << '\n';
      if (reliability_out) {
        std::ofstream out(*reliability_out);
        if (!out) throw std::runtime_error("cannot write " + *reliability_out);
        dcal::write_reliability_csv(out, bins_stats);
      }
      return 0;
    }

    if (*augdump) {
      dcal::TrainConfig cfg;
      aug_data.apply(cfg.data);
      cfg.data.train_size = std::max(cfg.data.train_size, aug_count);
      cfg.corruptions.enabled = false;
      const auto in = dcal::prepare_inputs(cfg);
      const dcal::MixPolicy policy =
          aug_mix == "beta" ? dcal::MixPolicy::beta(aug_param) : dcal::MixPolicy::bernoulli(aug_param);
      policy.validate();
      fs::create_directories(aug_out);
      const dcal::Rng base = dcal::Rng::stream(aug_seed, "augdump");
      const std::size_t n = std::min(aug_count, in.train.size());
      for (std::size_t i = 0; i < n; ++i) {
        const dcal::Image x = in.train.image(i);
        dcal::Rng rng = base.derive(i);
        const dcal::Image y = aug_op ? dcal::apply_op(x, dcal::op_from_name(*aug_op), aug_severity, rng)
                                     : dcal::augment_and_mix(x, aug_severity, policy, rng);
        const std::string stem = "sample_" + std::to_string(i);
        if (aug_format == "png") {
          write_png(fs::path(aug_out) / (stem + "_orig.png"), x);
          write_png(fs::path(aug_out) / (stem + "_aug.png"), y);
        } else {
          std::ofstream raw(fs::path(aug_out) / (stem + ".f64"), std::ios::binary);
          raw.write(reinterpret_cast<const char*>(y.pixels.data()),
                    static_cast<std::streamsize>(y.pixels.size() * sizeof(double)));
        }
      }
      std::cout << "wrote " << n << " samples (" << in.train.height << "x" << in.train.width << "x"
                << in.train.channels << ", HWC) to " << aug_out << '\n';
      return 0;
    }
  } catch (const dcal::ValidationError& e) {
    return error_exit("ValidationError", e.what(), 2);
  } catch (const dcal::DimensionError& e) {
    return error_exit("DimensionError", e.what(), 2);
  } catch (const dcal::FormatError& e) {
    return error_exit("FormatError", e.what(), 3);
  } catch (const dcal::NumericError& e) {
    return error_exit("NumericError", e.what(), 4);
  } catch (const dcal::UsageError& e) {
    return error_exit("UsageError", e.what(), 2);
  } catch (const std::exception& e) {
    return error_exit("RuntimeError", e.what(), 1);
  }
  return 0;
}
