#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcal/adversary.hpp"
#include "dcal/augmix.hpp"
#include "dcal/corruptions.hpp"
#include "dcal/data.hpp"
#include "dcal/ensemble_layers.hpp"
#include "dcal/metrics.hpp"
#include "dcal/model.hpp"

namespace dcal {

inline constexpr std::size_t kFullScaleEnsembleEpochs = 250;
inline constexpr std::size_t kFullScaleSingleEpochs = 200;

struct DatasetSpec {
  std::string source = "synthetic";  // "synthetic" or "cifar"
  std::size_t train_size = 8000;     // synthetic only
  std::size_t test_size = 2000;      // synthetic only
  std::size_t image_size = 16;       // synthetic only
  std::size_t classes = 10;
  std::string train_path;  // cifar: one or more binary files, comma separated
  std::string test_path;
  std::size_t n_val = 0;  // held out of the training split
  std::uint64_t seed = 0;
};

struct AugmixSettings {
  bool enabled = false;
  MixPolicy policy = MixPolicy::bernoulli(0.875);
  SeverityVector severities = SeverityVector::augmix(true);
  int chains = 3;
  double alpha = 1.0;
};

struct AdversarySettings {
  bool enabled = false;
  AdvConfig config;
};

struct DepthSettings {
  bool enabled = false;
  SeverityVector severities = SeverityVector::depth(true);
};

struct CorruptionSettings {
  bool enabled = true;
  std::string table_path;  // empty: compiled-in defaults
  std::string cache_dir;   // empty: no caching
  std::uint64_t seed = 0;
  bool sum_intensities = false;
};

struct TrainConfig {
  std::string preset = "custom";
  DatasetSpec data;
  ModelSpec model;
  std::size_t epochs = 30;
  std::size_t batch_size = 128;  // originals per step; B*K rows after replication
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double clip_norm = 3.0;      // rescale the global gradient norm to at most this; 0 disables
  bool decay_adapters = true;  // apply weight decay to r, s as well
  bool train_adapters = true;  // false freezes r, s at their initial values
  bool adapters_at_ones = false;
  bool flip_crop = true;
  AugmixSettings augmix;
  AdversarySettings adversary;
  DepthSettings depth;
  bool diverse = true;
  std::uint64_t seed = 0;
  std::size_t eval_batch = 128;
  std::size_t bins = kDefaultBins;
  CorruptionSettings corruptions;

  std::size_t members() const { return model.ensemble_size(); }
  /// Propagates `diverse` into the severity vectors and checks ranges.
  void validate() const;
};

nlohmann::json config_to_json(const TrainConfig& cfg);
/// Missing keys keep the defaults of `base`.
TrainConfig config_from_json(const nlohmann::json& j, const TrainConfig& base = {});

/// vanilla, be, be-sd, be-adv, be-adv-p1, am-beta, am-bern, am-bern-p1, am-bern-adv.
const std::vector<std::string>& preset_names();
/// `diverse = false` selects the not-diverse severity assignment; `ensemble =
/// false` the single-model variant.
TrainConfig preset_config(const std::string& name, bool diverse = true, bool ensemble = true);

/// 0.5 * lr0 * (1 + cos(pi * step / total)).
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

/// g = grad + wd * param; v = momentum * v + g; param -= lr * (g + momentum * v).
void sgd_nesterov_update(std::span<double> param, std::span<const double> grad, std::span<double> velocity,
                         double lr, double momentum, double weight_decay);

/// Model plus optimiser state.
struct TrainState {
  ResidualClassifier model;
  std::vector<std::vector<double>> velocity;  // aligned with model.parameters()
  Normalizer normalizer;
  std::size_t step = 0;
  std::size_t total_steps = 0;
};

TrainState init_train_state(const TrainConfig& cfg, const Normalizer& normalizer, std::size_t total_steps);

/// A K-replicated, augmented, normalised batch ready for the forward pass.
struct PreparedBatch {
  Tensor input;              // [B*K, C, H, W]
  std::vector<int> labels;   // B*K
  std::vector<int> members;  // B*K
  DepthMask depth;           // empty unless stochastic depth is enabled
  std::vector<double> augmix_severity;  // per member, empty when off
  std::vector<double> adversary_severity;
  std::vector<double> depth_severity;
};

/// flip/crop (one decision per original) -> augmix -> normalise -> adversary,
/// plus depth masks. Randomness comes from named streams of cfg.seed keyed by
/// step and row.
PreparedBatch prepare_batch(const TrainState& state, const TrainConfig& cfg, std::span<const Image> images,
                            std::span<const int> labels);

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // before clipping
};

/// prepare_batch, forward, mean cross-entropy over all rows, backward, one
/// Nesterov update at the step's cosine rate.
StepResult train_step(TrainState& state, const TrainConfig& cfg, std::span<const Image> images,
                      std::span<const int> labels);

struct Evaluation {
  PredictionSet ensemble;
  std::vector<PredictionSet> members;  // per member softmax
  Metrics metrics;
};

/// Every example through every member, eval mode; member probabilities averaged.
Evaluation evaluate(const ResidualClassifier& model, const Normalizer& normalizer, const LabeledImageDataset& ds,
                    std::size_t batch = 128, std::size_t bins = kDefaultBins);

struct ExperimentInputs {
  LabeledImageDataset train;
  LabeledImageDataset val;  // empty when n_val = 0
  LabeledImageDataset test;
  std::vector<GridCell> grid;
};

/// Loads or synthesises the data and builds (or loads the cached) corruption grid.
ExperimentInputs prepare_inputs(const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double lr = 0.0;
  std::optional<Metrics> val;
};

struct CorruptionReport {
  CorruptionGrid error, ece, ece_rms, nll;
  CorruptionSummary error_summary, ece_summary, ece_rms_summary, nll_summary;
};

struct RunReport {
  TrainConfig config;
  std::vector<EpochRecord> history;
  std::optional<Metrics> val;
  Metrics test;
  std::vector<Metrics> test_members;
  std::optional<CorruptionReport> corruption;
  double wall_seconds = 0.0;
  std::string status = "ok";
};

nlohmann::json report_to_json(const RunReport& report);
/// Rows split,metric,value (percent for error and calibration, raw NLL).
std::string report_to_csv(const RunReport& report);
/// Human-readable summary table.
std::string report_table(const RunReport& report);

struct RunOutputs {
  std::filesystem::path dir;  // empty: nothing written
  bool predictions = true;
  bool checkpoint = true;
};

using ProgressFn = std::function<void(const EpochRecord&)>;

/// Train, evaluate on val/test/corruption grid, summarise. Outputs (if a
/// directory is given): report.json, report.csv, checkpoint.json, and
/// prediction and reliability CSVs. A failure writes the partial report with
/// status "failed" before rethrowing.
RunReport run_experiment(const TrainConfig& cfg, const ExperimentInputs& inputs, const RunOutputs& outputs = {},
                         const ProgressFn& progress = {}, TrainState* final_state = nullptr);
RunReport run_experiment(const TrainConfig& cfg, const RunOutputs& outputs = {}, const ProgressFn& progress = {});

/// Evaluation of a trained model on a test set and, optionally, a grid.
RunReport evaluate_report(const ResidualClassifier& model, const Normalizer& normalizer,
                          const LabeledImageDataset& test, const std::vector<GridCell>& grid,
                          const TrainConfig& cfg);

}  // namespace dcal
