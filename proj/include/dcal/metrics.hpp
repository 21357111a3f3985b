#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dcal/tensor.hpp"

namespace dcal {

inline constexpr std::size_t kDefaultBins = 15;

/// Class-probability rows with labels.
struct PredictionSet {
  std::size_t classes = 0;
  std::vector<double> probs;  // rows x classes
  std::vector<int> labels;

  PredictionSet() = default;
  PredictionSet(std::size_t classes, std::vector<double> probs, std::vector<int> labels);
  /// From a [N,C] probability tensor.
  PredictionSet(const Tensor& probs, std::vector<int> labels);

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return {probs.data() + i * classes, classes}; }
  /// argmax, ties to the lowest class index.
  int prediction(std::size_t i) const;
  double confidence(std::size_t i) const;
  bool correct(std::size_t i) const { return prediction(i) == labels[i]; }

  /// Rows sum to 1 within 1e-6, entries in [0,1], labels in range.
  void validate() const;
};

/// Arithmetic mean of member probabilities; rows are renormalised only when
/// their sum drifts from 1 by more than 1e-9.
PredictionSet ensemble_average(std::span<const PredictionSet> members);

/// Equal-width bins; bin m covers ((m-1)/M, m/M].
struct BinStats {
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<std::size_t> count;
  std::vector<double> confidence;  // mean confidence, NaN when empty
  std::vector<double> accuracy;    // NaN when empty
  std::size_t total = 0;

  std::size_t bins() const noexcept { return count.size(); }
};

/// Bin holding confidence `c` under `n_bins` right-closed equal-width bins.
std::size_t bin_index(double c, std::size_t n_bins);

BinStats reliability_table(const PredictionSet& preds, std::size_t n_bins = kDefaultBins);
double ece_from_bins(const BinStats& bins);
double ece_rms_from_bins(const BinStats& bins);

double ece(const PredictionSet& preds, std::size_t n_bins = kDefaultBins);
double ece_rms(const PredictionSet& preds, std::size_t n_bins = kDefaultBins);
double error_rate(const PredictionSet& preds);
/// Mean negative log-likelihood of the labels.
double nll(const PredictionSet& preds);

struct Metrics {
  double error = 0.0;
  double ece = 0.0;
  double ece_rms = 0.0;
  double nll = 0.0;
};

Metrics compute_metrics(const PredictionSet& preds, std::size_t n_bins = kDefaultBins);

/// Columns: bin,lower,upper,count,confidence,accuracy ("nan" for empty bins).
void write_reliability_csv(std::ostream& out, const BinStats& bins);

/// Header "label,p0,...,p{C-1}", one row per example, doubles printed exactly.
void write_predictions_csv(const std::filesystem::path& path, const PredictionSet& preds);
PredictionSet read_predictions_csv(const std::filesystem::path& path);

inline constexpr int kGridSeverities = 5;

/// Scalar metric per (corruption type, severity 1..5).
struct CorruptionGrid {
  std::map<std::string, std::map<int, double>> cells;

  void set(const std::string& type, int severity, double value);
  std::size_t size() const;
};

struct CorruptionSummary {
  double overall = 0.0;
  std::vector<std::pair<std::string, double>> per_type;  // sorted by type name
};

/// Per type: mean over the five severities (sum with `sum_intensities`);
/// overall: mean over types. Throws ValidationError listing missing cells.
CorruptionSummary corruption_summary(const CorruptionGrid& grid, bool sum_intensities = false);

}  // namespace dcal
