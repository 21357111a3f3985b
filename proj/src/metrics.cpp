#include "dcal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "dcal/errors.hpp"

namespace dcal {

namespace {

void require_nonempty(const PredictionSet& preds) {
  if (preds.size() == 0) throw ValidationError("metrics need at least one prediction");
}

double edge(std::size_t m, std::size_t n_bins) { return static_cast<double>(m) / static_cast<double>(n_bins); }

}  // namespace

PredictionSet::PredictionSet(std::size_t classes_, std::vector<double> probs_, std::vector<int> labels_)
    : classes(classes_), probs(std::move(probs_)), labels(std::move(labels_)) {
  if (classes == 0 || probs.size() != classes * labels.size()) {
    throw DimensionError("prediction set: " + std::to_string(probs.size()) + " probabilities for " +
                         std::to_string(labels.size()) + " rows of " + std::to_string(classes) + " classes");
  }
}

PredictionSet::PredictionSet(const Tensor& p, std::vector<int> labels_) {
  if (p.rank() != 2) throw DimensionError("prediction set needs [N,C] probabilities, got " + shape_string(p.shape()));
  if (p.dim(0) != labels_.size()) {
    throw DimensionError("prediction set: " + shape_string(p.shape()) + " probabilities for " +
                         std::to_string(labels_.size()) + " labels");
  }
  classes = p.dim(1);
  probs = p.storage();
  labels = std::move(labels_);
}

int PredictionSet::prediction(std::size_t i) const {
  const auto r = row(i);
  return static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
}

double PredictionSet::confidence(std::size_t i) const {
  const auto r = row(i);
  return *std::max_element(r.begin(), r.end());
}

void PredictionSet::validate() const {
  if (classes == 0 || probs.size() != classes * labels.size()) throw DimensionError("malformed prediction set");
  for (std::size_t i = 0; i < size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw ValidationError("label " + std::to_string(labels[i]) + " of row " + std::to_string(i) + " outside [0," +
                            std::to_string(classes) + ")");
    }
    double total = 0.0;
    for (double v : row(i)) {
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("probability outside [0,1] in row " + std::to_string(i));
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-6) throw ValidationError("row " + std::to_string(i) + " does not sum to 1");
  }
}

PredictionSet ensemble_average(std::span<const PredictionSet> members) {
  if (members.empty()) throw ValidationError("ensemble_average needs at least one member");
  const PredictionSet& first = members.front();
  for (const auto& m : members) {
    if (m.classes != first.classes || m.size() != first.size()) {
      throw ValidationError("ensemble_average: member shapes differ");
    }
  }
  PredictionSet out(first.classes, std::vector<double>(first.probs.size(), 0.0), first.labels);
  for (const auto& m : members) {
    for (std::size_t j = 0; j < out.probs.size(); ++j) out.probs[j] += m.probs[j];
  }
  const double k = static_cast<double>(members.size());
  for (auto& v : out.probs) v /= k;
  for (std::size_t i = 0; i < out.size(); ++i) {
    double* r = out.probs.data() + i * out.classes;
    double total = 0.0;
    for (std::size_t c = 0; c < out.classes; ++c) total += r[c];
    if (std::abs(total - 1.0) > 1e-9) {
      for (std::size_t c = 0; c < out.classes; ++c) r[c] /= total;
    }
  }
  return out;
}

std::size_t bin_index(double c, std::size_t n_bins) {
  if (n_bins == 0) throw ValidationError("need at least one bin");
  auto m = static_cast<std::size_t>(std::clamp(std::ceil(c * static_cast<double>(n_bins)), 1.0,
                                               static_cast<double>(n_bins)));
  // settle against the exact edges so membership never depends on rounding of c*M
  while (m > 1 && c <= edge(m - 1, n_bins)) --m;
  while (m < n_bins && c > edge(m, n_bins)) ++m;
  return m - 1;
}

BinStats reliability_table(const PredictionSet& preds, std::size_t n_bins) {
  require_nonempty(preds);
  if (n_bins == 0) throw ValidationError("need at least one bin");
  BinStats b;
  b.lower.resize(n_bins);
  b.upper.resize(n_bins);
  b.count.assign(n_bins, 0);
  std::vector<double> conf_sum(n_bins, 0.0), correct(n_bins, 0.0);
  for (std::size_t m = 0; m < n_bins; ++m) {
    b.lower[m] = edge(m, n_bins);
    b.upper[m] = edge(m + 1, n_bins);
  }
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double c = preds.confidence(i);
    const std::size_t m = bin_index(c, n_bins);
    ++b.count[m];
    conf_sum[m] += c;
    if (preds.correct(i)) correct[m] += 1.0;
  }
  b.confidence.resize(n_bins);
  b.accuracy.resize(n_bins);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t m = 0; m < n_bins; ++m) {
    const double n = static_cast<double>(b.count[m]);
    b.confidence[m] = b.count[m] ? conf_sum[m] / n : nan;
    b.accuracy[m] = b.count[m] ? correct[m] / n : nan;
  }
  b.total = preds.size();
  return b;
}

double ece_from_bins(const BinStats& bins) {
  double total = 0.0;
  for (std::size_t m = 0; m < bins.bins(); ++m) {
    if (!bins.count[m]) continue;
    total += static_cast<double>(bins.count[m]) / static_cast<double>(bins.total) *
             std::abs(bins.accuracy[m] - bins.confidence[m]);
  }
  return total;
}

double ece_rms_from_bins(const BinStats& bins) {
  double total = 0.0;
  for (std::size_t m = 0; m < bins.bins(); ++m) {
    if (!bins.count[m]) continue;
    const double gap = bins.accuracy[m] - bins.confidence[m];
    total += static_cast<double>(bins.count[m]) / static_cast<double>(bins.total) * gap * gap;
  }
  return std::sqrt(total);
}

double ece(const PredictionSet& preds, std::size_t n_bins) { return ece_from_bins(reliability_table(preds, n_bins)); }

double ece_rms(const PredictionSet& preds, std::size_t n_bins) {
  return ece_rms_from_bins(reliability_table(preds, n_bins));
}

double error_rate(const PredictionSet& preds) {
  require_nonempty(preds);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) wrong += preds.correct(i) ? 0 : 1;
  return static_cast<double>(wrong) / static_cast<double>(preds.size());
}

double nll(const PredictionSet& preds) {
  require_nonempty(preds);
  double total = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double p = preds.row(i)[static_cast<std::size_t>(preds.labels[i])];
    total -= std::log(std::max(p, std::numeric_limits<double>::min()));
  }
  return total / static_cast<double>(preds.size());
}

Metrics compute_metrics(const PredictionSet& preds, std::size_t n_bins) {
  const BinStats bins = reliability_table(preds, n_bins);
  return {error_rate(preds), ece_from_bins(bins), ece_rms_from_bins(bins), nll(preds)};
}

void write_reliability_csv(std::ostream& out, const BinStats& bins) {
  out << "bin,lower,upper,count,confidence,accuracy\n";
  out << std::setprecision(17);
  for (std::size_t m = 0; m < bins.bins(); ++m) {
    out << m << ',' << bins.lower[m] << ',' << bins.upper[m] << ',' << bins.count[m] << ',';
    if (bins.count[m]) {
      out << bins.confidence[m] << ',' << bins.accuracy[m] << '\n';
    } else {
      out << "nan,nan\n";
    }
  }
}

void write_predictions_csv(const std::filesystem::path& path, const PredictionSet& preds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "label";
  for (std::size_t c = 0; c < preds.classes; ++c) out << ",p" << c;
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    out << preds.labels[i];
    for (double v : preds.row(i)) out << ',' << v;
    out << '\n';
  }
}

PredictionSet read_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("label", 0) != 0) {
    throw FormatError(path.string() + ": missing 'label,p0,...' header");
  }
  const std::size_t classes = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  if (classes == 0) throw FormatError(path.string() + ": header names no classes");
  std::vector<double> probs;
  std::vector<int> labels;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(fields, cell, ',')) cells.push_back(cell);
    if (cells.size() != classes + 1) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(classes + 1) +
                        " fields");
    }
    try {
      labels.push_back(std::stoi(cells[0]));
      for (std::size_t c = 1; c < cells.size(); ++c) probs.push_back(std::stod(cells[c]));
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": unparsable number");
    }
  }
  PredictionSet preds(classes, std::move(probs), std::move(labels));
  preds.validate();
  return preds;
}

void CorruptionGrid::set(const std::string& type, int severity, double value) { cells[type][severity] = value; }

std::size_t CorruptionGrid::size() const {
  std::size_t n = 0;
  for (const auto& [type, row] : cells) n += row.size();
  return n;
}

CorruptionSummary corruption_summary(const CorruptionGrid& grid, bool sum_intensities) {
  if (grid.cells.empty()) throw ValidationError("corruption grid is empty");
  std::string missing;
  for (const auto& [type, row] : grid.cells) {
    for (const auto& [sev, v] : row) {
      if (sev < 1 || sev > kGridSeverities) {
        throw ValidationError("corruption grid cell (" + type + ", " + std::to_string(sev) + ") outside severities 1..5");
      }
    }
    for (int s = 1; s <= kGridSeverities; ++s) {
      if (!row.count(s)) missing += (missing.empty() ? "" : ", ") + ("(" + type + ", " + std::to_string(s) + ")");
    }
  }
  if (!missing.empty()) throw ValidationError("corruption grid is missing " + missing);
  CorruptionSummary out;
  double total = 0.0;
  for (const auto& [type, row] : grid.cells) {
    double acc = 0.0;
    for (const auto& [sev, v] : row) acc += v;
    const double value = sum_intensities ? acc : acc / kGridSeverities;
    out.per_type.emplace_back(type, value);
    total += value;
  }
  out.overall = total / static_cast<double>(grid.cells.size());
  return out;
}

}  // namespace dcal
