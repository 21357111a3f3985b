#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dcal/data.hpp"
#include "dcal/rng.hpp"

namespace dcal {

/// Corruption types. None of them is an augmentation op.
inline constexpr std::array<std::string_view, 6> kCorruptionTypes = {
    "gaussian_noise", "shot_noise", "impulse_noise", "box_blur", "contrast", "pixelate",
};

/// Parameter per severity level 1..5 for each corruption type.
///
///   gaussian_noise  noise stddev                 increasing
///   shot_noise      photons per unit intensity   decreasing
///   impulse_noise   fraction of values hit       increasing
///   box_blur        blur radius in pixels        increasing
///   contrast        contrast factor              decreasing
///   pixelate        block side in pixels         increasing
class CorruptionTable {
 public:
  /// The compiled-in table (identical to config/corruptions.cfg).
  static CorruptionTable defaults();
  /// Lines "type p1 p2 p3 p4 p5"; '#' starts a comment.
  static CorruptionTable parse(std::string_view text, std::string_view source = "<string>");
  static CorruptionTable load(const std::filesystem::path& path);

  double param(std::string_view type, int severity) const;
  const std::map<std::string, std::array<double, 5>>& entries() const noexcept { return entries_; }
  std::vector<std::string> types() const;

 private:
  std::map<std::string, std::array<double, 5>> entries_;
};

bool is_corruption_type(std::string_view type);

/// Applies `type` at an explicit parameter value; output clipped to [0,1].
Image corrupt_with_param(const Image& img, std::string_view type, double param, Rng& rng);

struct CorruptionSpec {
  std::string type;
  int severity = 1;  // 1..5; 0 is the identity sentinel
};

Image corrupt(const Image& img, const CorruptionSpec& spec, const CorruptionTable& table, Rng& rng);

/// Stream of one grid cell, keyed by (seed, type, severity).
Rng corruption_stream(std::uint64_t seed, std::string_view type, int severity);

/// Corrupted copy of a dataset; image i uses corruption_stream(...).derive(i).
LabeledImageDataset corrupt_dataset(const LabeledImageDataset& ds, const CorruptionSpec& spec,
                                    const CorruptionTable& table, std::uint64_t seed);

struct GridCell {
  std::string type;
  int severity = 0;
  LabeledImageDataset data;
};

/// One corrupted copy per (type, severity 1..5), cells ordered by type then severity.
std::vector<GridCell> build_corruption_grid(const LabeledImageDataset& test, const CorruptionTable& table,
                                            std::uint64_t seed, const std::vector<std::string>& types = {});

/// Directory of <type>_<severity>.dcds files.
void save_grid(const std::filesystem::path& dir, const std::vector<GridCell>& grid);
std::vector<GridCell> load_grid(const std::filesystem::path& dir);

}  // namespace dcal
