#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcal/rng.hpp"
#include "dcal/tensor.hpp"

namespace dcal {

/// One image in HWC layout, values in [0,1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  std::size_t size() const { return pixels.size(); }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
};

/// Images [N,H,W,C] in [0,1] with labels in [0, classes).
struct LabeledImageDataset {
  std::string name;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t classes = 0;
  std::vector<double> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return height * width * channels; }
  Image image(std::size_t i) const;
  void set_image(std::size_t i, const Image& img);
  std::span<const double> image_span(std::size_t i) const {
    return {pixels.data() + i * image_size(), image_size()};
  }
  void validate() const;
};

// ---- CIFAR binary ----------------------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Records of 1 label byte + 3x1024 bytes (R, G, B planes, row-major 32x32).
LabeledImageDataset load_cifar_binary(const std::filesystem::path& path, std::size_t classes = 10);
/// Writes 32x32x3 datasets; pixels are rounded to the nearest of 256 levels.
void save_cifar_binary(const std::filesystem::path& path, const LabeledImageDataset& ds);

// ---- lossless dataset container (corruption-grid cache) --------------------

void save_dataset(const std::filesystem::path& path, const LabeledImageDataset& ds);
LabeledImageDataset load_dataset(const std::filesystem::path& path);

// ---- synthetic data ---------------------------------------------------------

/// Procedural RGB images: bars of class-dependent orientation, disks of
/// class-dependent radius, checkerboards of class-dependent period, on a
/// noisy background. Balanced labels; deterministic per seed.
LabeledImageDataset synth_dataset(std::size_t n, std::size_t classes, std::size_t size, std::uint64_t seed);

// ---- splitting --------------------------------------------------------------

LabeledImageDataset subset(const LabeledImageDataset& ds, std::span<const std::size_t> indices);
/// Uniformly random disjoint split into (train, val) with |val| = n_val.
std::pair<LabeledImageDataset, LabeledImageDataset> split_train_val(const LabeledImageDataset& ds,
                                                                     std::size_t n_val, std::uint64_t seed);

// ---- preprocessing ---------------------------------------------------------

struct FlipCrop {
  bool flip = false;
  int offset_y = 0;  // crop origin in the padded image, 0..2*pad
  int offset_x = 0;
};

inline constexpr int kCropPad = 4;

FlipCrop sample_flip_crop(Rng& rng, int pad = kCropPad);
/// Horizontal flip (if set), zero-pad by `pad`, crop back to the original size.
Image apply_flip_crop(const Image& img, const FlipCrop& fc, int pad = kCropPad);
/// Random flip with probability 0.5 followed by pad-4 random crop.
Image standard_preprocess(const Image& img, Rng& rng);

/// Channelwise affine map into model-input space.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  Normalizer() = default;
  Normalizer(std::vector<double> mean, std::vector<double> stddev);

  /// Per-channel statistics of a dataset's pixels.
  static Normalizer fit(const LabeledImageDataset& ds);
  static Normalizer identity(std::size_t channels);

  /// HWC pixels -> CHW normalised values written to `out` (size H*W*C).
  void normalize_into(const Image& img, std::span<double> out) const;
  /// (x - mean)/std as a [C,H,W] tensor.
  Tensor normalize(const Image& img) const;
  /// Inverse of normalize for a [C,H,W] buffer.
  Image denormalize(std::span<const double> chw, std::size_t height, std::size_t width) const;

  /// Normalised images of 0 and 1, per channel (valid range in model-input space).
  double lower(std::size_t c) const { return (0.0 - mean[c]) / stddev[c]; }
  double upper(std::size_t c) const { return (1.0 - mean[c]) / stddev[c]; }
};

/// Stacks normalised images into a [N,C,H,W] tensor.
Tensor to_batch_tensor(std::span<const Image> images, const Normalizer& norm);

}  // namespace dcal
