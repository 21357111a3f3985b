#include "dcal/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>

#include "dcal/errors.hpp"

namespace dcal {

static_assert(std::endian::native == std::endian::little, "dataset files are little-endian");

Image LabeledImageDataset::image(std::size_t i) const {
  Image img(height, width, channels);
  const auto src = image_span(i);
  std::copy(src.begin(), src.end(), img.pixels.begin());
  return img;
}

void LabeledImageDataset::set_image(std::size_t i, const Image& img) {
  if (img.height != height || img.width != width || img.channels != channels) {
    throw DimensionError("image shape does not match dataset " + name);
  }
  std::copy(img.pixels.begin(), img.pixels.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * image_size()));
}

void LabeledImageDataset::validate() const {
  if (pixels.size() != labels.size() * image_size()) {
    throw DimensionError("dataset " + name + ": pixel count does not match " + std::to_string(labels.size()) +
                         " images");
  }
  for (double v : pixels) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("dataset " + name + ": pixel value outside [0,1]");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ValidationError("dataset " + name + ": label " + std::to_string(y) + " outside [0," +
                            std::to_string(classes) + ")");
    }
  }
}

// ---- CIFAR -----------------------------------------------------------------

LabeledImageDataset load_cifar_binary(const std::filesystem::path& path, std::size_t classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                      std::to_string(kCifarRecordBytes));
  }
  LabeledImageDataset ds;
  ds.name = path.filename().string();
  ds.height = 32;
  ds.width = 32;
  ds.channels = 3;
  ds.classes = classes;
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  if (n == 0) std::cerr << "warning: " << path.string() << " holds no records\n";
  ds.labels.resize(n);
  ds.pixels.resize(n * 32 * 32 * 3);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] >= classes) {
      throw FormatError(path.string() + ": record " + std::to_string(i) + " has label " + std::to_string(rec[0]) +
                        " >= " + std::to_string(classes));
    }
    ds.labels[i] = rec[0];
    double* dst = ds.pixels.data() + i * 3072;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < 1024; ++p) dst[p * 3 + c] = rec[1 + c * 1024 + p] / 255.0;
    }
  }
  return ds;
}

void save_cifar_binary(const std::filesystem::path& path, const LabeledImageDataset& ds) {
  if (ds.height != 32 || ds.width != 32 || ds.channels != 3) {
    throw DimensionError("CIFAR binary needs 32x32x3 images");
  }
  std::vector<unsigned char> bytes(ds.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] < 0 || ds.labels[i] > 255) throw ValidationError("label does not fit a byte");
    unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
    rec[0] = static_cast<unsigned char>(ds.labels[i]);
    const double* src = ds.pixels.data() + i * 3072;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < 1024; ++p) {
        const double v = std::clamp(src[p * 3 + c], 0.0, 1.0);
        rec[1 + c * 1024 + p] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---- lossless container ----------------------------------------------------

namespace {

constexpr char kDatasetMagic[8] = {'D', 'C', 'A', 'L', 'D', 'S', 'E', 'T'};
constexpr std::uint32_t kDatasetVersion = 1;

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(path.string() + ": truncated");
  return v;
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const LabeledImageDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kDatasetMagic, sizeof(kDatasetMagic));
  put(out, kDatasetVersion);
  put(out, static_cast<std::uint64_t>(ds.size()));
  put(out, static_cast<std::uint32_t>(ds.height));
  put(out, static_cast<std::uint32_t>(ds.width));
  put(out, static_cast<std::uint32_t>(ds.channels));
  put(out, static_cast<std::uint32_t>(ds.classes));
  put(out, static_cast<std::uint32_t>(ds.name.size()));
  out.write(ds.name.data(), static_cast<std::streamsize>(ds.name.size()));
  for (int y : ds.labels) put(out, static_cast<std::int32_t>(y));
  out.write(reinterpret_cast<const char*>(ds.pixels.data()),
            static_cast<std::streamsize>(ds.pixels.size() * sizeof(double)));
}

LabeledImageDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kDatasetMagic, 8) != 0) {
    throw FormatError(path.string() + ": not a dataset file");
  }
  if (get<std::uint32_t>(in, path) != kDatasetVersion) throw FormatError(path.string() + ": unsupported version");
  LabeledImageDataset ds;
  const auto n = get<std::uint64_t>(in, path);
  ds.height = get<std::uint32_t>(in, path);
  ds.width = get<std::uint32_t>(in, path);
  ds.channels = get<std::uint32_t>(in, path);
  ds.classes = get<std::uint32_t>(in, path);
  ds.name.resize(get<std::uint32_t>(in, path));
  if (!in.read(ds.name.data(), static_cast<std::streamsize>(ds.name.size()))) {
    throw FormatError(path.string() + ": truncated");
  }
  ds.labels.resize(n);
  for (auto& y : ds.labels) y = get<std::int32_t>(in, path);
  ds.pixels.resize(n * ds.image_size());
  if (!in.read(reinterpret_cast<char*>(ds.pixels.data()),
               static_cast<std::streamsize>(ds.pixels.size() * sizeof(double)))) {
    throw FormatError(path.string() + ": truncated pixel block");
  }
  ds.validate();
  return ds;
}

// ---- synthetic -------------------------------------------------------------

namespace {

constexpr double kPi = 3.14159265358979323846;

void draw_example(Image& img, int label, Rng& rng) {
  const std::size_t S = img.height;
  const double centre = (static_cast<double>(S) - 1.0) / 2.0;
  const int family = label % 3;
  const int variant = label / 3;

  double bg[3], fg[3];
  for (int c = 0; c < 3; ++c) {
    bg[c] = rng.uniform(0.0, 0.45);
    fg[c] = rng.uniform(0.45, 1.0);
  }
  const double cy = centre + rng.uniform(-2.0, 2.0);
  const double cx = centre + rng.uniform(-2.0, 2.0);
  const double scale = static_cast<double>(S) / 16.0;

  // bar: orientation; disk: radius; checker: period
  const double angle = (variant * 45.0 + rng.normal(0.0, 7.0)) * kPi / 180.0;
  const double half_width = 0.9 * scale;
  const double radius = (2.0 + 1.4 * variant + rng.uniform(-0.4, 0.4)) * scale;
  const double period = (2.0 + variant) * scale;
  const double phase_y = rng.uniform(0.0, 2.0 * period);
  const double phase_x = rng.uniform(0.0, 2.0 * period);
  const double alpha = rng.uniform(0.55, 0.9);

  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      const double dy = static_cast<double>(y) - cy;
      const double dx = static_cast<double>(x) - cx;
      bool on = false;
      switch (family) {
        case 0: on = std::abs(-std::sin(angle) * dx + std::cos(angle) * dy) <= half_width; break;
        case 1: on = dx * dx + dy * dy <= radius * radius; break;
        default: {
          const auto iy = static_cast<long>(std::floor((static_cast<double>(y) + phase_y) / period));
          const auto ix = static_cast<long>(std::floor((static_cast<double>(x) + phase_x) / period));
          on = ((iy + ix) & 1) == 0;
          break;
        }
      }
      for (std::size_t c = 0; c < 3; ++c) {
        double v = on ? alpha * fg[c] + (1.0 - alpha) * bg[c] : bg[c];
        v += rng.normal(0.0, 0.08);
        img.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

}  // namespace

LabeledImageDataset synth_dataset(std::size_t n, std::size_t classes, std::size_t size, std::uint64_t seed) {
  if (classes < 2) throw ValidationError("synthetic data needs at least two classes");
  if (n < classes) throw ValidationError("synthetic dataset smaller than its class count");
  if (size < 4) throw ValidationError("synthetic images must be at least 4x4");
  LabeledImageDataset ds;
  ds.name = "synthetic";
  ds.height = size;
  ds.width = size;
  ds.channels = 3;
  ds.classes = classes;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % classes);
  Rng order = Rng::stream(seed, "synth.order");
  std::shuffle(ds.labels.begin(), ds.labels.end(), order);
  ds.pixels.resize(n * ds.image_size());
  const Rng base = Rng::stream(seed, "synth.pixels");
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    Rng rng = base.derive(static_cast<std::uint64_t>(i));
    Image img(size, size, 3);
    draw_example(img, ds.labels[static_cast<std::size_t>(i)], rng);
    ds.set_image(static_cast<std::size_t>(i), img);
  }
  return ds;
}

// ---- splitting -------------------------------------------------------------

LabeledImageDataset subset(const LabeledImageDataset& ds, std::span<const std::size_t> indices) {
  LabeledImageDataset out;
  out.name = ds.name;
  out.height = ds.height;
  out.width = ds.width;
  out.channels = ds.channels;
  out.classes = ds.classes;
  out.labels.reserve(indices.size());
  out.pixels.reserve(indices.size() * ds.image_size());
  for (std::size_t i : indices) {
    if (i >= ds.size()) throw ValidationError("subset index out of range");
    out.labels.push_back(ds.labels[i]);
    const auto src = ds.image_span(i);
    out.pixels.insert(out.pixels.end(), src.begin(), src.end());
  }
  return out;
}

std::pair<LabeledImageDataset, LabeledImageDataset> split_train_val(const LabeledImageDataset& ds,
                                                                     std::size_t n_val, std::uint64_t seed) {
  if (n_val >= ds.size()) {
    throw ValidationError("validation size " + std::to_string(n_val) + " must be smaller than dataset size " +
                          std::to_string(ds.size()));
  }
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng::stream(seed, "split");
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> val(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  auto tr = subset(ds, train);
  auto va = subset(ds, val);
  tr.name = ds.name + ".train";
  va.name = ds.name + ".val";
  return {std::move(tr), std::move(va)};
}

// ---- preprocessing ---------------------------------------------------------

FlipCrop sample_flip_crop(Rng& rng, int pad) {
  FlipCrop fc;
  fc.flip = rng.bernoulli(0.5);
  fc.offset_y = static_cast<int>(rng.index(static_cast<std::size_t>(2 * pad + 1)));
  fc.offset_x = static_cast<int>(rng.index(static_cast<std::size_t>(2 * pad + 1)));
  return fc;
}

Image apply_flip_crop(const Image& img, const FlipCrop& fc, int pad) {
  Image out(img.height, img.width, img.channels);
  const auto H = static_cast<std::ptrdiff_t>(img.height);
  const auto W = static_cast<std::ptrdiff_t>(img.width);
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    const std::ptrdiff_t sy = y + fc.offset_y - pad;
    if (sy < 0 || sy >= H) continue;
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      std::ptrdiff_t sx = x + fc.offset_x - pad;
      if (sx < 0 || sx >= W) continue;
      if (fc.flip) sx = W - 1 - sx;
      for (std::size_t c = 0; c < img.channels; ++c) {
        out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) =
            img.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), c);
      }
    }
  }
  return out;
}

Image standard_preprocess(const Image& img, Rng& rng) {
  if (img.height != img.width) throw DimensionError("standard preprocessing expects square images");
  return apply_flip_crop(img, sample_flip_crop(rng));
}

Normalizer::Normalizer(std::vector<double> m, std::vector<double> s) : mean(std::move(m)), stddev(std::move(s)) {
  if (mean.size() != stddev.size()) throw DimensionError("normalizer mean/std lengths differ");
  for (double v : stddev) {
    if (!(v > 0.0)) throw ValidationError("normalizer std must be positive");
  }
}

Normalizer Normalizer::fit(const LabeledImageDataset& ds) {
  const std::size_t C = ds.channels;
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  const std::size_t pixels = ds.pixels.size() / C;
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t c = 0; c < C; ++c) {
      const double v = ds.pixels[p * C + c];
      sum[c] += v;
      sq[c] += v * v;
    }
  }
  std::vector<double> mean(C), sd(C);
  for (std::size_t c = 0; c < C; ++c) {
    mean[c] = pixels ? sum[c] / static_cast<double>(pixels) : 0.0;
    const double var = pixels ? sq[c] / static_cast<double>(pixels) - mean[c] * mean[c] : 1.0;
    sd[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return Normalizer(std::move(mean), std::move(sd));
}

Normalizer Normalizer::identity(std::size_t channels) {
  return Normalizer(std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0));
}

void Normalizer::normalize_into(const Image& img, std::span<double> out) const {
  if (img.channels != mean.size()) throw DimensionError("normalizer channel count differs from image");
  const std::size_t HW = img.height * img.width;
  if (out.size() != HW * img.channels) throw DimensionError("normalize output buffer has the wrong size");
  for (std::size_t p = 0; p < HW; ++p) {
    for (std::size_t c = 0; c < img.channels; ++c) {
      out[c * HW + p] = (img.pixels[p * img.channels + c] - mean[c]) / stddev[c];
    }
  }
}

Tensor Normalizer::normalize(const Image& img) const {
  Tensor t({img.channels, img.height, img.width});
  normalize_into(img, t.values());
  return t;
}

Image Normalizer::denormalize(std::span<const double> chw, std::size_t height, std::size_t width) const {
  const std::size_t C = mean.size(), HW = height * width;
  if (chw.size() != C * HW) throw DimensionError("denormalize input has the wrong size");
  Image img(height, width, C);
  for (std::size_t p = 0; p < HW; ++p) {
    for (std::size_t c = 0; c < C; ++c) img.pixels[p * C + c] = chw[c * HW + p] * stddev[c] + mean[c];
  }
  return img;
}

Tensor to_batch_tensor(std::span<const Image> images, const Normalizer& norm) {
  if (images.empty()) throw DimensionError("cannot batch zero images");
  const Image& first = images.front();
  const std::size_t per = first.size();
  Tensor t({images.size(), first.channels, first.height, first.width});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (!images[i].same_shape(first)) throw DimensionError("batch images differ in shape");
    norm.normalize_into(images[i], t.values().subspan(i * per, per));
  }
  return t;
}

}  // namespace dcal
