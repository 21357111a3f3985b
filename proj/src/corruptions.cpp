#include "dcal/corruptions.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "dcal/errors.hpp"

namespace dcal {

namespace {

constexpr const char* kDefaultTable = R"(# corruption parameters for severity levels 1..5
gaussian_noise  0.04 0.06 0.08 0.09 0.10
shot_noise      500  250  100  75   50
impulse_noise   0.01 0.02 0.03 0.05 0.07
box_blur        0.5  1.0  1.5  2.0  2.5
contrast        0.75 0.5  0.4  0.3  0.15
pixelate        2    3    4    5    6
)";

// +1: parameter grows with severity, -1: shrinks.
int direction(std::string_view type) { return type == "shot_noise" || type == "contrast" ? -1 : 1; }

void clip(Image& img) {
  for (auto& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
}

Image gaussian_noise(const Image& img, double sigma, Rng& rng) {
  Image out = img;
  for (auto& v : out.pixels) v += rng.normal(0.0, sigma);
  return out;
}

Image shot_noise(const Image& img, double photons, Rng& rng) {
  if (!(photons > 0.0)) throw ValidationError("shot_noise needs a positive photon count");
  Image out = img;
  for (auto& v : out.pixels) {
    std::poisson_distribution<long> draw(std::max(v, 0.0) * photons);
    v = static_cast<double>(v > 0.0 ? draw(rng) : 0) / photons;
  }
  return out;
}

Image impulse_noise(const Image& img, double amount, Rng& rng) {
  if (!(amount >= 0.0 && amount <= 1.0)) throw ValidationError("impulse_noise amount outside [0,1]");
  Image out = img;
  for (auto& v : out.pixels) {
    if (rng.uniform() < amount) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  }
  return out;
}

// Overlap of pixel [j - 1/2, j + 1/2] with the box [-(radius + 1/2), radius + 1/2].
std::vector<double> box_weights(double radius) {
  const int reach = static_cast<int>(std::ceil(radius));
  std::vector<double> w(static_cast<std::size_t>(2 * reach + 1));
  for (int j = -reach; j <= reach; ++j) {
    w[static_cast<std::size_t>(j + reach)] = std::clamp(radius + 1.0 - std::abs(j), 0.0, 1.0);
  }
  return w;
}

// Separable box filter; weights renormalised over in-image taps at borders.
Image box_blur(const Image& img, double radius) {
  if (!(radius >= 0.0)) throw ValidationError("box_blur radius must be >= 0");
  if (radius == 0.0) return img;
  const auto w = box_weights(radius);
  const int reach = static_cast<int>(w.size() / 2);
  auto pass = [&](const Image& in, bool horizontal) {
    Image out(in.height, in.width, in.channels);
    const auto H = static_cast<int>(in.height), W = static_cast<int>(in.width);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        for (std::size_t c = 0; c < in.channels; ++c) {
          double acc = 0.0, norm = 0.0;
          for (int j = -reach; j <= reach; ++j) {
            const int yy = horizontal ? y : y + j;
            const int xx = horizontal ? x + j : x;
            if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
            const double wj = w[static_cast<std::size_t>(j + reach)];
            acc += wj * in.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), c);
            norm += wj;
          }
          out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = acc / norm;
        }
      }
    }
    return out;
  };
  return pass(pass(img, true), false);
}

// factor * x + (1 - factor) * channel mean
Image contrast(const Image& img, double factor) {
  Image out = img;
  const std::size_t C = img.channels, P = img.height * img.width;
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t p = 0; p < P; ++p) mean += img.pixels[p * C + c];
    mean /= static_cast<double>(P);
    for (std::size_t p = 0; p < P; ++p) {
      out.pixels[p * C + c] = factor * img.pixels[p * C + c] + (1.0 - factor) * mean;
    }
  }
  return out;
}

// Each block x block tile (clipped at the border) replaced by its mean.
Image pixelate(const Image& img, double block_param) {
  const auto block = static_cast<std::size_t>(std::lround(block_param));
  if (block < 1 || static_cast<double>(block) != block_param) {
    throw ValidationError("pixelate block size must be a positive integer");
  }
  Image out = img;
  for (std::size_t y0 = 0; y0 < img.height; y0 += block) {
    for (std::size_t x0 = 0; x0 < img.width; x0 += block) {
      const std::size_t y1 = std::min(img.height, y0 + block), x1 = std::min(img.width, x0 + block);
      const double n = static_cast<double>((y1 - y0) * (x1 - x0));
      for (std::size_t c = 0; c < img.channels; ++c) {
        double mean = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) mean += img.at(y, x, c);
        mean /= n;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) out.at(y, x, c) = mean;
      }
    }
  }
  return out;
}

std::string cell_file(const std::string& type, int severity) { return type + "_" + std::to_string(severity) + ".dcds"; }

}  // namespace

bool is_corruption_type(std::string_view type) {
  return std::find(kCorruptionTypes.begin(), kCorruptionTypes.end(), type) != kCorruptionTypes.end();
}

CorruptionTable CorruptionTable::defaults() { return parse(kDefaultTable, "<defaults>"); }

CorruptionTable CorruptionTable::parse(std::string_view text, std::string_view source) {
  CorruptionTable table;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw FormatError(std::string(source) + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string type;
    if (!(fields >> type)) continue;
    if (!is_corruption_type(type)) fail("unknown corruption type '" + type + "'");
    if (table.entries_.count(type)) fail("duplicate entry for '" + type + "'");
    std::array<double, 5> params{};
    for (auto& p : params) {
      if (!(fields >> p)) fail("'" + type + "' needs five numeric parameters");
    }
    std::string extra;
    if (fields >> extra) fail("trailing text after '" + type + "' parameters");
    const int dir = direction(type);
    for (std::size_t i = 1; i < params.size(); ++i) {
      if (dir * (params[i] - params[i - 1]) < 0) fail("'" + type + "' parameters are not monotone in severity");
    }
    table.entries_[type] = params;
  }
  if (table.entries_.empty()) throw FormatError(std::string(source) + ": no corruption entries");
  return table;
}

CorruptionTable CorruptionTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corruption table " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.string());
}

double CorruptionTable::param(std::string_view type, int severity) const {
  const auto it = entries_.find(std::string(type));
  if (it == entries_.end()) throw ValidationError("corruption type '" + std::string(type) + "' not in table");
  if (severity < 1 || severity > 5) {
    throw ValidationError("corruption severity " + std::to_string(severity) + " outside 1..5");
  }
  return it->second[static_cast<std::size_t>(severity - 1)];
}

std::vector<std::string> CorruptionTable::types() const {
  std::vector<std::string> out;
  for (const auto& [t, p] : entries_) out.push_back(t);
  return out;
}

Image corrupt_with_param(const Image& img, std::string_view type, double param, Rng& rng) {
  Image out;
  if (type == "gaussian_noise") {
    out = gaussian_noise(img, param, rng);
  } else if (type == "shot_noise") {
    out = shot_noise(img, param, rng);
  } else if (type == "impulse_noise") {
    out = impulse_noise(img, param, rng);
  } else if (type == "box_blur") {
    out = box_blur(img, param);
  } else if (type == "contrast") {
    out = contrast(img, param);
  } else if (type == "pixelate") {
    out = pixelate(img, param);
  } else {
    throw ValidationError("unknown corruption type '" + std::string(type) + "'");
  }
  clip(out);
  return out;
}

Image corrupt(const Image& img, const CorruptionSpec& spec, const CorruptionTable& table, Rng& rng) {
  if (!is_corruption_type(spec.type)) throw ValidationError("unknown corruption type '" + spec.type + "'");
  if (spec.severity == 0) return img;
  return corrupt_with_param(img, spec.type, table.param(spec.type, spec.severity), rng);
}

Rng corruption_stream(std::uint64_t seed, std::string_view type, int severity) {
  return Rng::stream(seed, "corruption").derive(type).derive(static_cast<std::uint64_t>(severity));
}

LabeledImageDataset corrupt_dataset(const LabeledImageDataset& ds, const CorruptionSpec& spec,
                                    const CorruptionTable& table, std::uint64_t seed) {
  if (!is_corruption_type(spec.type)) throw ValidationError("unknown corruption type '" + spec.type + "'");
  LabeledImageDataset out = ds;
  out.name = ds.name + "/" + spec.type + "_" + std::to_string(spec.severity);
  if (spec.severity == 0) return out;
  table.param(spec.type, spec.severity);  // validates before the parallel loop
  const Rng cell = corruption_stream(seed, spec.type, spec.severity);
  const auto n = static_cast<std::ptrdiff_t>(ds.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    Rng rng = cell.derive(idx);
    out.set_image(idx, corrupt(ds.image(idx), spec, table, rng));
  }
  return out;
}

std::vector<GridCell> build_corruption_grid(const LabeledImageDataset& test, const CorruptionTable& table,
                                            std::uint64_t seed, const std::vector<std::string>& types) {
  const std::vector<std::string> chosen = types.empty() ? table.types() : types;
  std::vector<GridCell> grid;
  for (const auto& type : chosen) {
    for (int s = 1; s <= 5; ++s) {
      grid.push_back({type, s, corrupt_dataset(test, {type, s}, table, seed)});
    }
  }
  return grid;
}

void save_grid(const std::filesystem::path& dir, const std::vector<GridCell>& grid) {
  std::filesystem::create_directories(dir);
  for (const auto& cell : grid) save_dataset(dir / cell_file(cell.type, cell.severity), cell.data);
}

std::vector<GridCell> load_grid(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("no corruption grid at " + dir.string());
  std::vector<GridCell> grid;
  for (const auto type : kCorruptionTypes) {
    for (int s = 1; s <= 5; ++s) {
      const auto path = dir / cell_file(std::string(type), s);
      if (std::filesystem::exists(path)) grid.push_back({std::string(type), s, load_dataset(path)});
    }
  }
  if (grid.empty()) throw FormatError("corruption grid directory " + dir.string() + " holds no cells");
  return grid;
}

}  // namespace dcal
