#pragma once

// Image datasets: binary PPM files in class folders, and a synthetic
// two-class task that separates small blobs from large ones.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "smt/io.hpp"
#include "smt/rng.hpp"
#include "smt/tensor.hpp"

namespace smt {

struct Normalization {
  std::array<float, 3> mean{0.5f, 0.5f, 0.5f};
  std::array<float, 3> std{0.25f, 0.25f, 0.25f};
};

struct RgbImage {
  Index height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB
};

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)
// ---------------------------------------------------------------------------

namespace detail {

inline void skip_ppm_space(std::string_view b, std::size_t& pos) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(b[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
}

inline Index read_ppm_int(std::string_view b, std::size_t& pos, const char* what) {
  skip_ppm_space(b, pos);
  const std::size_t start = pos;
  Index v = 0;
  while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
    v = v * 10 + (b[pos] - '0');
    if (v > (Index{1} << 24)) throw ParseError(std::string("PPM ") + what + " is too large", start);
    ++pos;
  }
  if (pos == start) throw ParseError(std::string("PPM header: expected ") + what, start);
  return v;
}

}  // namespace detail

inline RgbImage decode_ppm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes.substr(0, 2) != "P6") throw ParseError("not a binary PPM (expected magic P6)", 0);
  std::size_t pos = 2;
  RgbImage img;
  img.width = detail::read_ppm_int(bytes, pos, "width");
  img.height = detail::read_ppm_int(bytes, pos, "height");
  const std::size_t maxval_at = pos;
  const Index maxval = detail::read_ppm_int(bytes, pos, "maxval");
  if (img.width < 1 || img.height < 1) throw ParseError("PPM image has zero extent", maxval_at);
  if (maxval != 255) throw ParseError("PPM maxval must be 255, got " + std::to_string(maxval), maxval_at);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw ParseError("PPM header must end with one whitespace byte", pos);
  ++pos;
  const std::size_t need = static_cast<std::size_t>(img.width * img.height * 3);
  if (bytes.size() - pos < need)
    throw ParseError("PPM pixel data truncated: need " + std::to_string(need) + " bytes, have " + std::to_string(bytes.size() - pos),
                     bytes.size());
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

inline std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline RgbImage read_ppm(const std::filesystem::path& path) {
  try {
    return decode_ppm(io::read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

inline void write_ppm(const std::filesystem::path& path, const RgbImage& img) { io::atomic_write(path, encode_ppm(img)); }

/// [H, W, 3] in [0, 1], before normalization.
inline Tensor<float> ppm_to_unit(const RgbImage& img) {
  Tensor<float> t(Shape{img.height, img.width, 3});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[static_cast<Index>(i)] = static_cast<float>(img.pixels[i]) / 255.0f;
  return t;
}

inline void normalize_in_place(std::span<float> hwc, const Normalization& n) {
  for (std::size_t i = 0; i < hwc.size(); ++i) hwc[i] = (hwc[i] - n.mean[i % 3]) / n.std[i % 3];
}

/// [1, H, W, 3], normalized; the form the model consumes.
inline Tensor<float> load_ppm(const std::filesystem::path& path, const Normalization& n = {}) {
  auto unit = ppm_to_unit(read_ppm(path));
  normalize_in_place(unit.data(), n);
  return Tensor<float>(Shape{1, unit.dim(0), unit.dim(1), 3}, std::vector<float>(unit.data().begin(), unit.data().end()));
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Normalized images packed back to back.
struct Dataset {
  Index height = 0, width = 0;
  static constexpr Index channels = 3;
  std::vector<float> pixels;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::string split;
  Normalization norm;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index num_classes() const { return static_cast<Index>(class_names.size()); }
  Index image_size() const { return height * width * channels; }
  std::span<const float> image(Index i) const {
    return std::span<const float>(pixels).subspan(static_cast<std::size_t>(i * image_size()), static_cast<std::size_t>(image_size()));
  }

  /// Stacks `indices` into [B, H, W, 3]; `flip[i]` mirrors sample i
  /// horizontally.
  template <typename T>
  Tensor<T> batch(const std::vector<Index>& indices, const std::vector<bool>& flip = {}) const {
    Tensor<T> out(Shape{static_cast<Index>(indices.size()), height, width, channels});
    T* dst = out.ptr();
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const auto src = image(indices[b]);
      const bool mirror = !flip.empty() && flip[b];
      for (Index y = 0; y < height; ++y)
        for (Index x = 0; x < width; ++x) {
          const Index sx = mirror ? width - 1 - x : x;
          for (Index c = 0; c < channels; ++c)
            *dst++ = static_cast<T>(src[static_cast<std::size_t>((y * width + sx) * channels + c)]);
        }
    }
    return out;
  }

  std::vector<int> batch_labels(const std::vector<Index>& indices) const {
    std::vector<int> out;
    for (Index i : indices) out.push_back(labels[static_cast<std::size_t>(i)]);
    return out;
  }
};

/// root/<class>/<file>.ppm; classes indexed in sorted name order, files read
/// in sorted order.
inline Dataset load_dataset_dir(const std::filesystem::path& root, const Normalization& norm = {}, std::string split = "") {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DatasetError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw DatasetError("dataset root " + root.string() + " has no class directories");
  Dataset ds;
  ds.norm = norm;
  ds.split = std::move(split);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[k]))
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DatasetError("class directory " + classes[k].string() + " contains no .ppm files");
    ds.class_names.push_back(classes[k].filename().string());
    for (const auto& f : files) {
      auto unit = ppm_to_unit(read_ppm(f));
      if (ds.labels.empty()) {
        ds.height = unit.dim(0);
        ds.width = unit.dim(1);
      } else if (unit.dim(0) != ds.height || unit.dim(1) != ds.width) {
        throw DatasetError(f.string() + " is " + std::to_string(unit.dim(1)) + "x" + std::to_string(unit.dim(0)) +
                           ", expected " + std::to_string(ds.width) + "x" + std::to_string(ds.height));
      }
      normalize_in_place(unit.data(), norm);
      ds.pixels.insert(ds.pixels.end(), unit.data().begin(), unit.data().end());
      ds.labels.push_back(static_cast<int>(k));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic scale discrimination
// ---------------------------------------------------------------------------

struct Blob {
  double cy = 0, cx = 0, radius = 0, amplitude = 0;
  std::array<double, 3> color{};
};

struct SynthOptions {
  Index size = 64;
  std::array<double, 2> radii{2.0, 8.0};
  // Class 1 draws 1..3 large blobs; class 0 draws 16x as many small ones,
  // so the expected blob mass (and mean brightness) is the same.
  Index large_min = 1, large_max = 3;
  double noise_std = 0.04;
};

struct SynthDataset {
  Dataset data;
  std::vector<std::vector<Blob>> blobs;  // per image, for generator checks
};

/// Gaussian blobs (sigma = radius) over a random grey background with pixel
/// noise. Every image is a pure function of (seed, index).
inline SynthDataset synth_dataset(std::uint64_t seed, Index n_per_class, const SynthOptions& opt = {}, const Normalization& norm = {}) {
  if (n_per_class < 1) throw DatasetError("synthetic dataset needs at least 1 image per class, got " + std::to_string(n_per_class));
  SynthDataset out;
  auto& ds = out.data;
  ds.height = ds.width = opt.size;
  ds.class_names = {"small", "large"};
  ds.split = "synth";
  ds.norm = norm;
  const Index n = 2 * n_per_class, hw = opt.size * opt.size;
  ds.pixels.resize(static_cast<std::size_t>(n * hw * 3));
  ds.labels.resize(static_cast<std::size_t>(n));
  out.blobs.resize(static_cast<std::size_t>(n));
  std::vector<double> canvas(static_cast<std::size_t>(hw * 3));
  for (Index i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);  // classes alternate
    Rng rng(mix_seed({seed, 0x73796e7468ULL, static_cast<std::uint64_t>(i)}));
    const double bg = rng.uniform(0.1, 0.45);
    for (auto& v : canvas) v = bg + opt.noise_std * rng.normal();
    const Index large = opt.large_min + static_cast<Index>(rng.below(static_cast<std::uint64_t>(opt.large_max - opt.large_min + 1)));
    const Index count = label == 1 ? large : 16 * large;
    const double r = opt.radii[static_cast<std::size_t>(label)];
    auto& blobs = out.blobs[static_cast<std::size_t>(i)];
    for (Index b = 0; b < count; ++b) {
      Blob blob;
      blob.radius = r;
      blob.cy = rng.uniform(0, static_cast<double>(opt.size));
      blob.cx = rng.uniform(0, static_cast<double>(opt.size));
      blob.amplitude = rng.uniform(0.3, 0.6);
      for (auto& c : blob.color) c = rng.uniform(0.5, 1.0);
      blobs.push_back(blob);
      const Index reach = static_cast<Index>(std::ceil(3 * r));
      const Index y0 = std::max<Index>(0, static_cast<Index>(blob.cy) - reach), y1 = std::min(opt.size - 1, static_cast<Index>(blob.cy) + reach);
      const Index x0 = std::max<Index>(0, static_cast<Index>(blob.cx) - reach), x1 = std::min(opt.size - 1, static_cast<Index>(blob.cx) + reach);
      for (Index y = y0; y <= y1; ++y)
        for (Index x = x0; x <= x1; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - blob.cy, dx = static_cast<double>(x) + 0.5 - blob.cx;
          const double g = blob.amplitude * std::exp(-(dy * dy + dx * dx) / (2 * r * r));
          for (int c = 0; c < 3; ++c) canvas[static_cast<std::size_t>((y * opt.size + x) * 3 + c)] += g * blob.color[static_cast<std::size_t>(c)];
        }
    }
    float* dst = ds.pixels.data() + i * hw * 3;
    for (Index p = 0; p < hw * 3; ++p) {
      const double v = std::clamp(canvas[static_cast<std::size_t>(p)], 0.0, 1.0);
      dst[p] = static_cast<float>((v - norm.mean[static_cast<std::size_t>(p % 3)]) / norm.std[static_cast<std::size_t>(p % 3)]);
    }
    ds.labels[static_cast<std::size_t>(i)] = label;
  }
  return out;
}

/// Unnormalized 8-bit rendering of dataset image `i` (for PPM export).
inline RgbImage to_rgb(const Dataset& ds, Index i) {
  RgbImage img;
  img.height = ds.height;
  img.width = ds.width;
  const auto src = ds.image(i);
  for (std::size_t p = 0; p < src.size(); ++p) {
    const double v = static_cast<double>(src[p]) * ds.norm.std[p % 3] + ds.norm.mean[p % 3];
    img.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return img;
}

}  // namespace smt
