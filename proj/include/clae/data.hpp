#pragma once

// Datasets and the stochastic view pipeline.
//
// Images are stored channel-major (C, H, W) and flattened, one row per image,
// in a {N, C*H*W} tensor with values in [0, 1].

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "clae/errors.hpp"
#include "clae/rng.hpp"
#include "clae/tensor.hpp"

namespace clae {

struct ImageShape {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;

  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

struct Dataset {
  std::string name;
  ImageShape shape;
  Tensor images;  // {N, C*H*W}
  std::vector<int> labels;
  int class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::span<const double> image(std::size_t i) const { return images.row(i); }

  Tensor gather(std::span<const std::size_t> indices) const {
    require(!indices.empty(), "Dataset::gather: empty index list");
    const std::size_t width = shape.size();
    Tensor out({indices.size(), width});
    for (std::size_t r = 0; r < indices.size(); ++r) {
      auto src = image(indices[r]);
      std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * width));
    }
    return out;
  }

  std::vector<int> gather_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels[i]);
    return out;
  }
};

// --- CIFAR-10 binary layout ------------------------------------------------
// Each record: 1 label byte (0..9) then 1024 R, 1024 G, 1024 B bytes of a
// 32x32 image in row-major order.

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

// Loads records from `files` in order; `max_records` > 0 stops early.
inline Dataset load_cifar10(const std::vector<std::filesystem::path>& files,
                            std::size_t max_records = 0) {
  require(!files.empty(), "load_cifar10: no files given");
  std::vector<double> pixels;
  std::vector<int> labels;
  for (const auto& file : files) {
    if (max_records > 0 && labels.size() >= max_records) break;
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open CIFAR-10 file " + file.string());
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                           std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % kCifarRecord != 0)
      throw FormatError(file.string() + ": length " + std::to_string(bytes.size()) +
                        " is not a positive multiple of " + std::to_string(kCifarRecord));
    const std::size_t records = bytes.size() / kCifarRecord;
    for (std::size_t r = 0; r < records; ++r) {
      if (max_records > 0 && labels.size() >= max_records) break;
      const unsigned char* rec = bytes.data() + r * kCifarRecord;
      if (rec[0] > 9)
        throw FormatError(file.string() + ": record " + std::to_string(r) + " has label " +
                          std::to_string(rec[0]));
      labels.push_back(rec[0]);
      for (std::size_t k = 0; k < kCifarPixels; ++k) pixels.push_back(rec[1 + k] / 255.0);
    }
  }
  Dataset ds;
  ds.name = "cifar10";
  ds.shape = ImageShape{3, 32, 32};
  ds.images = Tensor({labels.size(), kCifarPixels}, std::move(pixels));
  ds.labels = std::move(labels);
  ds.class_count = 10;
  return ds;
}

inline Dataset load_cifar10(const std::filesystem::path& file, std::size_t max_records = 0) {
  return load_cifar10(std::vector<std::filesystem::path>{file}, max_records);
}

// Batch files of a split under `root` (either the extracted
// cifar-10-batches-bin directory or its parent).
inline std::vector<std::filesystem::path> cifar10_split_files(const std::filesystem::path& root,
                                                              bool train) {
  std::filesystem::path dir = root;
  if (std::filesystem::exists(root / "cifar-10-batches-bin")) dir = root / "cifar-10-batches-bin";
  std::vector<std::filesystem::path> files;
  if (train)
    for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  else
    files.push_back(dir / "test_batch.bin");
  return files;
}

// Writes `ds` in the CIFAR-10 record layout, quantizing pixels to bytes.
inline void write_cifar10(const std::filesystem::path& file, const Dataset& ds) {
  require(ds.shape == (ImageShape{3, 32, 32}), "write_cifar10: images must be 3x32x32");
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  std::vector<char> rec(kCifarRecord);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    require(ds.labels[i] >= 0 && ds.labels[i] <= 9, "write_cifar10: label out of range");
    rec[0] = static_cast<char>(ds.labels[i]);
    auto img = ds.image(i);
    for (std::size_t k = 0; k < kCifarPixels; ++k)
      rec[1 + k] = static_cast<char>(
          static_cast<unsigned char>(std::lround(std::clamp(img[k], 0.0, 1.0) * 255.0)));
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  if (!out) throw IoError("short write to " + file.string());
}

// --- Synthetic shapes ------------------------------------------------------

struct SyntheticSpec {
  int classes = 10;
  std::size_t per_class = 500;
  ImageShape shape{3, 16, 16};
  double noise = 0.05;
};

namespace detail {

inline std::array<double, 3> hue_to_rgb(double hue) {
  const double h = 6.0 * (hue - std::floor(hue));
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  switch (sector) {
    case 0: return {1.0, f, 0.0};
    case 1: return {1.0 - f, 1.0, 0.0};
    case 2: return {0.0, 1.0, f};
    case 3: return {0.0, 1.0 - f, 1.0};
    case 4: return {f, 0.0, 1.0};
    default: return {1.0, 0.0, 1.0 - f};
  }
}

// Noise-free template of class k: a square, disc or bar (k mod 3) in a
// class-specific hue, centred on one cell of a 3x3 grid.
inline std::vector<double> class_template(int k, int classes, const ImageShape& shape) {
  const std::size_t H = shape.height, W = shape.width, C = shape.channels;
  std::vector<double> img(shape.size(), 0.0);
  const auto rgb = hue_to_rgb(static_cast<double>(k) / classes);
  const double cy = (static_cast<double>((k / 3) % 3) + 1.0) * H / 4.0;
  const double cx = (static_cast<double>(k % 3) + 1.0) * W / 4.0;
  const double r = std::max(2.0, std::min(H, W) / 5.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      bool inside = false;
      switch (k % 3) {
        case 0: inside = std::abs(dy) <= r && std::abs(dx) <= r; break;
        case 1: inside = dy * dy + dx * dx <= r * r; break;
        default: inside = std::abs(dy) <= r / 2.5 && std::abs(dx) <= 1.8 * r; break;
      }
      if (!inside) continue;
      for (std::size_t c = 0; c < C; ++c)
        img[(c * H + y) * W + x] = C == 3 ? rgb[c] : 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    }
  return img;
}

}  // namespace detail

// Image i has label i mod classes. Templates depend only on (class, shape);
// the seed drives the additive uniform noise in [-noise, noise].
inline Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  require(spec.classes >= 2, "make_synthetic: need at least 2 classes");
  require(spec.per_class >= 1, "make_synthetic: per_class must be >= 1");
  require(spec.noise >= 0.0, "make_synthetic: noise must be >= 0");
  std::vector<std::vector<double>> templates;
  for (int k = 0; k < spec.classes; ++k)
    templates.push_back(detail::class_template(k, spec.classes, spec.shape));
  Rng rng = Rng::stream(seed, "synthetic");
  const std::size_t n = spec.per_class * static_cast<std::size_t>(spec.classes);
  const std::size_t width = spec.shape.size();
  Dataset ds;
  ds.name = "synthetic";
  ds.shape = spec.shape;
  ds.class_count = spec.classes;
  ds.images = Tensor({n, width});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(spec.classes));
    ds.labels[i] = label;
    auto row = ds.images.row(i);
    for (std::size_t j = 0; j < width; ++j) {
      const double v = templates[label][j] + (spec.noise > 0.0 ? rng.uniform(-spec.noise, spec.noise) : 0.0);
      row[j] = std::clamp(v, 0.0, 1.0);
    }
  }
  return ds;
}

// --- Augmentation ----------------------------------------------------------

struct AugmentPolicy {
  bool crop = true;
  std::size_t pad = 4;
  bool flip = true;
  double hflip_prob = 0.5;
  bool jitter = true;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  bool grayscale = true;
  double grayscale_prob = 0.1;
  bool rotation = false;  // random multiple of 90 degrees, square images only

  static AugmentPolicy identity() {
    AugmentPolicy p;
    p.crop = p.flip = p.jitter = p.grayscale = p.rotation = false;
    return p;
  }

  void validate() const {
    require(hflip_prob >= 0.0 && hflip_prob <= 1.0, "augment.hflip_prob must be in [0,1]");
    require(grayscale_prob >= 0.0 && grayscale_prob <= 1.0,
            "augment.grayscale_prob must be in [0,1]");
    require(brightness >= 0.0 && contrast >= 0.0 && saturation >= 0.0,
            "augment jitter ranges must be >= 0");
  }
};

// Concrete draw of every random choice of one augmentation.
struct AugmentParams {
  std::size_t crop_x = 0;  // offset into the padded image
  std::size_t crop_y = 0;
  bool flip = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  bool grayscale = false;
  int quarter_turns = 0;
};

// Consumes exactly 8 draws from `rng` whatever the policy enables.
inline AugmentParams sample_augment(const AugmentPolicy& policy, Rng& rng) {
  AugmentParams p;
  const std::size_t span = 2 * policy.pad + 1;
  p.crop_x = rng.index(span);
  p.crop_y = rng.index(span);
  p.flip = rng.uniform() < policy.hflip_prob;
  p.brightness = rng.uniform(std::max(0.0, 1.0 - policy.brightness), 1.0 + policy.brightness);
  p.contrast = rng.uniform(std::max(0.0, 1.0 - policy.contrast), 1.0 + policy.contrast);
  p.saturation = rng.uniform(std::max(0.0, 1.0 - policy.saturation), 1.0 + policy.saturation);
  p.grayscale = rng.uniform() < policy.grayscale_prob;
  p.quarter_turns = static_cast<int>(rng.index(4));
  return p;
}

namespace detail {

inline double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

}  // namespace detail

// Applies, in order: pad-and-crop, horizontal flip, rotation, color jitter
// (brightness, contrast, saturation), grayscale. Disabled stages are skipped.
inline std::vector<double> apply_augment(std::span<const double> image, const ImageShape& shape,
                                         const AugmentPolicy& policy,
                                         const AugmentParams& params) {
  require(image.size() == shape.size(), "augment: image size does not match its shape");
  const std::size_t C = shape.channels, H = shape.height, W = shape.width;
  std::vector<double> img(image.begin(), image.end());
  auto at = [&](std::vector<double>& v, std::size_t c, std::size_t y, std::size_t x) -> double& {
    return v[(c * H + y) * W + x];
  };

  if (policy.crop && policy.pad > 0) {
    require(params.crop_x <= 2 * policy.pad && params.crop_y <= 2 * policy.pad,
            "augment: crop offset outside the padded image");
    std::vector<double> out(img.size(), 0.0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const long sy = static_cast<long>(y + params.crop_y) - static_cast<long>(policy.pad);
          const long sx = static_cast<long>(x + params.crop_x) - static_cast<long>(policy.pad);
          if (sy >= 0 && sx >= 0 && sy < static_cast<long>(H) && sx < static_cast<long>(W))
            at(out, c, y, x) = at(img, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
        }
    img = std::move(out);
  }

  if (policy.flip && params.flip) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W / 2; ++x) std::swap(at(img, c, y, x), at(img, c, y, W - 1 - x));
  }

  if (policy.rotation && params.quarter_turns % 4 != 0) {
    require(H == W, "augment: rotation needs square images");
    for (int turn = 0; turn < params.quarter_turns % 4; ++turn) {
      std::vector<double> out(img.size());
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) at(out, c, x, W - 1 - y) = at(img, c, y, x);
      img = std::move(out);
    }
  }

  const std::size_t plane = H * W;
  auto clamp_all = [&img] {
    for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  };
  auto gray_at = [&](std::size_t k) {
    return C == 3 ? detail::luminance(img[k], img[plane + k], img[2 * plane + k]) : img[k];
  };

  if (policy.jitter) {
    for (double& v : img) v *= params.brightness;
    clamp_all();
    double m = 0.0;
    for (std::size_t k = 0; k < plane; ++k) m += gray_at(k);
    m /= static_cast<double>(plane);
    for (double& v : img) v = (v - m) * params.contrast + m;
    clamp_all();
    if (C == 3) {
      for (std::size_t k = 0; k < plane; ++k) {
        const double g = gray_at(k);
        for (std::size_t c = 0; c < 3; ++c)
          img[c * plane + k] = (img[c * plane + k] - g) * params.saturation + g;
      }
      clamp_all();
    }
  }

  if (policy.grayscale && params.grayscale && C == 3) {
    for (std::size_t k = 0; k < plane; ++k) {
      const double g = std::clamp(gray_at(k), 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) img[c * plane + k] = g;
    }
  }
  return img;
}

inline std::vector<double> augment(std::span<const double> image, const ImageShape& shape,
                                   const AugmentPolicy& policy, Rng& rng) {
  const AugmentParams params = sample_augment(policy, rng);
  return apply_augment(image, shape, policy, params);
}

// One augmented view of every row of `batch`.
inline Tensor augment_batch(const Tensor& batch, const ImageShape& shape,
                            const AugmentPolicy& policy, Rng& rng) {
  Tensor out(batch.shape());
  const std::size_t width = shape.size();
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    const std::vector<double> view = augment(batch.row(i), shape, policy, rng);
    std::copy(view.begin(), view.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return out;
}

}  // namespace clae
