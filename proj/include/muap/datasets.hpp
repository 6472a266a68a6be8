// SPDX-License-Identifier: Apache-2.0
//
// Labeled image sources: IDX (MNIST layout) and CIFAR-10 binary readers, and
// a seeded synthetic generator. Pixels are always scaled to [0, 1].
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "muap/error.hpp"
#include "muap/rng.hpp"
#include "muap/tensor.hpp"

namespace muap {

struct ImageShape {
  std::size_t channels = 1, height = 28, width = 28;

  std::size_t numel() const noexcept { return channels * height * width; }
  Shape as_shape() const { return {channels, height, width}; }
  std::string str() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// A batch of images (N, C, H, W) sharing one shape, with integer labels.
struct LabeledImages {
  Tensor images;
  std::vector<int> labels;
  std::string source_id;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  ImageShape shape() const { return {images.size(1), images.size(2), images.size(3)}; }

  /// Pixels of image i, row-major over (C, H, W).
  std::span<const float> image(std::size_t i) const {
    const std::size_t n = shape().numel();
    return images.data().subspan(i * n, n);
  }

  LabeledImages subset(std::span<const std::size_t> idx) const {
    if (idx.empty()) throw InvalidArgument("subset of zero images");
    const std::size_t n = shape().numel();
    std::vector<float> px;
    px.reserve(idx.size() * n);
    std::vector<int> ys;
    ys.reserve(idx.size());
    for (std::size_t i : idx) {
      if (i >= size()) throw InvalidArgument("subset index " + std::to_string(i) + " out of range");
      auto im = image(i);
      px.insert(px.end(), im.begin(), im.end());
      ys.push_back(labels[i]);
    }
    const ImageShape s = shape();
    return {Tensor({idx.size(), s.channels, s.height, s.width}, std::move(px)), std::move(ys), source_id, num_classes};
  }

  /// Indices of every image with label c, in file order.
  std::vector<std::size_t> indices_of(int c) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) out.push_back(i);
    return out;
  }
};

/// Concatenation of two sets of the same shape (support ∪ query and similar).
inline LabeledImages merge(const LabeledImages& a, const LabeledImages& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("cannot merge image sets of shape " + a.shape().str() + " and " + b.shape().str());
  }
  std::vector<float> px(a.images.vec());
  px.insert(px.end(), b.images.vec().begin(), b.images.vec().end());
  std::vector<int> ys(a.labels);
  ys.insert(ys.end(), b.labels.begin(), b.labels.end());
  const ImageShape s = a.shape();
  return {Tensor({ys.size(), s.channels, s.height, s.width}, std::move(px)), std::move(ys), a.source_id,
          std::max(a.num_classes, b.num_classes)};
}

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataFormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

}  // namespace detail

/// Reads an IDX image file (magic 0x00000803) and its label file
/// (0x00000801). Labels must lie in [0, 255]; the class count is
/// max label + 1.
inline LabeledImages load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                              std::string source_id = "mnist") {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  if (img.size() < 16 || detail::be32(img, 0) != 0x00000803u) {
    throw DataFormatError(images_path.string() + ": not an IDX image file (bad magic)");
  }
  if (lab.size() < 8 || detail::be32(lab, 0) != 0x00000801u) {
    throw DataFormatError(labels_path.string() + ": not an IDX label file (bad magic)");
  }
  const std::size_t n = detail::be32(img, 4), rows = detail::be32(img, 8), cols = detail::be32(img, 12);
  const std::size_t nl = detail::be32(lab, 4);
  if (n != nl) {
    throw DataFormatError("dimension mismatch: " + std::to_string(n) + " images but " + std::to_string(nl) +
                          " labels");
  }
  if (n == 0 || rows == 0 || cols == 0) throw DataFormatError(images_path.string() + ": empty image set");
  if (img.size() != 16 + n * rows * cols) {
    throw DataFormatError(images_path.string() + ": truncated or oversized payload, expected " +
                          std::to_string(16 + n * rows * cols) + " bytes, found " + std::to_string(img.size()));
  }
  if (lab.size() != 8 + n) {
    throw DataFormatError(labels_path.string() + ": truncated or oversized payload, expected " +
                          std::to_string(8 + n) + " bytes, found " + std::to_string(lab.size()));
  }
  std::vector<float> px(n * rows * cols);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(img[16 + i]) / 255.0f;
  std::vector<int> ys(n);
  int top = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ys[i] = lab[8 + i];
    top = std::max(top, ys[i]);
  }
  return {Tensor({n, 1, rows, cols}, std::move(px)), std::move(ys), std::move(source_id),
          static_cast<std::size_t>(std::max(top + 1, 2))};
}

inline constexpr std::size_t kCifarRecord = 3073;

/// Reads CIFAR-10 binary batches: 3073-byte records of one label byte and
/// 3072 channel-major pixel bytes. Files are concatenated in the given order.
inline LabeledImages load_cifar10_bin(const std::vector<std::filesystem::path>& paths,
                                      std::string source_id = "cifar10") {
  if (paths.empty()) throw DataFormatError("no CIFAR-10 files given");
  std::vector<float> px;
  std::vector<int> ys;
  for (const auto& p : paths) {
    const auto bytes = detail::read_file(p);
    if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
      throw DataFormatError(p.string() + ": length " + std::to_string(bytes.size()) +
                            " is not a positive multiple of 3073");
    }
    for (std::size_t r = 0; r < bytes.size() / kCifarRecord; ++r) {
      const std::size_t at = r * kCifarRecord;
      if (bytes[at] > 9) {
        throw DataFormatError(p.string() + ": record " + std::to_string(r) + " has invalid label " +
                              std::to_string(bytes[at]));
      }
      ys.push_back(bytes[at]);
      for (std::size_t j = 1; j < kCifarRecord; ++j) px.push_back(static_cast<float>(bytes[at + j]) / 255.0f);
    }
  }
  const std::size_t n = ys.size();
  return {Tensor({n, 3, 32, 32}, std::move(px)), std::move(ys), std::move(source_id), 10};
}

/// Appearance of the synthetic source. Each class is an oriented sinusoidal
/// grating; every image gets its own random phase offset in
/// [-phase_jitter, phase_jitter] and additive Gaussian pixel noise.
struct SynthStyle {
  double noise_sigma = 0.08;
  double phase_jitter = 2.0;
  double contrast = 3.0;
};

inline std::string synth_source_id(const ImageShape& s) {
  return "synth_" + std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

/// Deterministic synthetic source: n_per_class images per class, ordered by
/// class.
inline LabeledImages synth_source(const ImageShape& shape, std::size_t num_classes, std::size_t n_per_class,
                                  std::uint64_t seed, const SynthStyle& style = {}) {
  if (num_classes < 2) throw InvalidArgument("synthetic source needs at least 2 classes");
  if (n_per_class == 0) throw InvalidArgument("synthetic source needs at least 1 image per class");
  const std::size_t C = shape.channels, H = shape.height, W = shape.width;
  const std::size_t n = num_classes * n_per_class;
  Rng rng(seed);
  std::vector<float> px(n * shape.numel());
  std::vector<int> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i / n_per_class;
    ys[i] = static_cast<int>(c);
    const double ang = std::numbers::pi * static_cast<double>(c) / static_cast<double>(num_classes);
    const double freq = 1.5 + static_cast<double>(c % 3);
    const double jitter = rng.uniform(-style.phase_jitter, style.phase_jitter);
    const double ca = std::cos(ang), sa = std::sin(ang);
    for (std::size_t ch = 0; ch < C; ++ch) {
      const double ph = 1.3 * static_cast<double>(ch) + 0.9 * static_cast<double>(c) + jitter;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double t = static_cast<double>(x) * ca + static_cast<double>(y) * sa;
          const double v = 0.5 + 0.5 * style.contrast *
                                     std::sin(2.0 * std::numbers::pi * freq * t / static_cast<double>(W) + ph);
          px[((i * C + ch) * H + y) * W + x] = static_cast<float>(v);
        }
    }
  }
  for (float& v : px) v = static_cast<float>(std::clamp(v + style.noise_sigma * rng.normal(), 0.0, 1.0));
  return {Tensor({n, C, H, W}, std::move(px)), std::move(ys), synth_source_id(shape), num_classes};
}

}  // namespace muap
