// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0
//
// Datasets: the CIFAR-10 binary format, synthetic generators and the
// flip/translate augmentation.

#ifndef TAPEPROP_DATA_IO_HPP
#define TAPEPROP_DATA_IO_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tapeprop/errors.hpp"
#include "tapeprop/random.hpp"
#include "tapeprop/tensor.hpp"

namespace tapeprop {

struct Dataset {
  Tensor<float> images;  // (N,C,H,W) or (N,D)
  std::vector<int> labels;
  std::size_t classes = 10;
  // Per-channel constants applied as (x - mean) / stddev; empty if raw.
  ChannelVector<double> mean, stddev;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const {
    return Shape(images.shape().begin() + 1, images.shape().end());
  }
  std::size_t sample_numel() const { return images.numel() / std::max<std::size_t>(size(), 1); }

  /// Copies the listed samples into `out` (shape (idx.size(), ...)).
  template <Real T>
  void gather(std::span<const std::size_t> idx, Tensor<T>& out, std::vector<int>& out_labels) const {
    Shape s = images.shape();
    s[0] = idx.size();
    out.reshape(s);
    out_labels.resize(idx.size());
    const std::size_t m = sample_numel();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= size()) throw DataError("sample index " + std::to_string(idx[i]) + " out of range");
      const float* src = images.data() + idx[i] * m;
      std::transform(src, src + m, out.data() + i * m, [](float v) { return static_cast<T>(v); });
      out_labels[i] = labels[idx[i]];
    }
  }

  /// First `n` samples.
  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    Dataset d;
    d.classes = classes;
    d.mean = mean;
    d.stddev = stddev;
    Shape s = images.shape();
    s[0] = n;
    const std::size_t m = sample_numel();
    d.images = Tensor<float>(s, std::vector<float>(images.data(), images.data() + n * m));
    d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    return d;
  }
};

/// Throws DataError if labels and images disagree.
inline void check_dataset(const Dataset& d) {
  if (d.images.empty() || d.images.batch() != d.labels.size()) {
    throw DataError("dataset has " + std::to_string(d.labels.size()) + " labels for images " +
                    to_string(d.images.shape()));
  }
  for (int l : d.labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= d.classes) {
      throw DataError("label " + std::to_string(l) + " outside [0," + std::to_string(d.classes) + ")");
    }
  }
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

/// Raw records of one batch file: pixels scaled to [0,1], no standardization.
/// `limit` caps the number of records read.
inline Dataset read_cifar10_file(const std::filesystem::path& path,
                                 std::optional<std::size_t> limit = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                      " is not a positive multiple of " + std::to_string(kCifarRecord));
  }
  std::size_t n = bytes.size() / kCifarRecord;
  if (limit) n = std::min(n, *limit);
  Dataset d;
  d.classes = 10;
  d.labels.resize(n);
  d.images = Tensor<float>(Shape{n, 3, kCifarSide, kCifarSide});
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] > 9) {
      throw FormatError(path.string() + ": record " + std::to_string(r) + " has label " +
                        std::to_string(rec[0]));
    }
    d.labels[r] = rec[0];
    float* dst = d.images.data() + r * kCifarPixels;
    for (std::size_t i = 0; i < kCifarPixels; ++i) dst[i] = static_cast<float>(rec[1 + i]) / 255.0f;
  }
  return d;
}

/// Per-channel mean and population standard deviation, accumulated in double.
inline void compute_standardization(const Dataset& d, ChannelVector<double>& mean,
                                    ChannelVector<double>& stddev) {
  const Moments m = channel_moments(d.images);
  mean = m.mean;
  stddev.resize(m.var.size());
  for (std::size_t c = 0; c < m.var.size(); ++c) stddev[c] = std::sqrt(std::max(m.var[c], 1e-12));
}

/// Applies (x - mean) / stddev per channel and records the constants.
inline void apply_standardization(Dataset& d, const ChannelVector<double>& mean,
                                  const ChannelVector<double>& stddev) {
  const std::size_t N = d.images.batch(), C = d.images.channels(), P = d.images.plane();
  if (mean.size() != C || stddev.size() != C) {
    throw DataError("standardization constants for " + std::to_string(mean.size()) +
                    " channels, data has " + std::to_string(C));
  }
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      float* p = d.images.data() + (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i)
        p[i] = static_cast<float>((static_cast<double>(p[i]) - mean[c]) / stddev[c]);
    }
  d.mean = mean;
  d.stddev = stddev;
}

/// Training split from data_batch_1.bin ... data_batch_5.bin, standardized
/// with constants computed from the loaded records.
inline Dataset load_cifar10(const std::filesystem::path& dir,
                            std::optional<std::size_t> limit = std::nullopt) {
  Dataset all;
  all.classes = 10;
  std::vector<float> pixels;
  for (int b = 1; b <= 5; ++b) {
    const std::size_t have = all.labels.size();
    if (limit && have >= *limit) break;
    std::optional<std::size_t> rest;
    if (limit) rest = *limit - have;
    const auto part = read_cifar10_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), rest);
    pixels.insert(pixels.end(), part.images.values().begin(), part.images.values().end());
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
  }
  all.images = Tensor<float>(Shape{all.labels.size(), 3, kCifarSide, kCifarSide}, std::move(pixels));
  ChannelVector<double> mean, stddev;
  compute_standardization(all, mean, stddev);
  apply_standardization(all, mean, stddev);
  return all;
}

/// Test split (test_batch.bin), standardized with the training constants.
inline Dataset load_cifar10_test(const std::filesystem::path& dir, const Dataset& train) {
  Dataset d = read_cifar10_file(dir / "test_batch.bin");
  apply_standardization(d, train.mean, train.stddev);
  return d;
}

/// Writes records in the CIFAR-10 binary layout. `pixels` holds 3072 bytes
/// per label, channel-major.
inline void write_cifar10_file(const std::filesystem::path& path, std::span<const std::uint8_t> labels,
                               std::span<const std::uint8_t> pixels) {
  if (pixels.size() != labels.size() * kCifarPixels) {
    throw DataError("expected " + std::to_string(labels.size() * kCifarPixels) + " pixel bytes, got " +
                    std::to_string(pixels.size()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    out.put(static_cast<char>(labels[r]));
    out.write(reinterpret_cast<const char*>(pixels.data() + r * kCifarPixels),
              static_cast<std::streamsize>(kCifarPixels));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Gaussian clusters with unit noise. Class centers sit `separation` apart:
/// scaled coordinate axes when the dimension allows, otherwise random
/// directions of norm separation/sqrt(2). Labels are balanced and shuffled.
inline Dataset synth_blobs(std::uint64_t seed, std::size_t n, std::size_t classes, const Shape& shape,
                           double separation = 10.0) {
  if (classes == 0 || n < classes) throw DataError("synth_blobs needs n >= classes > 0");
  if (shape.size() != 1 && shape.size() != 3) throw DataError("sample shape must be {D} or {C,H,W}");
  const std::size_t dim = shape_numel(shape);
  Rng rng(seed);
  std::vector<std::vector<double>> centers(classes, std::vector<double>(dim, 0.0));
  const double r = separation / std::numbers::sqrt2;
  for (std::size_t k = 0; k < classes; ++k) {
    if (dim >= classes) {
      centers[k][k] = r;
    } else {
      double norm = 0.0;
      for (auto& v : centers[k]) {
        v = rng.normal();
        norm += v * v;
      }
      for (auto& v : centers[k]) v *= r / std::sqrt(norm);
    }
  }
  Dataset d;
  d.classes = classes;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(i % classes);
  rng.shuffle(d.labels.begin(), d.labels.end());
  Shape s{n};
  s.insert(s.end(), shape.begin(), shape.end());
  d.images = Tensor<float>(s);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = centers[static_cast<std::size_t>(d.labels[i])];
    float* x = d.images.data() + i * dim;
    for (std::size_t j = 0; j < dim; ++j) x[j] = static_cast<float>(c[j] + rng.normal());
  }
  return d;
}

/// CIFAR-shaped stand-in data as raw bytes: each class has a smooth colour
/// template built from a few random low-frequency waves; samples shift it
/// by up to 4 pixels, scale its contrast, and add pixel noise.
struct SynthImages {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // kCifarPixels per sample
};

inline SynthImages synth_cifar_like(std::uint64_t seed, std::size_t n, double noise = 48.0) {
  constexpr std::size_t kClasses = 10, kWaves = 3, S = kCifarSide;
  Rng rng(seed);
  std::vector<double> templ(kClasses * kCifarPixels);
  for (std::size_t k = 0; k < kClasses; ++k)
    for (std::size_t c = 0; c < 3; ++c) {
      double fx[kWaves], fy[kWaves], ph[kWaves], amp[kWaves];
      for (std::size_t w = 0; w < kWaves; ++w) {
        fx[w] = rng.uniform(0.0, 3.0);
        fy[w] = rng.uniform(0.0, 3.0);
        ph[w] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        amp[w] = rng.uniform(10.0, 40.0);
      }
      const double base = rng.uniform(90.0, 165.0);
      for (std::size_t h = 0; h < S; ++h)
        for (std::size_t x = 0; x < S; ++x) {
          double v = base;
          for (std::size_t w = 0; w < kWaves; ++w) {
            v += amp[w] * std::sin(2.0 * std::numbers::pi *
                                       (fx[w] * static_cast<double>(x) + fy[w] * static_cast<double>(h)) /
                                       static_cast<double>(S) +
                                   ph[w]);
          }
          templ[(k * 3 + c) * S * S + h * S + x] = v;
        }
    }
  SynthImages out;
  out.labels.resize(n);
  out.pixels.resize(n * kCifarPixels);
  for (std::size_t i = 0; i < n; ++i) out.labels[i] = static_cast<std::uint8_t>(i % kClasses);
  rng.shuffle(out.labels.begin(), out.labels.end());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = out.labels[i];
    const auto dy = static_cast<std::ptrdiff_t>(rng.below(9)) - 4;
    const auto dx = static_cast<std::ptrdiff_t>(rng.below(9)) - 4;
    const double contrast = rng.uniform(0.6, 1.4);
    const double shift = rng.uniform(-30.0, 30.0);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t h = 0; h < S; ++h)
        for (std::size_t x = 0; x < S; ++x) {
          const auto sh = static_cast<std::size_t>(
              std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(h) + dy, 0, S - 1));
          const auto sx = static_cast<std::size_t>(
              std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(x) + dx, 0, S - 1));
          const double t = templ[(k * 3 + c) * S * S + sh * S + sx];
          const double v = 128.0 + contrast * (t - 128.0) + shift + noise * rng.normal();
          out.pixels[i * kCifarPixels + (c * S + h) * S + x] =
              static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
  }
  return out;
}

/// Writes `n` synthetic samples as data_batch_1..5.bin (split evenly) plus a
/// test_batch.bin of `n_test` samples drawn from the same templates.
inline void write_synth_cifar10(const std::filesystem::path& dir, std::uint64_t seed, std::size_t n,
                                std::size_t n_test) {
  if (n < 5) throw DataError("need at least one sample per batch file");
  std::filesystem::create_directories(dir);
  const auto all = synth_cifar_like(seed, n + n_test);
  for (std::size_t b = 0; b < 5; ++b) {
    const std::size_t lo = b * n / 5, hi = (b + 1) * n / 5;
    write_cifar10_file(dir / ("data_batch_" + std::to_string(b + 1) + ".bin"),
                       std::span(all.labels).subspan(lo, hi - lo),
                       std::span(all.pixels).subspan(lo * kCifarPixels, (hi - lo) * kCifarPixels));
  }
  if (n_test > 0) {
    write_cifar10_file(dir / "test_batch.bin", std::span(all.labels).subspan(n, n_test),
                       std::span(all.pixels).subspan(n * kCifarPixels, n_test * kCifarPixels));
  }
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentFlags {
  bool flip = false;
  bool translate = false;
  std::size_t pad = 4;
  double flip_probability = 0.5;
};

/// Per-image horizontal flip and zero-padded random translation, in place.
/// Draws per image, in order: flip coin, then vertical and horizontal shift.
template <Real T>
void augment_batch(Tensor<T>& batch, const AugmentFlags& flags, Rng& rng) {
  if (!flags.flip && !flags.translate) return;
  if (batch.rank() != 4) throw DimensionError("augment_batch needs a rank-4 batch, got " + to_string(batch.shape()));
  const std::size_t N = batch.batch(), C = batch.channels(), H = batch.height(), W = batch.width();
  const auto pad = static_cast<std::ptrdiff_t>(flags.pad);
  std::vector<T> img(C * H * W);
  for (std::size_t n = 0; n < N; ++n) {
    const bool flip = flags.flip && rng.bernoulli(flags.flip_probability);
    std::ptrdiff_t dy = 0, dx = 0;
    if (flags.translate) {
      dy = static_cast<std::ptrdiff_t>(rng.below(2 * flags.pad + 1)) - pad;
      dx = static_cast<std::ptrdiff_t>(rng.below(2 * flags.pad + 1)) - pad;
    }
    if (!flip && dy == 0 && dx == 0) continue;
    T* x = batch.data() + n * C * H * W;
    std::copy(x, x + C * H * W, img.begin());
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h) + dy;
          std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(w) + dx;
          T v{0};
          if (sh >= 0 && sh < static_cast<std::ptrdiff_t>(H) && sw >= 0 &&
              sw < static_cast<std::ptrdiff_t>(W)) {
            if (flip) sw = static_cast<std::ptrdiff_t>(W) - 1 - sw;
            v = img[(c * H + static_cast<std::size_t>(sh)) * W + static_cast<std::size_t>(sw)];
          }
          x[(c * H + h) * W + w] = v;
        }
  }
}

}  // namespace tapeprop

#endif  // TAPEPROP_DATA_IO_HPP
