// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0
//
// K-bit fixed-point storage for pre-ReLU activations.
//
// For a channel with scale gamma and shift beta the representable range is
// beta +/- 3|gamma|, split into 2^K equal intervals. A value maps to the index
// of its interval and is reconstructed as the interval midpoint, so any value
// inside the range is recovered to within 3|gamma| 2^-K and keeps its sign.

#ifndef TAPEPROP_QUANTIZER_HPP
#define TAPEPROP_QUANTIZER_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tapeprop/errors.hpp"
#include "tapeprop/tensor.hpp"

namespace tapeprop {

/// |gamma| below this value is replaced by it before computing the step.
inline constexpr double kGammaFloor = 1e-8;

inline void check_bits(int bits) {
  if (bits != 1 && bits != 2 && bits != 4 && bits != 8) {
    throw ConfigError("bit width must be one of {1,2,4,8}, got " + std::to_string(bits));
  }
}

inline std::size_t packed_size(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

/// Packs codes LSB-first: code i occupies bits [i*K, (i+1)*K) of the stream.
inline std::vector<std::uint8_t> pack_codes(std::span<const std::uint32_t> codes, int bits) {
  check_bits(bits);
  const std::uint32_t limit = 1u << bits;
  std::vector<std::uint8_t> out(packed_size(codes.size(), bits), 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] >= limit) {
      throw EncodingError("code " + std::to_string(codes[i]) + " at index " + std::to_string(i) +
                          " does not fit in " + std::to_string(bits) + " bits");
    }
    const std::size_t bit = i * static_cast<std::size_t>(bits);
    out[bit / 8] |= static_cast<std::uint8_t>(codes[i] << (bit % 8));
  }
  return out;
}

inline std::vector<std::uint32_t> unpack_codes(std::span<const std::uint8_t> bytes, int bits,
                                               std::size_t count) {
  check_bits(bits);
  if (bytes.size() != packed_size(count, bits)) {
    throw DecodingError("expected " + std::to_string(packed_size(count, bits)) + " bytes for " +
                        std::to_string(count) + " codes of " + std::to_string(bits) +
                        " bits, got " + std::to_string(bytes.size()));
  }
  const std::uint32_t mask = (1u << bits) - 1u;
  std::vector<std::uint32_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t bit = i * static_cast<std::size_t>(bits);
    out[i] = (bytes[bit / 8] >> (bit % 8)) & mask;
  }
  return out;
}

/// Quantized copy of one activation tensor plus the constants needed to
/// decode it. Constants are frozen at encode time.
template <Real T>
struct QuantizedTape {
  std::vector<std::uint8_t> codes;
  int bits = 8;
  Shape shape;
  ChannelVector<double> step;          // 6 |gamma| 2^-K
  ChannelVector<std::int64_t> offset;  // floor(beta / step)
  std::size_t clip_count = 0;

  std::size_t numel() const { return shape_numel(shape); }
  std::size_t code_bytes() const { return codes.size(); }
  std::size_t channel_bytes() const {
    return step.size() * sizeof(double) + offset.size() * sizeof(std::int64_t);
  }
};

namespace detail {

// floor(a / step) for step > 0, corrected so that q*step <= a < (q+1)*step
// holds in double arithmetic.
inline std::int64_t floor_div(double a, double step) {
  double q = std::floor(a / step);
  if (q * step > a) q -= 1.0;
  else if ((q + 1.0) * step <= a) q += 1.0;
  return static_cast<std::int64_t>(q);
}

inline double quant_step(double gamma, int bits) {
  const double g = std::max(std::fabs(gamma), kGammaFloor);
  return std::ldexp(6.0 * g, -bits);
}

}  // namespace detail

/// Encodes `a` channel by channel. If `clipped` is given it receives one flag
/// per element marking codes that were clamped to 0 or 2^K-1.
template <Real T>
QuantizedTape<T> quantize(const Tensor<T>& a, std::span<const T> gamma, std::span<const T> beta,
                          int bits, std::vector<bool>* clipped = nullptr) {
  check_bits(bits);
  const std::size_t N = a.batch(), C = a.channels(), P = a.plane();
  if (gamma.size() != C || beta.size() != C) {
    throw DimensionError("quantize: " + std::to_string(C) + " channels but gamma/beta of length " +
                         std::to_string(gamma.size()) + "/" + std::to_string(beta.size()));
  }
  QuantizedTape<T> t;
  t.bits = bits;
  t.shape = a.shape();
  t.step.resize(C);
  t.offset.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    t.step[c] = detail::quant_step(static_cast<double>(gamma[c]), bits);
    t.offset[c] = detail::floor_div(static_cast<double>(beta[c]), t.step[c]);
  }
  t.codes.assign(packed_size(a.numel(), bits), 0);
  if (clipped) clipped->assign(a.numel(), false);

  const std::int64_t half = std::int64_t{1} << (bits - 1);
  const std::int64_t top = (std::int64_t{1} << bits) - 1;
  const auto k = static_cast<std::size_t>(bits);
  std::size_t clips = 0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * P;
      const double step = t.step[c];
      const std::int64_t shift = half - t.offset[c];
      for (std::size_t i = 0; i < P; ++i) {
        const std::int64_t raw = detail::floor_div(static_cast<double>(a[base + i]), step) + shift;
        const std::int64_t code = raw < 0 ? 0 : (raw > top ? top : raw);
        if (code != raw) {
          ++clips;
          if (clipped) (*clipped)[base + i] = true;
        }
        const std::size_t bit = (base + i) * k;
        t.codes[bit / 8] |= static_cast<std::uint8_t>(static_cast<std::uint32_t>(code) << (bit % 8));
      }
    }
  }
  t.clip_count = clips;
  return t;
}

/// Decodes into `out`, reusing its storage.
template <Real T>
void dequantize_into(const QuantizedTape<T>& t, Tensor<T>& out) {
  check_bits(t.bits);
  out.reshape(t.shape);
  const std::size_t N = out.batch(), C = out.channels(), P = out.plane();
  if (t.codes.size() != packed_size(out.numel(), t.bits)) {
    throw DecodingError("tape holds " + std::to_string(t.codes.size()) + " bytes, expected " +
                        std::to_string(packed_size(out.numel(), t.bits)));
  }
  const std::int64_t half = std::int64_t{1} << (t.bits - 1);
  const std::uint32_t mask = (1u << t.bits) - 1u;
  const auto k = static_cast<std::size_t>(t.bits);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * P;
      const double step = t.step[c];
      const std::int64_t shift = t.offset[c] - half;
      for (std::size_t i = 0; i < P; ++i) {
        const std::size_t bit = (base + i) * k;
        const std::uint32_t code = (t.codes[bit / 8] >> (bit % 8)) & mask;
        const double level = static_cast<double>(static_cast<std::int64_t>(code) + shift) + 0.5;
        out[base + i] = static_cast<T>(step * level);
      }
    }
  }
}

template <Real T>
Tensor<T> dequantize(const QuantizedTape<T>& t) {
  Tensor<T> out;
  dequantize_into(t, out);
  return out;
}

/// Worst-case reconstruction error for an unclipped value.
inline double quantization_error_bound(double gamma, int bits) {
  return 3.0 * std::max(std::fabs(gamma), kGammaFloor) * std::ldexp(1.0, -bits);
}

}  // namespace tapeprop

#endif  // TAPEPROP_QUANTIZER_HPP
