// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and the arithmetic kernels used by the layers:
// matrix multiply, direct 2D cross-correlation and its adjoints, and
// per-channel reductions. Every kernel runs in a fixed accumulation order so
// results are bit-reproducible.

#ifndef TAPEPROP_TENSOR_HPP
#define TAPEPROP_TENSOR_HPP

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "tapeprop/errors.hpp"

namespace tapeprop {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Per-channel vector (mean, variance, gamma, beta, ...).
template <typename T>
using ChannelVector = std::vector<T>;

template <typename T>
concept Real = std::is_same_v<T, float> || std::is_same_v<T, double>;

/// Dense rank-2 (N,C) or rank-4 (N,C,H,W) tensor, row-major.
///
/// Channel is always dimension 1; a rank-2 tensor behaves as a rank-4 tensor
/// with 1x1 spatial extent for every per-channel operation.
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " + to_string(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t batch() const { return shape_.at(0); }
  std::size_t channels() const { return shape_.at(1); }
  std::size_t height() const { return rank() == 4 ? shape_[2] : 1; }
  std::size_t width() const { return rank() == 4 ? shape_[3] : 1; }
  /// Elements per (sample, channel) plane.
  std::size_t plane() const { return height() * width(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t n, std::size_t c) { return data_[n * shape_[1] + c]; }
  const T& at(std::size_t n, std::size_t c) const { return data_[n * shape_[1] + c]; }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Re-shapes in place. Storage is only reallocated when the new element
  /// count exceeds the current capacity; contents are unspecified afterwards.
  void reshape(Shape shape) {
    validate_shape(shape);
    data_.resize(shape_numel(shape));
    shape_ = std::move(shape);
  }

  void reserve(std::size_t n) { data_.reserve(n); }
  std::size_t capacity() const noexcept { return data_.capacity(); }
  std::size_t bytes() const noexcept { return data_.size() * sizeof(T); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Clears values and shape but keeps the reserved storage.
  void release() noexcept {
    data_.clear();
    shape_.clear();
  }

 private:
  static void validate_shape(const Shape& s) {
    if (s.size() != 2 && s.size() != 4) {
      throw DimensionError("tensor rank must be 2 or 4, got shape " + to_string(s));
    }
    for (auto e : s) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(s));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Bitwise equality of shape and contents.
template <Real T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         (a.numel() == 0 || std::memcmp(a.data(), b.data(), a.numel() * sizeof(T)) == 0);
}

template <Real T>
bool bit_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0);
}

template <Real T>
void debug_check_finite([[maybe_unused]] const Tensor<T>& t) {
#ifndef NDEBUG
  for (T v : t.values()) assert(std::isfinite(v) && "non-finite tensor value");
#endif
}

template <Real To, Real From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  std::vector<To> out(t.values().begin(), t.values().end());
  return Tensor<To>(t.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Matrix multiply

/// C = A x B for rank-2 operands. Each output is accumulated over k in
/// increasing order.
template <Real T>
void matmul_into(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  c.reshape({n, m});
  c.fill(T{0});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (std::size_t i = 0; i < n; ++i) {
    T* row = pc + i * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = pa[i * k + kk];
      const T* brow = pb + kk * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
    }
  }
}

template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> c;
  matmul_into(a, b, c);
  return c;
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose needs rank 2, got " + to_string(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor<T> t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

// ---------------------------------------------------------------------------
// 2D convolution (cross-correlation, zero padding)

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Output spatial extent, or DimensionError if it is not integral.
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, const ConvGeometry& g) {
  if (g.stride == 0) throw DimensionError("convolution stride must be positive");
  const std::size_t padded = in + 2 * g.pad;
  if (padded < k || (padded - k) % g.stride != 0) {
    throw DimensionError("convolution extent " + std::to_string(in) + " with kernel " +
                         std::to_string(k) + ", stride " + std::to_string(g.stride) + ", pad " +
                         std::to_string(g.pad) + " is not integral");
  }
  return (padded - k) / g.stride + 1;
}

namespace detail {

// First and one-past-last output index o with 0 <= o*stride - pad + tap < in.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in,
                                                       std::size_t tap, const ConvGeometry& g) {
  const long s = static_cast<long>(g.stride);
  const long off = static_cast<long>(tap) - static_cast<long>(g.pad);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(in) - 1 - off);
  hi = hi < 0 ? 0 : hi / s + 1;
  lo = std::min<long>(lo, static_cast<long>(out));
  hi = std::clamp<long>(hi, lo, static_cast<long>(out));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

inline Shape conv_output_shape(const Shape& x, const Shape& k, const ConvGeometry& g) {
  if (x.size() != 4 || k.size() != 4 || x[1] != k[1]) {
    throw DimensionError("conv2d input " + to_string(x) + " with kernel " + to_string(k));
  }
  return {x[0], k[0], conv_out_extent(x[2], k[2], g), conv_out_extent(x[3], k[3], g)};
}

namespace detail {

// Per-thread scratch for column matrices; grows to the largest request.
template <Real T>
T* conv_workspace(std::size_t slot, std::size_t n) {
  thread_local std::vector<T> buf[2];
  if (buf[slot].size() < n) buf[slot].resize(n);
  return buf[slot].data();
}

// Column matrix of one sample: row (ci, kh, kw), column (oh, ow); taps that
// fall into the padding are zero.
template <Real T>
void im2col(const T* x, std::size_t Ci, std::size_t H, std::size_t W, std::size_t KH,
            std::size_t KW, std::size_t OH, std::size_t OW, const ConvGeometry& g, T* col) {
  const std::size_t P = OH * OW, s = g.stride;
  for (std::size_t ci = 0; ci < Ci; ++ci)
    for (std::size_t kh = 0; kh < KH; ++kh) {
      const auto [oh0, oh1] = valid_range(OH, H, kh, g);
      for (std::size_t kw = 0; kw < KW; ++kw) {
        const auto [ow0, ow1] = valid_range(OW, W, kw, g);
        T* row = col + ((ci * KH + kh) * KW + kw) * P;
        std::fill(row, row + P, T{0});
        for (std::size_t oh = oh0; oh < oh1; ++oh) {
          const T* xr = x + (ci * H + oh * s + kh - g.pad) * W;
          T* r = row + oh * OW;
          for (std::size_t ow = ow0; ow < ow1; ++ow) r[ow] = xr[ow * s + kw - g.pad];
        }
      }
    }
}

// Adjoint of im2col: scatter-adds the column matrix into x.
template <Real T>
void col2im_add(const T* col, std::size_t Ci, std::size_t H, std::size_t W, std::size_t KH,
                std::size_t KW, std::size_t OH, std::size_t OW, const ConvGeometry& g, T* x) {
  const std::size_t P = OH * OW, s = g.stride;
  for (std::size_t ci = 0; ci < Ci; ++ci)
    for (std::size_t kh = 0; kh < KH; ++kh) {
      const auto [oh0, oh1] = valid_range(OH, H, kh, g);
      for (std::size_t kw = 0; kw < KW; ++kw) {
        const auto [ow0, ow1] = valid_range(OW, W, kw, g);
        const T* row = col + ((ci * KH + kh) * KW + kw) * P;
        for (std::size_t oh = oh0; oh < oh1; ++oh) {
          T* xr = x + (ci * H + oh * s + kh - g.pad) * W;
          const T* r = row + oh * OW;
          for (std::size_t ow = ow0; ow < ow1; ++ow) xr[ow * s + kw - g.pad] += r[ow];
        }
      }
    }
}

// 64-byte SIMD value (GCC/Clang vector extension). Element-wise * and +
// are separate roundings, as for scalars.
template <Real T>
struct Simd {
  using type __attribute__((vector_size(64))) = T;
  static constexpr std::size_t width = 64 / sizeof(T);
  static type load(const T* p) {
    type v;
    std::memcpy(&v, p, sizeof(v));
    return v;
  }
  static void store(T* p, const type& v) { std::memcpy(p, &v, sizeof(v)); }
  static type splat(T x) { return type{} + x; }
};

// dst[r][p] = sum over k ascending of a(r, k) * src[k][p] for rows
// r < R, where a(r, k) = a[r * ars + k * aks]. Blocks of four rows by two
// vectors accumulate in registers; each output keeps its own sequential sum.
template <Real T>
void rows_combine(const T* a, std::size_t ars, std::size_t aks, const T* src, std::size_t R,
                  std::size_t K, std::size_t P, T* dst) {
  using S = Simd<T>;
  using V = typename S::type;
  constexpr std::size_t kW = S::width, kCols = 2 * kW;
  std::size_t r = 0;
  for (; r + 4 <= R; r += 4) {
    const T* a0 = a + r * ars;
    const T* a1 = a0 + ars;
    const T* a2 = a1 + ars;
    const T* a3 = a2 + ars;
    std::size_t p0 = 0;
    for (; p0 + kCols <= P; p0 += kCols) {
      V c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      const T* c = src + p0;
      for (std::size_t k = 0; k < K; ++k, c += P) {
        const V x0 = S::load(c), x1 = S::load(c + kW);
        const V w0 = S::splat(a0[k * aks]), w1 = S::splat(a1[k * aks]);
        const V w2 = S::splat(a2[k * aks]), w3 = S::splat(a3[k * aks]);
        c00 += w0 * x0; c01 += w0 * x1;
        c10 += w1 * x0; c11 += w1 * x1;
        c20 += w2 * x0; c21 += w2 * x1;
        c30 += w3 * x0; c31 += w3 * x1;
      }
      T* d = dst + r * P + p0;
      S::store(d, c00); S::store(d + kW, c01); d += P;
      S::store(d, c10); S::store(d + kW, c11); d += P;
      S::store(d, c20); S::store(d + kW, c21); d += P;
      S::store(d, c30); S::store(d + kW, c31);
    }
    for (std::size_t i = 0; i < 4; ++i) {
      T* __restrict d = dst + (r + i) * P;
      std::fill(d + p0, d + P, T{0});
      for (std::size_t k = 0; k < K; ++k) {
        const T w = a[(r + i) * ars + k * aks];
        const T* __restrict c = src + k * P;
        for (std::size_t p = p0; p < P; ++p) d[p] += w * c[p];
      }
    }
  }
  for (; r < R; ++r) {
    T* __restrict d = dst + r * P;
    std::fill(d, d + P, T{0});
    for (std::size_t k = 0; k < K; ++k) {
      const T w = a[r * ars + k * aks];
      const T* __restrict c = src + k * P;
      for (std::size_t p = 0; p < P; ++p) d[p] += w * c[p];
    }
  }
}

// Dot product with one SIMD register of interleaved partial sums, folded in
// fixed order.
template <Real T>
T lane_dot(const T* a, const T* b, std::size_t n) {
  using S = Simd<T>;
  constexpr std::size_t kW = S::width;
  typename S::type acc{};
  std::size_t i = 0;
  for (; i + kW <= n; i += kW) acc += S::load(a + i) * S::load(b + i);
  T lanes[kW];
  S::store(lanes, acc);
  for (std::size_t j = 0; i + j < n; ++j) lanes[j] += a[i + j] * b[i + j];
  T s{0};
  for (std::size_t j = 0; j < kW; ++j) s += lanes[j];
  return s;
}

// out[i][j] += lane_dot(a[i], b[j], P) for i < A, j < B, four by four so
// each loaded vector feeds four products. Results match lane_dot exactly.
template <Real T>
void dot_block(const T* a, std::size_t A, const T* b, std::size_t B, std::size_t P, T* out) {
  using S = Simd<T>;
  using V = typename S::type;
  constexpr std::size_t kW = S::width;
  std::size_t i = 0;
  for (; i + 4 <= A; i += 4) {
    std::size_t j = 0;
    for (; j + 4 <= B; j += 4) {
      V acc[4][4] = {};
      std::size_t p = 0;
      for (; p + kW <= P; p += kW) {
        const V x0 = S::load(a + i * P + p), x1 = S::load(a + (i + 1) * P + p);
        const V x2 = S::load(a + (i + 2) * P + p), x3 = S::load(a + (i + 3) * P + p);
        for (std::size_t v = 0; v < 4; ++v) {
          const V y = S::load(b + (j + v) * P + p);
          acc[0][v] += x0 * y;
          acc[1][v] += x1 * y;
          acc[2][v] += x2 * y;
          acc[3][v] += x3 * y;
        }
      }
      for (std::size_t u = 0; u < 4; ++u)
        for (std::size_t v = 0; v < 4; ++v) {
          const T* x = a + (i + u) * P;
          const T* y = b + (j + v) * P;
          T lanes[kW];
          S::store(lanes, acc[u][v]);
          for (std::size_t l = 0; p + l < P; ++l) lanes[l] += x[p + l] * y[p + l];
          T s{0};
          for (std::size_t l = 0; l < kW; ++l) s += lanes[l];
          out[(i + u) * B + j + v] += s;
        }
    }
    for (; j < B; ++j)
      for (std::size_t u = 0; u < 4; ++u) out[(i + u) * B + j] += lane_dot(a + (i + u) * P, b + j * P, P);
  }
  for (; i < A; ++i)
    for (std::size_t j = 0; j < B; ++j) out[i * B + j] += lane_dot(a + i * P, b + j * P, P);
}

}  // namespace detail

/// Cross-correlation. For every output element the products are summed over
/// (input channel, kernel row, kernel column) in that order.
template <Real T>
void conv2d_forward_into(const Tensor<T>& x, const Tensor<T>& k, const ConvGeometry& g,
                         Tensor<T>& out) {
  const Shape os = conv_output_shape(x.shape(), k.shape(), g);
  out.reshape(os);
  const std::size_t N = os[0], Co = os[1], OH = os[2], OW = os[3];
  const std::size_t Ci = x.channels(), H = x.height(), W = x.width();
  const std::size_t KH = k.shape()[2], KW = k.shape()[3];
  const std::size_t K = Ci * KH * KW, P = OH * OW;
  T* col = detail::conv_workspace<T>(0, K * P);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x.data() + n * Ci * H * W, Ci, H, W, KH, KW, OH, OW, g, col);
    detail::rows_combine(k.data(), K, 1, col, Co, K, P, out.data() + n * Co * P);
  }
  debug_check_finite(out);
}

template <Real T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                         std::size_t pad) {
  Tensor<T> out;
  conv2d_forward_into(x, k, ConvGeometry{stride, pad}, out);
  return out;
}

/// Gradient with respect to the convolution input.
template <Real T>
void conv2d_backward_data_into(const Tensor<T>& k, const Tensor<T>& g_out, const Shape& x_shape,
                               const ConvGeometry& g, Tensor<T>& g_x) {
  const Shape os = conv_output_shape(x_shape, k.shape(), g);
  if (g_out.shape() != os) {
    throw DimensionError("conv2d gradient " + to_string(g_out.shape()) + ", expected " +
                         to_string(os));
  }
  g_x.reshape(x_shape);
  g_x.fill(T{0});
  const std::size_t N = os[0], Co = os[1], OH = os[2], OW = os[3];
  const std::size_t Ci = x_shape[1], H = x_shape[2], W = x_shape[3];
  const std::size_t KH = k.shape()[2], KW = k.shape()[3];
  const std::size_t K = Ci * KH * KW, P = OH * OW;
  T* col = detail::conv_workspace<T>(0, K * P);
  for (std::size_t n = 0; n < N; ++n) {
    // Row k of the column gradient is sum over co of k[co][k] * g_out[co].
    detail::rows_combine(k.data(), 1, K, g_out.data() + n * Co * P, K, Co, P, col);
    detail::col2im_add(col, Ci, H, W, KH, KW, OH, OW, g, g_x.data() + n * Ci * H * W);
  }
}

/// Gradient with respect to the kernel, added into g_k (which must already
/// have the kernel's shape).
template <Real T>
void conv2d_backward_weight_acc(const Tensor<T>& x, const Tensor<T>& g_out, const ConvGeometry& g,
                                Tensor<T>& g_k) {
  const Shape os = conv_output_shape(x.shape(), g_k.shape(), g);
  if (g_out.shape() != os) {
    throw DimensionError("conv2d gradient " + to_string(g_out.shape()) + ", expected " +
                         to_string(os));
  }
  const std::size_t N = os[0], Co = os[1], OH = os[2], OW = os[3];
  const std::size_t Ci = x.channels(), H = x.height(), W = x.width();
  const std::size_t KH = g_k.shape()[2], KW = g_k.shape()[3];
  const std::size_t K = Ci * KH * KW, P = OH * OW;
  T* col = detail::conv_workspace<T>(1, K * P);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x.data() + n * Ci * H * W, Ci, H, W, KH, KW, OH, OW, g, col);
    const T* go = g_out.data() + n * Co * P;
    detail::dot_block(go, Co, col, K, P, g_k.data());
  }
}

template <Real T>
struct ConvGradients {
  Tensor<T> g_x;
  Tensor<T> g_k;
};

/// Adjoints of conv2d_forward with respect to input and kernel.
template <Real T>
ConvGradients<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& g_out,
                                 std::size_t stride, std::size_t pad) {
  const ConvGeometry g{stride, pad};
  ConvGradients<T> r;
  conv2d_backward_data_into(k, g_out, x.shape(), g, r.g_x);
  r.g_k = Tensor<T>(k.shape());
  conv2d_backward_weight_acc(x, g_out, g, r.g_k);
  return r;
}

// ---------------------------------------------------------------------------
// Per-channel reductions (64-bit accumulators, order: sample, then plane)

struct Moments {
  ChannelVector<double> mean;
  ChannelVector<double> var;  // population variance
};

template <Real T>
Moments channel_moments(const Tensor<T>& x) {
  if (x.empty()) throw DimensionError("channel_moments of an empty tensor");
  const std::size_t N = x.batch(), C = x.channels(), P = x.plane();
  const double count = static_cast<double>(N * P);
  Moments m{ChannelVector<double>(C, 0.0), ChannelVector<double>(C, 0.0)};
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.data() + (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) s += static_cast<double>(p[i]);
    }
    const double mu = s / count;
    double q = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.data() + (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) {
        const double d = static_cast<double>(p[i]) - mu;
        q += d * d;
      }
    }
    m.mean[c] = mu;
    m.var[c] = q / count;
  }
  return m;
}

template <Real T>
ChannelVector<double> channel_sum(const Tensor<T>& x) {
  const std::size_t N = x.batch(), C = x.channels(), P = x.plane();
  ChannelVector<double> s(C, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = x.data() + (n * C + c) * P;
      double acc = s[c];
      for (std::size_t i = 0; i < P; ++i) acc += static_cast<double>(p[i]);
      s[c] = acc;
    }
  return s;
}

/// Per-channel sum of the elementwise product a*b.
template <Real T>
ChannelVector<double> channel_dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("channel_dot " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t N = a.batch(), C = a.channels(), P = a.plane();
  ChannelVector<double> s(C, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* pa = a.data() + (n * C + c) * P;
      const T* pb = b.data() + (n * C + c) * P;
      double acc = s[c];
      for (std::size_t i = 0; i < P; ++i) acc += static_cast<double>(pa[i] * pb[i]);
      s[c] = acc;
    }
  return s;
}

/// Sum of elementwise products in double, index order.
template <Real T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel()) throw DimensionError("dot of tensors with different sizes");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

}  // namespace tapeprop

#endif  // TAPEPROP_TENSOR_HPP
