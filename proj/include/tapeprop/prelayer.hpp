// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pre-activation layer: batch-norm, per-channel scale and bias, ReLU, then a
// bias-free linear transform (convolution, dense matrix, or global average
// pool folded into a dense classifier).
//
// The only per-layer state kept for the backward pass is the pre-ReLU
// activation (exact or quantized) and the batch variance. Everything else the
// gradient needs is rebuilt from it: A3 = max(0, A2), A1 = (A2 - beta) / gamma.
//
// The *_core routines work on caller-provided buffers so that the network
// engine can run them on its shared scratch tensors; the allocating wrappers
// at the bottom call the same routines.

#ifndef TAPEPROP_PRELAYER_HPP
#define TAPEPROP_PRELAYER_HPP

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tapeprop/errors.hpp"
#include "tapeprop/quantizer.hpp"
#include "tapeprop/tensor.hpp"

namespace tapeprop {

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kRunningMomentum = 0.9;

enum class LayerKind { dense, conv, pooled_dense };

/// How the pre-ReLU activation is kept for the backward pass.
///  exact  - full precision copy.
///  approx - K-bit copy; the forward pass itself stays full precision.
///  naive  - K-bit copy that also replaces the activation in the forward pass.
enum class TapeMode { exact, approx, naive };

/// `identity` stores approx-mode tapes at full precision. It exists to check
/// that the approximate code path is otherwise identical to the exact one.
enum class QuantizerKind { fixed_point, identity };

inline const char* to_string(TapeMode m) {
  switch (m) {
    case TapeMode::exact: return "exact";
    case TapeMode::approx: return "approx";
    case TapeMode::naive: return "naive";
  }
  return "?";
}

inline TapeMode parse_tape_mode(const std::string& s) {
  if (s == "exact") return TapeMode::exact;
  if (s == "approx") return TapeMode::approx;
  if (s == "naive") return TapeMode::naive;
  throw ConfigError("unknown engine mode '" + s + "' (expected exact|approx|naive)");
}

struct LayerDesc {
  LayerKind kind = LayerKind::conv;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  ConvGeometry geometry() const { return {stride, pad}; }

  Shape weight_shape() const {
    if (kind == LayerKind::conv) return {out_channels, in_channels, kernel, kernel};
    return {in_channels, out_channels};
  }

  std::size_t fan_in() const {
    return kind == LayerKind::conv ? in_channels * kernel * kernel : in_channels;
  }

  Shape output_shape(const Shape& in) const {
    if (in.size() < 2 || in[1] != in_channels) {
      throw DimensionError("layer expects " + std::to_string(in_channels) +
                           " input channels, got shape " + to_string(in));
    }
    switch (kind) {
      case LayerKind::conv:
        if (in.size() != 4) throw DimensionError("conv layer needs rank-4 input");
        return conv_output_shape(in, weight_shape(), geometry());
      case LayerKind::dense:
        if (in.size() != 2) throw DimensionError("dense layer needs rank-2 input");
        return {in[0], out_channels};
      case LayerKind::pooled_dense:
        return {in[0], out_channels};
    }
    return {};
  }
};

/// Learnable state of one layer with gradient, momentum and running
/// batch-norm statistics. gamma/beta act on the layer's input channels.
template <Real T>
struct LayerParams {
  ChannelVector<T> gamma, beta;
  Tensor<T> weight;
  ChannelVector<T> grad_gamma, grad_beta;
  Tensor<T> grad_weight;
  ChannelVector<T> mom_gamma, mom_beta;
  Tensor<T> mom_weight;
  ChannelVector<T> running_mean, running_var;
  double bn_epsilon = kBatchNormEpsilon;

  /// gamma = 1, beta = 0, zero weights and slots.
  static LayerParams make(const LayerDesc& d) {
    LayerParams p;
    const std::size_t c = d.in_channels;
    p.gamma.assign(c, T{1});
    p.beta.assign(c, T{0});
    p.weight = Tensor<T>(d.weight_shape());
    p.grad_gamma.assign(c, T{0});
    p.grad_beta.assign(c, T{0});
    p.grad_weight = Tensor<T>(d.weight_shape());
    p.mom_gamma.assign(c, T{0});
    p.mom_beta.assign(c, T{0});
    p.mom_weight = Tensor<T>(d.weight_shape());
    p.running_mean.assign(c, T{0});
    p.running_var.assign(c, T{1});
    return p;
  }

  void zero_grad() {
    std::fill(grad_gamma.begin(), grad_gamma.end(), T{0});
    std::fill(grad_beta.begin(), grad_beta.end(), T{0});
    grad_weight.fill(T{0});
  }

  std::size_t parameter_count() const { return gamma.size() + beta.size() + weight.numel(); }
};

/// Per-layer state retained between forward and backward.
template <Real T>
struct LayerTape {
  TapeMode mode = TapeMode::exact;
  std::variant<Tensor<T>, QuantizedTape<T>> stored;
  ChannelVector<T> sigma2;
  // gamma and beta as they were during the forward pass.
  ChannelVector<T> gamma, beta;
  // When set, the pre-ReLU activation stays in this caller-owned buffer
  // (the forward `work` tensor) and nothing is stored.
  const Tensor<T>* borrowed = nullptr;

  bool quantized() const { return !borrowed && std::holds_alternative<QuantizedTape<T>>(stored); }
  const Shape& shape() const {
    if (borrowed) return borrowed->shape();
    return quantized() ? std::get<QuantizedTape<T>>(stored).shape
                       : std::get<Tensor<T>>(stored).shape();
  }
  std::size_t channels() const { return sigma2.size(); }

  /// Bytes held between forward and backward. A full-precision tape counts
  /// the activation tensor only; a quantized tape adds its per-channel
  /// vectors.
  std::size_t persistent_bytes() const {
    if (borrowed) return 0;
    if (!quantized()) return std::get<Tensor<T>>(stored).bytes();
    const auto& q = std::get<QuantizedTape<T>>(stored);
    return q.code_bytes() + q.channel_bytes() + 3 * channels() * sizeof(T);
  }
};

/// Persistent bytes a tape of this shape would occupy.
inline std::size_t tape_bytes_for(const Shape& a2_shape, bool quantized, int bits,
                                  std::size_t scalar_size) {
  const std::size_t n = shape_numel(a2_shape);
  if (!quantized) return n * scalar_size;
  const std::size_t c = a2_shape.at(1);
  return packed_size(n, bits) + c * (sizeof(double) + sizeof(std::int64_t)) + 3 * c * scalar_size;
}

/// Intermediates of a forward pass, for tests and diagnostics.
template <Real T>
struct ForwardTrace {
  Tensor<T> a1, a2, a3;
};

/// Intermediates of a backward pass, for tests and diagnostics.
template <Real T>
struct BackwardTrace {
  Tensor<T> grad_a3;  // incoming gradient through the linear transform
  Tensor<T> grad_a2;  // after the ReLU mask
  Tensor<T> grad_a1;  // gamma * grad_a2
};

struct BackwardOptions {
  bool need_input_grad = true;
};

namespace detail {

template <Real T>
T inv_std(T sigma2, double eps) {
  return static_cast<T>(1.0 / std::sqrt(static_cast<double>(sigma2) + eps));
}

template <Real T>
T safe_gamma(T g) {
  const double m = std::max(std::fabs(static_cast<double>(g)), kGammaFloor);
  return static_cast<T>(g < T{0} ? -m : m);
}

inline void check_channels(std::size_t expected, std::size_t got, const char* what) {
  if (expected != got) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(expected) +
                         " channels, got " + std::to_string(got));
  }
}

/// out = (in - mean) * s * gamma + beta, elementwise. `out` may alias `in`.
template <Real T>
void normalize_scale(const Tensor<T>& in, std::span<const T> mean, std::span<const T> s,
                     std::span<const T> gamma, std::span<const T> beta, Tensor<T>& out) {
  const std::size_t N = in.batch(), C = in.channels(), P = in.plane();
  if (&out != &in) out.reshape(in.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T mu = mean[c], sc = s[c], g = gamma[c], b = beta[c];
      const T* src = in.data() + (n * C + c) * P;
      T* dst = out.data() + (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) {
        const T a1 = (src[i] - mu) * sc;
        dst[i] = g * a1 + b;
      }
    }
}

template <Real T>
void relu_inplace(Tensor<T>& x) {
  for (T& v : x.values()) v = v > T{0} ? v : T{0};
}

/// Per-(sample, channel) spatial mean of max(0, a), in double.
template <Real T>
Tensor<T> pooled_relu_features(const Tensor<T>& a) {
  const std::size_t N = a.batch(), C = a.channels(), P = a.plane();
  Tensor<T> f({N, C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = a.data() + (n * C + c) * P;
      double s = 0.0;
      for (std::size_t i = 0; i < P; ++i) s += static_cast<double>(p[i] > T{0} ? p[i] : T{0});
      f.at(n, c) = static_cast<T>(s / static_cast<double>(P));
    }
  return f;
}

/// A_out from the post-ReLU activation (conv/dense), or from the pre-ReLU
/// activation for the pooled classifier, which applies the ReLU while pooling.
template <Real T>
void linear_forward(const Tensor<T>& act, const Tensor<T>& weight, const LayerDesc& d,
                    Tensor<T>& out) {
  switch (d.kind) {
    case LayerKind::conv: conv2d_forward_into(act, weight, d.geometry(), out); break;
    case LayerKind::dense: matmul_into(act, weight, out); break;
    case LayerKind::pooled_dense: matmul_into(pooled_relu_features(act), weight, out); break;
  }
}

/// grad_weight += dL/dW given the activation `act` (A3, or A2 for the
/// pooled classifier) and the output gradient.
template <Real T>
void linear_backward_weight(const Tensor<T>& act, const Tensor<T>& g_out, const LayerDesc& d,
                            Tensor<T>& grad_weight) {
  if (d.kind == LayerKind::conv) {
    conv2d_backward_weight_acc(act, g_out, d.geometry(), grad_weight);
    return;
  }
  const Tensor<T> feats = d.kind == LayerKind::pooled_dense ? pooled_relu_features(act) : Tensor<T>();
  const Tensor<T>& a = d.kind == LayerKind::pooled_dense ? feats : act;
  const std::size_t N = a.shape()[0], I = a.shape()[1], O = g_out.shape()[1];
  if (g_out.shape()[0] != N || grad_weight.shape() != Shape{I, O}) {
    throw DimensionError("dense gradient " + to_string(g_out.shape()) + " for activation " +
                         to_string(a.shape()));
  }
  for (std::size_t i = 0; i < I; ++i) {
    T* row = grad_weight.data() + i * O;
    for (std::size_t n = 0; n < N; ++n) {
      const T av = a.at(n, i);
      const T* g = g_out.data() + n * O;
      for (std::size_t o = 0; o < O; ++o) row[o] += av * g[o];
    }
  }
}

/// dL/dA3 = g_out x W^T (or the conv/pool adjoint), written to `out`.
template <Real T>
void linear_backward_data(const Tensor<T>& weight, const Tensor<T>& g_out, const Shape& in_shape,
                          const LayerDesc& d, Tensor<T>& out) {
  if (d.kind == LayerKind::conv) {
    conv2d_backward_data_into(weight, g_out, in_shape, d.geometry(), out);
    return;
  }
  const std::size_t N = g_out.shape()[0], O = g_out.shape()[1], I = weight.shape()[0];
  out.reshape(in_shape);
  const std::size_t P = out.plane();
  const T inv_p = static_cast<T>(1.0 / static_cast<double>(P));
  for (std::size_t n = 0; n < N; ++n) {
    const T* g = g_out.data() + n * O;
    for (std::size_t i = 0; i < I; ++i) {
      const T* w = weight.data() + i * O;
      T acc{0};
      for (std::size_t o = 0; o < O; ++o) acc += g[o] * w[o];
      T* dst = out.data() + (n * I + i) * P;
      if (d.kind == LayerKind::dense) {
        dst[0] = acc;
      } else {
        const T v = acc * inv_p;
        for (std::size_t k = 0; k < P; ++k) dst[k] = v;
      }
    }
  }
}

/// Pre-ReLU activation from a tape into `out`.
template <Real T>
void tape_activation(const LayerTape<T>& tape, Tensor<T>& out) {
  if (tape.borrowed) {
    if (tape.borrowed == &out) return;
    out.reshape(tape.borrowed->shape());
    std::copy(tape.borrowed->values().begin(), tape.borrowed->values().end(),
              out.values().begin());
  } else if (tape.quantized()) {
    dequantize_into(std::get<QuantizedTape<T>>(tape.stored), out);
  } else {
    const auto& src = std::get<Tensor<T>>(tape.stored);
    out.reshape(src.shape());
    std::copy(src.values().begin(), src.values().end(), out.values().begin());
  }
}

/// a2 -> (a2 - beta) / gamma in place, with the tape's frozen constants.
template <Real T>
void a2_to_a1_inplace(Tensor<T>& a, std::span<const T> gamma, std::span<const T> beta) {
  const std::size_t N = a.batch(), C = a.channels(), P = a.plane();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T g = safe_gamma(gamma[c]), b = beta[c];
      T* p = a.data() + (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) p[i] = (p[i] - b) / g;
    }
}

}  // namespace detail

/// Forward pass of one layer on caller-provided buffers.
///
/// `work` receives A2 and then A3 (or keeps A2 for the pooled classifier)
/// and may alias `in`; `out` receives A_out. With `tape` null no tape is
/// recorded. In evaluation mode (`training` false) the running statistics
/// normalize the input and are left untouched.
template <Real T>
void layer_forward_core(const Tensor<T>& in, LayerParams<T>& p, const LayerDesc& d, TapeMode mode,
                        int bits, QuantizerKind quantizer, bool training, Tensor<T>& work,
                        Tensor<T>& out, LayerTape<T>* tape, ForwardTrace<T>* trace = nullptr) {
  const std::size_t C = in.channels();
  detail::check_channels(d.in_channels, C, "layer_forward");
  detail::check_channels(C, p.gamma.size(), "layer_forward gamma");
  if (p.weight.shape() != d.weight_shape()) {
    throw DimensionError("weight " + to_string(p.weight.shape()) + ", expected " +
                         to_string(d.weight_shape()));
  }
  (void)d.output_shape(in.shape());
  if (mode != TapeMode::exact) check_bits(bits);

  ChannelVector<T> mean(C), scale(C), sigma2(C);
  if (training) {
    const Moments m = channel_moments(in);
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = static_cast<T>(m.mean[c]);
      sigma2[c] = static_cast<T>(m.var[c]);
      scale[c] = detail::inv_std(sigma2[c], p.bn_epsilon);
      p.running_mean[c] = static_cast<T>(kRunningMomentum * p.running_mean[c] +
                                         (1.0 - kRunningMomentum) * m.mean[c]);
      p.running_var[c] = static_cast<T>(kRunningMomentum * p.running_var[c] +
                                        (1.0 - kRunningMomentum) * m.var[c]);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = p.running_mean[c];
      sigma2[c] = p.running_var[c];
      scale[c] = detail::inv_std(sigma2[c], p.bn_epsilon);
    }
  }

  if (trace) {
    const ChannelVector<T> ones(C, T{1}), zeros(C, T{0});
    detail::normalize_scale<T>(in, mean, scale, ones, zeros, trace->a1);
  }
  detail::normalize_scale<T>(in, mean, scale, p.gamma, p.beta, work);
  if (trace) trace->a2 = work;

  if (tape) {
    tape->mode = mode;
    tape->sigma2 = sigma2;
    tape->gamma = p.gamma;
    tape->beta = p.beta;
    if (tape->borrowed) {
      if (tape->borrowed != &work || mode != TapeMode::exact) {
        throw StateError("a borrowed tape must alias the work buffer in exact mode");
      }
    } else if (mode == TapeMode::exact || quantizer == QuantizerKind::identity) {
      tape->stored = work;
    } else {
      tape->stored = quantize<T>(work, p.gamma, p.beta, bits);
    }
  }
  if (mode == TapeMode::naive && quantizer == QuantizerKind::fixed_point) {
    if (tape) {
      dequantize_into(std::get<QuantizedTape<T>>(tape->stored), work);
    } else {
      dequantize_into(quantize<T>(work, p.gamma, p.beta, bits), work);
    }
  }

  if (d.kind != LayerKind::pooled_dense) detail::relu_inplace(work);
  if (trace) {
    trace->a3 = work;
    if (d.kind == LayerKind::pooled_dense) detail::relu_inplace(trace->a3);
  }
  detail::linear_forward(work, p.weight, d, out);
}

/// Backward pass of one layer on caller-provided buffers.
///
/// Accumulates into p's gradient slots and leaves dL/dA_in in `work`.
/// `scratch` may be the same object as `g_out`; g_out is not read after
/// scratch is first written. If `third_term_a1` is given it replaces the
/// reconstructed A1 in the variance term of the batch-norm gradient only.
template <Real T>
void layer_backward_core(const Tensor<T>& g_out, const LayerTape<T>& tape, LayerParams<T>& p,
                         const LayerDesc& d, Tensor<T>& work, Tensor<T>& scratch,
                         const BackwardOptions& opts = {}, const Tensor<T>* third_term_a1 = nullptr,
                         BackwardTrace<T>* trace = nullptr) {
  const std::size_t C = tape.channels();
  if (C != d.in_channels || p.gamma.size() != C || tape.gamma.size() != C ||
      tape.shape().at(1) != C) {
    throw StateError("tape with " + std::to_string(C) + " channels does not match layer with " +
                     std::to_string(d.in_channels) + " input channels");
  }
  const Shape in_shape = tape.shape();
  if (g_out.shape() != d.output_shape(in_shape)) {
    throw StateError("output gradient " + to_string(g_out.shape()) + " does not match tape " +
                     to_string(in_shape));
  }

  // Linear transform: weight gradient from the rebuilt A3, then dL/dA3.
  detail::tape_activation(tape, work);
  if (d.kind != LayerKind::pooled_dense) detail::relu_inplace(work);
  detail::linear_backward_weight(work, g_out, d, p.grad_weight);
  detail::linear_backward_data(p.weight, g_out, in_shape, d, work);
  if (trace) trace->grad_a3 = work;

  // ReLU mask from the sign of the stored activation; scratch then holds A1.
  detail::tape_activation(tape, scratch);
  {
    T* g = work.data();
    const T* a = scratch.data();
    for (std::size_t i = 0; i < work.numel(); ++i) g[i] = a[i] > T{0} ? g[i] : T{0};
  }
  if (trace) trace->grad_a2 = work;
  detail::a2_to_a1_inplace<T>(scratch, tape.gamma, tape.beta);
  const Tensor<T>& a1 = scratch;
  if (third_term_a1 && third_term_a1->shape() != in_shape) {
    throw DimensionError("replacement A1 " + to_string(third_term_a1->shape()));
  }
  const Tensor<T>& a1_var = third_term_a1 ? *third_term_a1 : a1;

  // Scale and bias.
  const ChannelVector<double> gbeta = channel_sum(work);
  const ChannelVector<double> ggamma = channel_dot(a1, work);
  for (std::size_t c = 0; c < C; ++c) {
    p.grad_beta[c] += static_cast<T>(gbeta[c]);
    p.grad_gamma[c] += static_cast<T>(ggamma[c]);
  }
  const std::size_t N = work.batch(), P = work.plane();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T g = p.gamma[c];
      T* w = work.data() + (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) w[i] = g * w[i];
    }
  if (trace) trace->grad_a1 = work;
  if (!opts.need_input_grad) return;

  // Batch-norm: s * (dA1 - mean(dA1) - A1 * mean(A1 * dA1)).
  const ChannelVector<double> sum1 = channel_sum(work);
  const ChannelVector<double> sum2 = channel_dot(a1_var, work);
  const double count = static_cast<double>(N * P);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T s = detail::inv_std(tape.sigma2[c], p.bn_epsilon);
      const T m1 = static_cast<T>(sum1[c] / count);
      const T m2 = static_cast<T>(sum2[c] / count);
      T* w = work.data() + (n * C + c) * P;
      const T* a = a1_var.data() + (n * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) w[i] = s * (w[i] - m1 - a[i] * m2);
    }
}

// ---------------------------------------------------------------------------
// Allocating interface

template <Real T>
struct LayerForwardResult {
  Tensor<T> out;
  LayerTape<T> tape;
};

template <Real T>
LayerForwardResult<T> layer_forward(const Tensor<T>& in, LayerParams<T>& p, const LayerDesc& d,
                                    TapeMode mode, int bits = 8,
                                    QuantizerKind quantizer = QuantizerKind::fixed_point,
                                    ForwardTrace<T>* trace = nullptr) {
  LayerForwardResult<T> r;
  Tensor<T> work;
  layer_forward_core(in, p, d, mode, bits, quantizer, true, work, r.out, &r.tape, trace);
  return r;
}

/// Evaluation-mode forward with running statistics; no tape.
template <Real T>
Tensor<T> layer_infer(const Tensor<T>& in, LayerParams<T>& p, const LayerDesc& d) {
  Tensor<T> work, out;
  layer_forward_core(in, p, d, TapeMode::exact, 8, QuantizerKind::fixed_point, false, work, out,
                     static_cast<LayerTape<T>*>(nullptr));
  return out;
}

template <Real T>
Tensor<T> layer_backward(const Tensor<T>& g_out, const LayerTape<T>& tape, LayerParams<T>& p,
                         const LayerDesc& d, const Tensor<T>* third_term_a1 = nullptr,
                         BackwardTrace<T>* trace = nullptr) {
  Tensor<T> work, scratch;
  layer_backward_core(g_out, tape, p, d, work, scratch, BackwardOptions{}, third_term_a1, trace);
  return work;
}

template <Real T>
struct Reconstruction {
  Tensor<T> a1, a2, a3;
};

/// A2 from storage, A3 = max(0, A2), A1 = (A2 - beta) / gamma using the
/// tape's frozen gamma/beta (|gamma| floored as in the quantizer).
template <Real T>
Reconstruction<T> reconstruct_from_tape(const LayerTape<T>& tape) {
  Reconstruction<T> r;
  detail::tape_activation(tape, r.a2);
  r.a3 = r.a2;
  detail::relu_inplace(r.a3);
  r.a1 = r.a2;
  detail::a2_to_a1_inplace<T>(r.a1, tape.gamma, tape.beta);
  return r;
}

}  // namespace tapeprop

#endif  // TAPEPROP_PRELAYER_HPP
