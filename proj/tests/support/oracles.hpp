// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations for tests. Nothing here calls the
// library's kernels; only plain types (Tensor, LayerDesc, NetworkSpec) are
// shared.

#ifndef TAPEPROP_TESTS_ORACLES_HPP
#define TAPEPROP_TESTS_ORACLES_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "tapeprop/engine.hpp"
#include "tapeprop/network_spec.hpp"
#include "tapeprop/prelayer.hpp"
#include "tapeprop/tensor.hpp"

namespace tapeprop::testing {

/// Plain triple loop in long double.
template <Real T>
Tensor<double> brute_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  Tensor<double> c(Shape{M, N});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += static_cast<long double>(a.at(i, k)) * b.at(k, j);
      c.at(i, j) = static_cast<double>(s);
    }
  return c;
}

/// Six nested loops with explicit bounds checks, long double accumulation.
template <Real T>
Tensor<double> brute_conv2d(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t O = k.shape()[0], KH = k.shape()[2], KW = k.shape()[3];
  const std::size_t OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  Tensor<double> y(Shape{N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oh = 0; oh < OH; ++oh)
        for (std::size_t ow = 0; ow < OW; ++ow) {
          long double s = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < KH; ++i)
              for (std::size_t j = 0; j < KW; ++j) {
                const long ih = static_cast<long>(oh * stride + i) - static_cast<long>(pad);
                const long iw = static_cast<long>(ow * stride + j) - static_cast<long>(pad);
                if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W)) continue;
                s += static_cast<long double>(x.at(n, c, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw))) *
                     k.at(o, c, i, j);
              }
          y.at(n, o, oh, ow) = static_cast<double>(s);
        }
  return y;
}

/// Per-channel mean and population variance by the textbook two-pass rule.
template <Real T>
void two_pass_moments(const Tensor<T>& x, std::vector<double>& mean, std::vector<double>& var) {
  const std::size_t N = x.shape()[0], C = x.shape()[1];
  const std::size_t P = x.numel() / (N * C);
  mean.assign(C, 0.0);
  var.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    long double s = 0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < P; ++i) s += x[(n * C + c) * P + i];
    mean[c] = static_cast<double>(s / static_cast<long double>(N * P));
    long double v = 0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < P; ++i) {
        const long double d = x[(n * C + c) * P + i] - mean[c];
        v += d * d;
      }
    var[c] = static_cast<double>(v / static_cast<long double>(N * P));
  }
}

/// Fourth-order central difference of f at x along coordinate i.
inline double central_difference(const std::function<double()>& f, double& x, double h) {
  const double x0 = x;
  x = x0 + 2 * h;
  const double f2 = f();
  x = x0 + h;
  const double f1 = f();
  x = x0 - h;
  const double fm1 = f();
  x = x0 - 2 * h;
  const double fm2 = f();
  x = x0;
  return (-f2 + 8 * f1 - 8 * fm1 + fm2) / (12 * h);
}

// ---------------------------------------------------------------------------
// Reference network in double, written directly from the layer equations.

struct OracleLayer {
  LayerDesc desc;
  std::vector<double> gamma, beta;
  Tensor<double> weight;
};

/// Forward/loss of a whole network. ReLU masks can be recorded on one pass
/// and frozen for later passes so that finite differences never cross a
/// kink.
class OracleNet {
 public:
  OracleNet(NetworkSpec spec, std::vector<OracleLayer> layers) : spec_(std::move(spec)), layers_(std::move(layers)) {}

  std::vector<OracleLayer>& layers() { return layers_; }

  void record_masks() {
    masks_.clear();
    recording_ = true;
  }
  void freeze_masks() { recording_ = false; }

  /// Mean softmax cross-entropy of the batch.
  double loss(const Tensor<double>& x, std::span<const int> labels) {
    mask_pos_ = 0;
    std::vector<Tensor<double>> outs;  // input of layer l is outs[l]
    outs.push_back(x);
    std::vector<bool> starts(spec_.layers.size(), false), ends(spec_.layers.size(), false);
    std::vector<std::size_t> start_of(spec_.layers.size(), 0);
    for (const auto& b : spec_.blocks) {
      starts[b.first] = true;
      ends[b.last] = true;
      start_of[b.last] = b.first;
    }
    for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
      Tensor<double> y = layer(outs[l], layers_[l]);
      if (ends[l]) add_shortcut(outs[start_of[l]], y);
      outs.push_back(std::move(y));
    }
    const Tensor<double> logits = head(outs.back(), layers_.back());
    const std::size_t N = logits.shape()[0], K = logits.shape()[1];
    long double total = 0;
    for (std::size_t n = 0; n < N; ++n) {
      double m = logits.at(n, 0);
      for (std::size_t c = 1; c < K; ++c) m = std::max(m, logits.at(n, c));
      long double z = 0;
      for (std::size_t c = 0; c < K; ++c) z += std::exp(static_cast<long double>(logits.at(n, c) - m));
      total += std::log(z) - (logits.at(n, static_cast<std::size_t>(labels[n])) - m);
    }
    return static_cast<double>(total / static_cast<long double>(N));
  }

 private:
  // Batch norm (population variance, eps) then scale/bias then masked ReLU.
  Tensor<double> pre(const Tensor<double>& x, const OracleLayer& p, bool relu) {
    std::vector<double> mean, var;
    two_pass_moments(x, mean, var);
    const std::size_t N = x.shape()[0], C = x.shape()[1], P = x.numel() / (N * C);
    Tensor<double> a = x;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < P; ++i) {
          double& v = a[(n * C + c) * P + i];
          v = p.gamma[c] * (v - mean[c]) / std::sqrt(var[c] + kBatchNormEpsilon) + p.beta[c];
        }
    if (relu) {
      for (std::size_t i = 0; i < a.numel(); ++i) {
        if (recording_) masks_.push_back(a[i] > 0.0);
        if (!masks_.at(mask_pos_++)) a[i] = 0.0;
      }
    }
    return a;
  }

  Tensor<double> layer(const Tensor<double>& x, const OracleLayer& p) {
    const Tensor<double> a = pre(x, p, true);
    if (p.desc.kind == LayerKind::conv) return brute_conv2d(a, p.weight, p.desc.stride, p.desc.pad);
    return brute_matmul(a, p.weight);
  }

  Tensor<double> head(const Tensor<double>& x, const OracleLayer& p) {
    const Tensor<double> a = pre(x, p, true);
    const std::size_t N = a.shape()[0], C = a.shape()[1], P = a.numel() / (N * C);
    Tensor<double> pooled(Shape{N, C});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        long double s = 0;
        for (std::size_t i = 0; i < P; ++i) s += a[(n * C + c) * P + i];
        pooled.at(n, c) = static_cast<double>(s / static_cast<long double>(P));
      }
    return brute_matmul(pooled, p.weight);
  }

  static void add_shortcut(const Tensor<double>& in, Tensor<double>& out) {
    const std::size_t N = out.shape()[0], Ci = in.shape()[1];
    if (out.rank() == 2) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < Ci; ++c) out.at(n, c) += in.at(n, c);
      return;
    }
    const std::size_t s = in.shape()[2] / out.shape()[2];
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < Ci; ++c)
        for (std::size_t h = 0; h < out.shape()[2]; ++h)
          for (std::size_t w = 0; w < out.shape()[3]; ++w) out.at(n, c, h, w) += in.at(n, c, h * s, w * s);
  }

  NetworkSpec spec_;
  std::vector<OracleLayer> layers_;
  std::vector<bool> masks_;
  std::size_t mask_pos_ = 0;
  bool recording_ = false;
};

inline OracleNet make_oracle(const NetworkSpec& spec, const NetworkParams<double>& p) {
  std::vector<OracleLayer> layers;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerDesc d = l < spec.layers.size() ? spec.layers[l] : spec.head();
    layers.push_back({d, p.layers[l].gamma, p.layers[l].beta, p.layers[l].weight});
  }
  return OracleNet(spec, std::move(layers));
}

// ---------------------------------------------------------------------------
// Unpooled composition of the allocating layer API, for checking the
// engine's buffer reuse.

template <Real T>
struct ReferenceStep {
  Tensor<T> logits;
  double loss = 0.0;
};

/// One forward/backward through layer_forward/layer_backward with a fresh
/// tensor for every intermediate. Gradients accumulate into `params`.
template <Real T>
ReferenceStep<T> reference_step(const NetworkSpec& spec, NetworkParams<T>& params, const Tensor<T>& x,
                                std::span<const int> labels, TapeMode mode, int bits,
                                QuantizerKind quantizer = QuantizerKind::fixed_point) {
  const std::size_t L = spec.layers.size();
  std::vector<bool> starts(L, false), ends(L, false);
  std::vector<std::size_t> start_of(L, 0), end_of(L, 0);
  for (const auto& b : spec.blocks) {
    starts[b.first] = ends[b.last] = true;
    start_of[b.last] = b.first;
    end_of[b.first] = b.last;
  }
  std::vector<Tensor<T>> inputs{x};
  std::vector<LayerTape<T>> tapes;
  for (std::size_t l = 0; l < L; ++l) {
    auto r = layer_forward(inputs[l], params.layers[l], spec.layers[l], mode, bits, quantizer);
    if (ends[l]) add_shortcut(inputs[start_of[l]], r.out);
    inputs.push_back(std::move(r.out));
    tapes.push_back(std::move(r.tape));
  }
  auto head = layer_forward(inputs.back(), params.head(), spec.head(), TapeMode::exact, bits, quantizer);
  ReferenceStep<T> out;
  out.logits = head.out;

  // Softmax cross-entropy written out again.
  const std::size_t N = out.logits.batch(), K = out.logits.channels();
  Tensor<T> g(out.logits.shape());
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    double m = out.logits.at(n, 0);
    for (std::size_t c = 1; c < K; ++c) m = std::max(m, static_cast<double>(out.logits.at(n, c)));
    double z = 0.0;
    std::vector<double> e(K);
    for (std::size_t c = 0; c < K; ++c) z += (e[c] = std::exp(static_cast<double>(out.logits.at(n, c)) - m));
    total += std::log(z) - (static_cast<double>(out.logits.at(n, static_cast<std::size_t>(labels[n]))) - m);
    for (std::size_t c = 0; c < K; ++c)
      g.at(n, c) = static_cast<T>((e[c] / z - (c == static_cast<std::size_t>(labels[n]) ? 1.0 : 0.0)) /
                                  static_cast<double>(N));
  }
  out.loss = total / static_cast<double>(N);

  Tensor<T> grad = layer_backward(g, head.tape, params.head(), spec.head());
  std::vector<Tensor<T>> pending(L);  // gradient waiting at a block's input
  for (std::size_t l = L; l-- > 0;) {
    const Tensor<T> g_out = grad;
    grad = layer_backward(g_out, tapes[l], params.layers[l], spec.layers[l]);
    if (ends[l]) pending[start_of[l]] = g_out;
    if (starts[l]) add_shortcut_adjoint(pending[l], grad);
  }
  return out;
}

}  // namespace tapeprop::testing

#endif  // TAPEPROP_TESTS_ORACLES_HPP
