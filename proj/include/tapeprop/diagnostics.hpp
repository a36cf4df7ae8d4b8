// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0
//
// Gradient-error and quantization diagnostics. All gradients come from the
// engine; nothing here re-derives backward math.

#ifndef TAPEPROP_DIAGNOSTICS_HPP
#define TAPEPROP_DIAGNOSTICS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tapeprop/data_io.hpp"
#include "tapeprop/engine.hpp"
#include "tapeprop/network_spec.hpp"
#include "tapeprop/quantizer.hpp"
#include "tapeprop/trainkit.hpp"

namespace tapeprop {

/// FNV-1a over every parameter value, as 16 hex digits.
template <Real T>
std::string snapshot_id(const NetworkParams<T>& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](std::span<const T> v) {
    const auto* b = reinterpret_cast<const unsigned char*>(v.data());
    for (std::size_t i = 0; i < v.size_bytes(); ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& l : p.layers) {
    feed(l.gamma);
    feed(l.beta);
    feed(l.weight.values());
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Weight gradients (body layers then head) for one batch. Clears the
/// gradient slots first and leaves them populated.
template <Real T>
std::vector<Tensor<T>> weight_gradients(Engine<T>& engine, NetworkParams<T>& params,
                                        const Tensor<T>& batch, std::span<const int> labels) {
  params.zero_grad();
  const auto loss = softmax_xent(engine.forward(batch, params), labels);
  engine.backward(loss.grad, params);
  std::vector<Tensor<T>> g;
  g.reserve(params.layers.size());
  for (const auto& l : params.layers) g.push_back(l.grad_weight);
  return g;
}

// ---------------------------------------------------------------------------
// Approximation error against SGD noise

struct GradLayerStats {
  std::size_t layer = 0;
  double approx_error = 0.0;  // mean over batches and elements of (exact - approx)^2
  double sgd_noise = 0.0;     // mean over elements of the across-batch variance
  std::optional<double> ratio;
};

struct GradReport {
  int bits = 8;
  std::size_t batches = 0;
  std::size_t batch_size = 0;
  std::string snapshot;
  std::vector<GradLayerStats> layers;
};

/// Compares exact and approximate weight gradients over `batches` seeded
/// batches drawn without replacement. The variance uses the M-1 divisor.
/// `params` is not modified.
template <Real T>
GradReport grad_error_report(const NetworkSpec& spec, const NetworkParams<T>& params, const Dataset& data,
                             int bits, std::size_t batches, std::size_t batch_size = 128,
                             std::uint64_t seed = 1,
                             QuantizerKind quantizer = QuantizerKind::fixed_point) {
  if (batches < 2) throw ConfigError("grad_error_report needs at least 2 batches");
  check_bits(bits);
  GradReport r;
  r.bits = bits;
  r.batches = batches;
  r.batch_size = batch_size;
  r.snapshot = snapshot_id(params);

  NetworkParams<T> work = params;
  Engine<T> exact(spec, {TapeMode::exact, bits, quantizer});
  Engine<T> approx(spec, {TapeMode::approx, bits, quantizer});
  BatchSampler sampler(data.size(), batch_size, seed);
  Tensor<T> batch;
  std::vector<int> labels;

  const std::size_t L = work.layers.size();
  std::vector<std::vector<Tensor<T>>> exact_grads(L);
  std::vector<double> sq_err(L, 0.0);
  for (std::size_t m = 0; m < batches; ++m) {
    data.gather(sampler.next(), batch, labels);
    const auto ge = weight_gradients(exact, work, batch, labels);
    const auto ga = weight_gradients(approx, work, batch, labels);
    for (std::size_t l = 0; l < L; ++l) {
      double s = 0.0;
      for (std::size_t i = 0; i < ge[l].numel(); ++i) {
        const double d = static_cast<double>(ge[l][i]) - static_cast<double>(ga[l][i]);
        s += d * d;
      }
      sq_err[l] += s / static_cast<double>(ge[l].numel());
      exact_grads[l].push_back(ge[l]);
    }
  }
  for (std::size_t l = 0; l < L; ++l) {
    GradLayerStats st;
    st.layer = l;
    st.approx_error = sq_err[l] / static_cast<double>(batches);
    const std::size_t n = exact_grads[l].front().numel();
    double noise = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double mean = 0.0;
      for (const auto& g : exact_grads[l]) mean += static_cast<double>(g[i]);
      mean /= static_cast<double>(batches);
      double var = 0.0;
      for (const auto& g : exact_grads[l]) {
        const double d = static_cast<double>(g[i]) - mean;
        var += d * d;
      }
      noise += var / static_cast<double>(batches - 1);
    }
    st.sgd_noise = noise / static_cast<double>(n);
    if (st.sgd_noise > 0.0) st.ratio = st.approx_error / st.sgd_noise;
    r.layers.push_back(st);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Sign preservation of stored activations

struct SignStats {
  std::size_t layer = 0;
  std::size_t unclipped = 0, unclipped_agree = 0;
  std::size_t clipped = 0, clipped_agree = 0;

  double overall() const {
    const std::size_t n = unclipped + clipped;
    return n == 0 ? 1.0 : static_cast<double>(unclipped_agree + clipped_agree) / static_cast<double>(n);
  }
  double unclipped_fraction() const {
    return unclipped == 0 ? 1.0 : static_cast<double>(unclipped_agree) / static_cast<double>(unclipped);
  }
  double clipped_fraction() const {
    return clipped == 0 ? 1.0 : static_cast<double>(clipped_agree) / static_cast<double>(clipped);
  }
};

/// Counts entries with (a >= 0) == (stored >= 0), zero counting as
/// nonnegative, split by whether the code was clipped.
template <Real T>
SignStats compare_signs(const Tensor<T>& a, const Tensor<T>& stored, const std::vector<bool>* clipped) {
  SignStats s;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const bool agree = (a[i] >= T{0}) == (stored[i] >= T{0});
    if (clipped && (*clipped)[i]) {
      ++s.clipped;
      s.clipped_agree += agree;
    } else {
      ++s.unclipped;
      s.unclipped_agree += agree;
    }
  }
  return s;
}

/// Per body layer, how often the stored activation keeps the sign of the
/// exact one over `batches` training-mode forward passes.
template <Real T>
std::vector<SignStats> sign_agreement(const NetworkSpec& spec, const NetworkParams<T>& params,
                                      const Dataset& data, int bits, std::size_t batches = 1,
                                      std::size_t batch_size = 128, std::uint64_t seed = 1,
                                      QuantizerKind quantizer = QuantizerKind::fixed_point) {
  check_bits(bits);
  NetworkParams<T> work = params;
  Engine<T> exact(spec, {TapeMode::exact, bits, quantizer});
  BatchSampler sampler(data.size(), batch_size, seed);
  Tensor<T> batch, decoded;
  std::vector<int> labels;
  std::vector<bool> clipped;
  std::vector<SignStats> out(spec.layers.size());
  for (std::size_t l = 0; l < out.size(); ++l) out[l].layer = l;
  for (std::size_t m = 0; m < batches; ++m) {
    data.gather(sampler.next(), batch, labels);
    (void)exact.forward(batch, work);
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
      const auto& tape = exact.tapes()[l];
      const auto& a2 = std::get<Tensor<T>>(tape.stored);
      SignStats s;
      if (quantizer == QuantizerKind::identity) {
        s = compare_signs(a2, a2, nullptr);
      } else {
        dequantize_into(quantize<T>(a2, tape.gamma, tape.beta, bits, &clipped), decoded);
        s = compare_signs(a2, decoded, &clipped);
      }
      out[l].unclipped += s.unclipped;
      out[l].unclipped_agree += s.unclipped_agree;
      out[l].clipped += s.clipped;
      out[l].clipped_agree += s.clipped_agree;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Naive versus proposed error over depth

struct SweepRow {
  std::size_t depth = 0;
  double proposed_rel_err = 0.0;
  double naive_rel_err = 0.0;
};

inline double relative_error(std::span<const double> approx, std::span<const double> exact) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    const double d = approx[i] - exact[i];
    num += d * d;
    den += exact[i] * exact[i];
  }
  return den == 0.0 ? (num == 0.0 ? 0.0 : INFINITY) : std::sqrt(num / den);
}

template <Real T>
double relative_error(const Tensor<T>& approx, const Tensor<T>& exact) {
  std::vector<double> a(approx.values().begin(), approx.values().end());
  std::vector<double> e(exact.values().begin(), exact.values().end());
  return relative_error(std::span<const double>(a), std::span<const double>(e));
}

/// For each depth, a freshly initialized convolution chain of that many
/// layers: relative error of the first layer's weight gradient against exact
/// mode, averaged over `batches` batches, in proposed and naive modes.
template <Real T>
std::vector<SweepRow> naive_vs_proposed_depth_sweep(std::span<const std::size_t> depths, int bits,
                                                    const Dataset& data, std::size_t batches = 20,
                                                    std::size_t batch_size = 32, std::size_t channels = 8,
                                                    std::uint64_t seed = 1) {
  if (depths.empty()) throw ConfigError("depth sweep needs at least one depth");
  check_bits(bits);
  std::vector<SweepRow> rows;
  Tensor<T> batch;
  std::vector<int> labels;
  for (const std::size_t d : depths) {
    const NetworkSpec spec = make_chain(d, channels, data.sample_shape(), data.classes);
    auto params = init_params<T>(spec, seed);
    Engine<T> exact(spec, {TapeMode::exact, bits, QuantizerKind::fixed_point});
    Engine<T> approx(spec, {TapeMode::approx, bits, QuantizerKind::fixed_point});
    Engine<T> naive(spec, {TapeMode::naive, bits, QuantizerKind::fixed_point});
    BatchSampler sampler(data.size(), batch_size, seed);
    SweepRow row;
    row.depth = d;
    for (std::size_t m = 0; m < batches; ++m) {
      data.gather(sampler.next(), batch, labels);
      const auto ge = weight_gradients(exact, params, batch, labels);
      const auto ga = weight_gradients(approx, params, batch, labels);
      const auto gn = weight_gradients(naive, params, batch, labels);
      row.proposed_rel_err += relative_error(ga.front(), ge.front());
      row.naive_rel_err += relative_error(gn.front(), ge.front());
    }
    row.proposed_rel_err /= static_cast<double>(batches);
    row.naive_rel_err /= static_cast<double>(batches);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Quantizer property check

struct QuantCheckResult {
  int bits = 8;
  std::size_t values = 0, unclipped = 0, clipped = 0;
  std::size_t bound_violations = 0, sign_violations = 0;
  double max_error_over_bound = 0.0;  // over unclipped entries

  bool passed() const { return bound_violations == 0 && sign_violations == 0; }
};

/// Quantizes `count` random values spread over `channels` channels with
/// random gamma (either sign, |gamma| in [0.05, 2]) and beta in [-2, 2], and
/// checks every unclipped entry for the error bound and sign agreement.
/// Values are drawn around beta with spread 4|gamma| so some entries clip.
/// Computation is in double; a relative slack of 1e-9 absorbs the rounding
/// of the reconstruction itself.
inline QuantCheckResult quantizer_property_check(int bits, std::size_t count, std::uint64_t seed,
                                                 std::size_t channels = 16) {
  check_bits(bits);
  if (count < channels) throw ConfigError("need at least one value per channel");
  constexpr double kSlack = 1e-9;
  Rng rng(seed);
  const std::size_t rows = count / channels;
  Tensor<double> a(Shape{rows, channels});
  std::vector<double> gamma(channels), beta(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    gamma[c] = rng.uniform(0.05, 2.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    beta[c] = rng.uniform(-2.0, 2.0);
  }
  for (std::size_t n = 0; n < rows; ++n)
    for (std::size_t c = 0; c < channels; ++c) a.at(n, c) = beta[c] + 4.0 * std::fabs(gamma[c]) * rng.normal();
  std::vector<bool> clipped;
  const auto tape = quantize<double>(a, gamma, beta, bits, &clipped);
  const auto back = dequantize(tape);
  QuantCheckResult r;
  r.bits = bits;
  r.values = a.numel();
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (clipped[i]) {
      ++r.clipped;
      continue;
    }
    ++r.unclipped;
    const double bound = quantization_error_bound(gamma[i % channels], bits);
    const double err = std::fabs(back[i] - a[i]);
    r.max_error_over_bound = std::max(r.max_error_over_bound, err / bound);
    if (err > bound * (1.0 + kSlack)) ++r.bound_violations;
    if ((a[i] >= 0.0) != (back[i] >= 0.0)) ++r.sign_violations;
  }
  return r;
}

// ---------------------------------------------------------------------------
// CSV output

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

/// layer,approx_error,sgd_noise,ratio,bits,batches,snapshot
inline std::string grad_report_csv(const GradReport& r) {
  std::string s = "layer,approx_error,sgd_noise,ratio,bits,batches,snapshot\n";
  for (const auto& l : r.layers) {
    s += std::to_string(l.layer) + ',' + format_double(l.approx_error) + ',' + format_double(l.sgd_noise) +
         ',' + (l.ratio ? format_double(*l.ratio) : std::string("NA")) + ',' + std::to_string(r.bits) + ',' +
         std::to_string(r.batches) + ',' + r.snapshot + '\n';
  }
  return s;
}

/// layer,unclipped,unclipped_agree,clipped,clipped_agree,overall_fraction,unclipped_fraction
inline std::string sign_agreement_csv(const std::vector<SignStats>& v) {
  std::string s = "layer,unclipped,unclipped_agree,clipped,clipped_agree,overall_fraction,unclipped_fraction\n";
  for (const auto& l : v) {
    s += std::to_string(l.layer) + ',' + std::to_string(l.unclipped) + ',' + std::to_string(l.unclipped_agree) +
         ',' + std::to_string(l.clipped) + ',' + std::to_string(l.clipped_agree) + ',' +
         format_double(l.overall()) + ',' + format_double(l.unclipped_fraction()) + '\n';
  }
  return s;
}

/// depth,proposed_rel_err,naive_rel_err
inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string s = "depth,proposed_rel_err,naive_rel_err\n";
  for (const auto& r : rows) {
    s += std::to_string(r.depth) + ',' + format_double(r.proposed_rel_err) + ',' +
         format_double(r.naive_rel_err) + '\n';
  }
  return s;
}

}  // namespace tapeprop

#endif  // TAPEPROP_DIAGNOSTICS_HPP
