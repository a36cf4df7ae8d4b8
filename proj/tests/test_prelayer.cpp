// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>

#include "support/oracles.hpp"
#include "tapeprop/prelayer.hpp"
#include "tapeprop/random.hpp"

using namespace tapeprop;
using tapeprop::testing::central_difference;

namespace {

template <Real T>
void fill_normal(std::span<T> v, Rng& rng, double mean = 0.0, double sd = 1.0) {
  for (auto& x : v) x = static_cast<T>(rng.normal(mean, sd));
}

template <Real T>
LayerParams<T> random_params(const LayerDesc& d, std::uint64_t seed, double gamma_sign = 1.0) {
  Rng rng(seed);
  auto p = LayerParams<T>::make(d);
  for (auto& g : p.gamma) g = static_cast<T>(gamma_sign * rng.uniform(0.5, 1.5));
  fill_normal<T>(p.beta, rng, 0.0, 0.3);
  fill_normal<T>(p.weight.values(), rng, 0.0, 0.5);
  return p;
}

template <Real T>
Tensor<T> random_input(const Shape& s, std::uint64_t seed, double mean = 0.0) {
  Rng rng(seed);
  Tensor<T> t(s);
  fill_normal<T>(t.values(), rng, mean, 2.0);
  return t;
}

struct LayerCase {
  std::string name;
  LayerDesc desc;
  Shape input;
};

std::vector<LayerCase> layer_cases() {
  return {
      {"dense", {LayerKind::dense, 3, 2, 1, 1, 0}, {5, 3}},
      {"conv", {LayerKind::conv, 2, 3, 3, 1, 1}, {2, 2, 4, 4}},
      {"strided_conv", {LayerKind::conv, 2, 2, 4, 2, 1}, {2, 2, 6, 6}},
      {"pooled_dense", {LayerKind::pooled_dense, 3, 4, 1, 1, 0}, {3, 3, 2, 2}},
  };
}

}  // namespace

TEST(Prelayer, HandEvaluatedTwoPointBatch) {
  const LayerDesc d{LayerKind::dense, 1, 1, 1, 1, 0};
  auto p = LayerParams<double>::make(d);
  p.weight[0] = 1.0;
  ForwardTrace<double> trace;
  const auto r = layer_forward(Tensor<double>(Shape{2, 1}, {1.0, 3.0}), p, d, TapeMode::exact, 8,
                               QuantizerKind::fixed_point, &trace);
  const double a = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(trace.a1[0], -0.999995, 1e-6);
  EXPECT_NEAR(trace.a1[1], 0.999995, 1e-6);
  EXPECT_DOUBLE_EQ(trace.a1[1], a);
  EXPECT_EQ(r.out[0], 0.0);
  EXPECT_DOUBLE_EQ(r.out[1], a);
  EXPECT_DOUBLE_EQ(r.tape.sigma2[0], 1.0);
  // running <- 0.9 running + 0.1 batch
  EXPECT_DOUBLE_EQ(p.running_mean[0], 0.2);
  EXPECT_DOUBLE_EQ(p.running_var[0], 0.9 + 0.1);
}

TEST(Prelayer, ExactTapeHoldsPreReluActivation) {
  const auto c = layer_cases()[1];
  auto p = random_params<float>(c.desc, 1);
  ForwardTrace<float> trace;
  const auto r = layer_forward(random_input<float>(c.input, 2), p, c.desc, TapeMode::exact, 8,
                               QuantizerKind::fixed_point, &trace);
  ASSERT_FALSE(r.tape.quantized());
  EXPECT_TRUE(bit_equal(std::get<Tensor<float>>(r.tape.stored), trace.a2));
  EXPECT_EQ(r.tape.persistent_bytes(), trace.a2.bytes());
}

TEST(Prelayer, ApproxForwardIsExactForward) {
  for (const auto& c : layer_cases()) {
    const auto x = random_input<float>(c.input, 3);
    auto pe = random_params<float>(c.desc, 4);
    auto pa = pe, pi = pe;
    const auto e = layer_forward(x, pe, c.desc, TapeMode::exact);
    const auto a = layer_forward(x, pa, c.desc, TapeMode::approx, 4);
    const auto i = layer_forward(x, pi, c.desc, TapeMode::approx, 4, QuantizerKind::identity);
    EXPECT_TRUE(bit_equal(e.out, a.out)) << c.name;
    EXPECT_TRUE(bit_equal(e.out, i.out)) << c.name;
    EXPECT_TRUE(a.tape.quantized());
    EXPECT_FALSE(i.tape.quantized());
    EXPECT_TRUE(bit_equal(pe.running_var, pa.running_var));
  }
}

TEST(Prelayer, NaiveForwardUsesReconstructedActivation) {
  const auto c = layer_cases()[1];
  const auto x = random_input<float>(c.input, 5);
  auto p = random_params<float>(c.desc, 6);
  auto q = p;
  const auto naive = layer_forward(x, p, c.desc, TapeMode::naive, 4);
  const auto rec = reconstruct_from_tape(naive.tape);
  const auto expect = conv2d_forward(rec.a3, q.weight, c.desc.stride, c.desc.pad);
  EXPECT_TRUE(bit_equal(naive.out, expect));
  const auto exact = layer_forward(x, q, c.desc, TapeMode::exact);
  EXPECT_FALSE(bit_equal(naive.out, exact.out));
}

TEST(Prelayer, ZeroOutputGradientGivesZeroGradients) {
  for (const auto& c : layer_cases()) {
    auto p = random_params<double>(c.desc, 7);
    const auto r = layer_forward(random_input<double>(c.input, 8), p, c.desc, TapeMode::approx, 8);
    const auto g_in = layer_backward(Tensor<double>(r.out.shape()), r.tape, p, c.desc);
    for (double v : g_in.values()) EXPECT_EQ(v, 0.0) << c.name;
    for (double v : p.grad_weight.values()) EXPECT_EQ(v, 0.0);
    for (double v : p.grad_gamma) EXPECT_EQ(v, 0.0);
    for (double v : p.grad_beta) EXPECT_EQ(v, 0.0);
  }
}

TEST(Prelayer, RejectsMismatchedShapes) {
  const auto c = layer_cases()[1];
  auto p = random_params<float>(c.desc, 9);
  EXPECT_THROW(layer_forward(random_input<float>({2, 3, 4, 4}, 1), p, c.desc, TapeMode::exact), DimensionError);
  const auto r = layer_forward(random_input<float>(c.input, 1), p, c.desc, TapeMode::exact);
  EXPECT_THROW(layer_backward(Tensor<float>(Shape{2, 3, 2, 2}), r.tape, p, c.desc), StateError);
  auto other = LayerParams<float>::make(layer_cases()[0].desc);
  EXPECT_THROW(layer_backward(r.out, r.tape, other, layer_cases()[0].desc), StateError);
  EXPECT_THROW(layer_forward(random_input<float>(c.input, 1), p, c.desc, TapeMode::approx, 3), ConfigError);
}

// Finite differences of L = <R, layer_out(x)> in double precision against
// the exact-mode backward, for every parameter and input entry.
class LayerGradient : public ::testing::TestWithParam<std::tuple<std::size_t, double>> {};

TEST_P(LayerGradient, ExactModeMatchesFiniteDifferences) {
  const auto [case_index, gamma_sign] = GetParam();
  const auto c = layer_cases()[case_index];
  auto p = random_params<double>(c.desc, 11, gamma_sign);
  auto x = random_input<double>(c.input, 12, 0.5);
  Tensor<double> R;
  {
    auto probe = p;
    ForwardTrace<double> trace;
    const auto r = layer_forward(x, probe, c.desc, TapeMode::exact, 8, QuantizerKind::fixed_point, &trace);
    // Keep every pre-ReLU value away from the kink so that the loss is
    // smooth within the stencil.
    for (double v : trace.a2.values()) ASSERT_GT(std::fabs(v), 1e-3) << "seed puts an entry at the kink";
    Rng rng(13);
    R = Tensor<double>(r.out.shape());
    fill_normal<double>(R.values(), rng);
  }
  auto loss = [&]() {
    auto probe = p;
    const auto r = layer_forward(x, probe, c.desc, TapeMode::exact);
    return dot(R, r.out);
  };

  auto run = p;
  const auto fwd = layer_forward(x, run, c.desc, TapeMode::exact);
  run.zero_grad();
  const auto g_in = layer_backward(R, fwd.tape, run, c.desc);

  constexpr double kH = 1e-4, kTol = 1e-6;
  auto check = [&](std::span<double> params, std::span<const double> analytic, const char* what) {
    double scale = 0.0;
    for (double v : analytic) scale = std::max(scale, std::fabs(v));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double fd = central_difference(loss, params[i], kH);
      EXPECT_LE(std::fabs(fd - analytic[i]), kTol * (std::fabs(analytic[i]) + scale))
          << c.name << ' ' << what << '[' << i << "] fd=" << fd << " analytic=" << analytic[i];
    }
  };
  check(p.gamma, run.grad_gamma, "gamma");
  check(p.beta, run.grad_beta, "beta");
  check(p.weight.values(), run.grad_weight.values(), "weight");
  check(x.values(), g_in.values(), "input");
}

INSTANTIATE_TEST_SUITE_P(Layers, LayerGradient,
                         ::testing::Combine(::testing::Values(0u, 1u, 2u, 3u), ::testing::Values(1.0, -1.0)));

// The backward pass of approx mode differs from exact mode only where it
// reads the reconstructed activation.
TEST(Prelayer, ExactnessDecomposition) {
  for (const auto& c : layer_cases()) {
    const auto x = random_input<float>(c.input, 20);
    auto p = random_params<float>(c.desc, 21);
    auto pe = p, pa = p;
    const auto e = layer_forward(x, pe, c.desc, TapeMode::exact);
    const auto a = layer_forward(x, pa, c.desc, TapeMode::approx, 8);
    ASSERT_EQ(std::get<QuantizedTape<float>>(a.tape.stored).clip_count, 0u) << c.name;
    Rng rng(22);
    Tensor<float> g(e.out.shape());
    fill_normal<float>(g.values(), rng);

    BackwardTrace<float> te, ta;
    pe.zero_grad();
    pa.zero_grad();
    const auto ge = layer_backward<float>(g, e.tape, pe, c.desc, nullptr, &te);
    const auto ga = layer_backward<float>(g, a.tape, pa, c.desc, nullptr, &ta);
    EXPECT_TRUE(bit_equal(te.grad_a3, ta.grad_a3)) << c.name;
    EXPECT_TRUE(bit_equal(te.grad_a2, ta.grad_a2)) << c.name;
    EXPECT_TRUE(bit_equal(te.grad_a1, ta.grad_a1)) << c.name;
    EXPECT_TRUE(bit_equal(pe.grad_beta, pa.grad_beta)) << c.name;
    EXPECT_FALSE(bit_equal(ge, ga)) << c.name;

    // Exact A1 in the third term only restores the exact input gradient.
    const auto exact_a1 = reconstruct_from_tape(e.tape).a1;
    auto pr = p;
    pr.zero_grad();
    const auto gr = layer_backward(g, a.tape, pr, c.desc, &exact_a1);
    EXPECT_TRUE(bit_equal(ge, gr)) << c.name;
    EXPECT_TRUE(bit_equal(pa.grad_gamma, pr.grad_gamma)) << c.name;
  }
}

TEST(Prelayer, IdentityQuantizerBackwardIsExact) {
  for (const auto& c : layer_cases()) {
    const auto x = random_input<float>(c.input, 30);
    auto pe = random_params<float>(c.desc, 31);
    auto pi = pe;
    const auto e = layer_forward(x, pe, c.desc, TapeMode::exact);
    const auto i = layer_forward(x, pi, c.desc, TapeMode::approx, 4, QuantizerKind::identity);
    Tensor<float> g(e.out.shape());
    Rng rng(32);
    fill_normal<float>(g.values(), rng);
    EXPECT_TRUE(bit_equal(layer_backward(g, e.tape, pe, c.desc), layer_backward(g, i.tape, pi, c.desc)));
    EXPECT_TRUE(bit_equal(pe.grad_weight, pi.grad_weight));
    EXPECT_TRUE(bit_equal(pe.grad_gamma, pi.grad_gamma));
  }
}

TEST(Prelayer, ReconstructionFromTapes) {
  const auto c = layer_cases()[1];
  const auto x = random_input<float>(c.input, 40);
  auto p = random_params<float>(c.desc, 41, -1.0);
  ForwardTrace<float> trace;
  const auto e = layer_forward(x, p, c.desc, TapeMode::exact, 8, QuantizerKind::fixed_point, &trace);
  const auto re = reconstruct_from_tape(e.tape);
  for (std::size_t i = 0; i < re.a1.numel(); ++i) {
    EXPECT_NEAR(re.a1[i], trace.a1[i], 1e-6 * std::max(1.0f, std::fabs(trace.a1[i])));
    EXPECT_EQ(re.a3[i], trace.a3[i]);
    if (re.a2[i] <= 0.0f) {
      EXPECT_EQ(re.a3[i], 0.0f);
    }
  }
  for (int bits : {4, 8}) {
    auto q = random_params<float>(c.desc, 41, -1.0);
    const auto a = layer_forward(x, q, c.desc, TapeMode::approx, bits);
    std::vector<bool> clipped;
    (void)quantize<float>(trace.a2, q.gamma, q.beta, bits, &clipped);
    const auto ra = reconstruct_from_tape(a.tape);
    const double bound = 3.0 * std::ldexp(1.0, -bits);
    for (std::size_t i = 0; i < ra.a1.numel(); ++i) {
      if (clipped[i]) continue;
      EXPECT_LE(std::fabs(ra.a1[i] - trace.a1[i]), bound * (1.0 + 1e-5)) << "bits " << bits << " entry " << i;
      if (ra.a2[i] <= 0.0f) {
        EXPECT_EQ(ra.a3[i], 0.0f);
      }
    }
  }
}

TEST(Prelayer, BatchNormSelfCheck) {
  const LayerDesc d{LayerKind::conv, 4, 4, 3, 1, 1};
  auto p = random_params<float>(d, 50);
  const auto x = random_input<float>({8, 4, 6, 6}, 51, 3.0);
  ForwardTrace<float> trace;
  (void)layer_forward(x, p, d, TapeMode::exact, 8, QuantizerKind::fixed_point, &trace);
  const Moments m = channel_moments(trace.a1);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_LT(std::fabs(m.mean[c]), 1e-6);
    EXPECT_NEAR(m.var[c], 1.0, 1e-4);
  }
}

TEST(Prelayer, InferUsesRunningStatistics) {
  const LayerDesc d{LayerKind::dense, 2, 2, 1, 1, 0};
  auto p = LayerParams<double>::make(d);
  p.weight = Tensor<double>(Shape{2, 2}, {1, 0, 0, 1});
  p.running_mean = {1.0, -1.0};
  p.running_var = {4.0, 1.0};
  const auto out = layer_infer(Tensor<double>(Shape{1, 2}, {3.0, 0.0}), p, d);
  EXPECT_DOUBLE_EQ(out[0], 2.0 / std::sqrt(4.0 + 1e-5));
  EXPECT_DOUBLE_EQ(out[1], 1.0 / std::sqrt(1.0 + 1e-5));
  EXPECT_EQ(p.running_mean[0], 1.0);
}

TEST(Prelayer, QuantizedTapeBytes) {
  const auto c = layer_cases()[1];
  auto p = random_params<float>(c.desc, 60);
  const auto a = layer_forward(random_input<float>(c.input, 61), p, c.desc, TapeMode::approx, 4);
  EXPECT_EQ(a.tape.persistent_bytes(), tape_bytes_for(a.tape.shape(), true, 4, sizeof(float)));
  EXPECT_EQ(tape_bytes_for(a.tape.shape(), false, 4, sizeof(float)), shape_numel(a.tape.shape()) * 4);
}
