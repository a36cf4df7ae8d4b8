// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0
//
// Initialization, momentum SGD, softmax cross-entropy, and the training and
// evaluation loops.

#ifndef TAPEPROP_TRAINKIT_HPP
#define TAPEPROP_TRAINKIT_HPP

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tapeprop/data_io.hpp"
#include "tapeprop/engine.hpp"
#include "tapeprop/errors.hpp"
#include "tapeprop/network_spec.hpp"
#include "tapeprop/random.hpp"
#include "tapeprop/tensor.hpp"

namespace tapeprop {

struct LrPoint {
  std::size_t start = 0;
  double lr = 0.1;
  bool operator==(const LrPoint&) const = default;
};

/// 0.01 warm start, 0.1 from iteration 400, divided by 10 at 32k and 48k.
inline std::vector<LrPoint> cifar_lr_schedule() {
  return {{0, 0.01}, {400, 0.1}, {32000, 0.01}, {48000, 0.001}};
}

struct TrainConfig {
  TapeMode mode = TapeMode::approx;
  int bits = 8;
  QuantizerKind quantizer = QuantizerKind::fixed_point;
  std::size_t batch_size = 128;
  std::size_t total_iters = 64000;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  std::vector<LrPoint> lr_schedule = cifar_lr_schedule();
  std::uint64_t seed = 1;
  AugmentFlags augment{true, true};
  std::string log_path;
  // Record wall-clock time in the log; off keeps logs byte-reproducible.
  bool timing = false;
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (c.mode != TapeMode::exact) check_bits(c.bits);
  if (c.lr_schedule.empty() || c.lr_schedule.front().start != 0) {
    throw ConfigError("lr_schedule must start at iteration 0");
  }
  for (std::size_t i = 1; i < c.lr_schedule.size(); ++i) {
    if (c.lr_schedule[i].start <= c.lr_schedule[i - 1].start) {
      throw ConfigError("lr_schedule iterations must be strictly increasing");
    }
  }
  if (c.momentum < 0.0 || c.weight_decay < 0.0) throw ConfigError("momentum and weight_decay must be >= 0");
}

inline double lr_at(const TrainConfig& c, std::size_t iter) {
  double lr = c.lr_schedule.front().lr;
  for (const auto& p : c.lr_schedule) {
    if (p.start > iter) break;
    lr = p.lr;
  }
  return lr;
}

/// gamma = 1, beta = 0, weights ~ N(0, 2/fan_in) drawn layer by layer.
template <Real T>
NetworkParams<T> init_params(const NetworkSpec& spec, std::uint64_t seed) {
  validate(spec);
  auto p = NetworkParams<T>::make(spec);
  Rng rng = Rng::derive({seed, 0x1417});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerDesc d = l < spec.layers.size() ? spec.layers[l] : spec.head();
    const double sd = std::sqrt(2.0 / static_cast<double>(d.fan_in()));
    for (auto& w : p.layers[l].weight.values()) w = static_cast<T>(rng.normal(0.0, sd));
  }
  return p;
}

/// v = momentum v + (g + wd w); w -= lr v. gamma and beta get no decay.
/// Gradients are zeroed afterwards.
template <Real T>
void sgd_step(NetworkParams<T>& params, double lr, double momentum, double weight_decay) {
  auto update = [&](std::span<T> w, std::span<T> g, std::span<T> v, double wd) {
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = static_cast<T>(momentum * v[i] + (g[i] + wd * w[i]));
      w[i] = static_cast<T>(w[i] - lr * v[i]);
    }
  };
  for (auto& l : params.layers) {
    update(l.gamma, l.grad_gamma, l.mom_gamma, 0.0);
    update(l.beta, l.grad_beta, l.mom_beta, 0.0);
    update(l.weight.values(), l.grad_weight.values(), l.mom_weight.values(), weight_decay);
  }
  params.zero_grad();
}

template <Real T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad;  // dL/dlogits
};

/// Mean cross-entropy over the batch with max subtraction;
/// grad = (softmax - onehot) / N.
template <Real T>
LossResult<T> softmax_xent(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("logits must be (N,C), got " + to_string(logits.shape()));
  const std::size_t N = logits.batch(), C = logits.channels();
  if (labels.size() != N) {
    throw DataError(std::to_string(labels.size()) + " labels for " + std::to_string(N) + " rows");
  }
  LossResult<T> r;
  r.grad = Tensor<T>(logits.shape());
  double total = 0.0;
  std::vector<double> e(C);
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw DataError("label " + std::to_string(y) + " outside [0," + std::to_string(C) + ")");
    }
    double m = static_cast<double>(logits.at(n, 0));
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(logits.at(n, c)));
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      e[c] = std::exp(static_cast<double>(logits.at(n, c)) - m);
      z += e[c];
    }
    total += std::log(z) - (static_cast<double>(logits.at(n, static_cast<std::size_t>(y))) - m);
    for (std::size_t c = 0; c < C; ++c) {
      const double onehot = c == static_cast<std::size_t>(y) ? 1.0 : 0.0;
      r.grad.at(n, c) = static_cast<T>((e[c] / z - onehot) / static_cast<double>(N));
    }
  }
  r.loss = total / static_cast<double>(N);
  return r;
}

struct TrainRecord {
  std::size_t iter = 0;
  double loss = 0.0;
  double lr = 0.0;
  double elapsed_ms = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;

  /// Mean loss over the last `window` iterations.
  double final_loss(std::size_t window = 100) const {
    if (records.empty()) return 0.0;
    window = std::min(window, records.size());
    double s = 0.0;
    for (std::size_t i = records.size() - window; i < records.size(); ++i) s += records[i].loss;
    return s / static_cast<double>(window);
  }

  std::vector<double> losses() const {
    std::vector<double> v;
    v.reserve(records.size());
    for (const auto& r : records) v.push_back(r.loss);
    return v;
  }
};

/// Shortest decimal form that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void write_train_log(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot create training log " + path.string());
  out << "iter,loss,lr,elapsed_ms\n";
  for (const auto& r : log.records) {
    out << r.iter << ',' << format_double(r.loss) << ',' << format_double(r.lr) << ','
        << format_double(r.elapsed_ms) << '\n';
  }
  if (!out) throw IoError("write failed for training log " + path.string());
}

/// Iterates seeded epoch permutations, dropping the last partial batch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : n_(n), batch_(batch), seed_(seed), order_(n) {
    if (batch == 0 || batch > n) {
      throw ConfigError("batch size " + std::to_string(batch) + " for a dataset of " + std::to_string(n));
    }
    reshuffle();
  }

  std::span<const std::size_t> next() {
    if (pos_ + batch_ > n_) {
      ++epoch_;
      reshuffle();
    }
    std::span<const std::size_t> s(order_.data() + pos_, batch_);
    pos_ += batch_;
    return s;
  }

  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng = Rng::derive({seed_, 0x5eed, epoch_});
    rng.shuffle(order_.begin(), order_.end());
    pos_ = 0;
  }

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0, epoch_ = 0;
};

/// Called after every iteration with (iteration, loss).
using TrainObserver = std::function<void(std::size_t, double)>;

/// Trains `params` in place. Batch order and augmentation depend only on
/// the seed, so every mode sees the same inputs.
template <Real T>
TrainLog train(const NetworkSpec& spec, const TrainConfig& cfg, const Dataset& data,
               NetworkParams<T>& params, const TrainObserver& observer = {}) {
  validate(cfg);
  check_dataset(data);
  if (data.sample_shape() != spec.input) {
    throw ConfigError("dataset samples " + to_string(data.sample_shape()) + " do not match network input " +
                      to_string(spec.input));
  }
  Engine<T> engine(spec, EngineOptions{cfg.mode, cfg.bits, cfg.quantizer});
  BatchSampler sampler(data.size(), cfg.batch_size, cfg.seed);
  Tensor<T> batch;
  std::vector<int> labels;
  TrainLog log;
  log.records.reserve(cfg.total_iters);
  const auto t0 = std::chrono::steady_clock::now();
  const bool augment = spec.input.size() == 3 && (cfg.augment.flip || cfg.augment.translate);
  for (std::size_t it = 0; it < cfg.total_iters; ++it) {
    data.gather(sampler.next(), batch, labels);
    if (augment) {
      Rng rng = Rng::derive({cfg.seed, 0xa09, it});
      augment_batch(batch, cfg.augment, rng);
    }
    const auto& logits = engine.forward(batch, params);
    const auto loss = softmax_xent(logits, std::span<const int>(labels));
    if (!std::isfinite(loss.loss)) {
      throw StateError("loss became non-finite at iteration " + std::to_string(it));
    }
    engine.backward(loss.grad, params);
    const double lr = lr_at(cfg, it);
    sgd_step(params, lr, cfg.momentum, cfg.weight_decay);
    TrainRecord rec{it, loss.loss, lr, 0.0};
    if (cfg.timing) {
      rec.elapsed_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    log.records.push_back(rec);
    if (observer) observer(it, loss.loss);
  }
  if (!cfg.log_path.empty()) write_train_log(log, cfg.log_path);
  return log;
}

template <Real T>
struct TrainResult {
  TrainLog log;
  NetworkParams<T> params;
};

/// Initializes parameters from the config seed and trains.
template <Real T>
TrainResult<T> train(const NetworkSpec& spec, const TrainConfig& cfg, const Dataset& data) {
  TrainResult<T> r{{}, init_params<T>(spec, cfg.seed)};
  r.log = train(spec, cfg, data, r.params);
  return r;
}

/// Top-1 error using running batch-norm statistics and exact computation.
template <Real T>
double evaluate(const NetworkSpec& spec, NetworkParams<T>& params, const Dataset& data,
                std::size_t batch_size = 250) {
  check_dataset(data);
  Engine<T> engine(spec, EngineOptions{TapeMode::exact, 8, QuantizerKind::fixed_point});
  std::vector<std::size_t> idx;
  Tensor<T> batch;
  std::vector<int> labels;
  std::size_t wrong = 0;
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    const std::size_t hi = std::min(data.size(), lo + batch_size);
    idx.resize(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    data.gather(std::span<const std::size_t>(idx), batch, labels);
    const auto& logits = engine.infer(batch, params);
    for (std::size_t n = 0; n < idx.size(); ++n) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.channels(); ++c)
        if (logits.at(n, c) > logits.at(n, best)) best = c;
      if (static_cast<int>(best) != labels[n]) ++wrong;
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(data.size());
}

}  // namespace tapeprop

#endif  // TAPEPROP_TRAINKIT_HPP
