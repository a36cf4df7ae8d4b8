// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0
//
// Whole-network forward/backward over a fixed set of W+1 reusable buffers.
// Only the per-layer tapes persist between the two passes.

#ifndef TAPEPROP_ENGINE_HPP
#define TAPEPROP_ENGINE_HPP

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "tapeprop/errors.hpp"
#include "tapeprop/network_spec.hpp"
#include "tapeprop/prelayer.hpp"
#include "tapeprop/tensor.hpp"

namespace tapeprop {

/// Parameters of every body layer followed by the classifier head.
template <Real T>
struct NetworkParams {
  std::vector<LayerParams<T>> layers;

  static NetworkParams make(const NetworkSpec& s) {
    NetworkParams p;
    for (const auto& d : s.layers) p.layers.push_back(LayerParams<T>::make(d));
    p.layers.push_back(LayerParams<T>::make(s.head()));
    return p;
  }
  LayerParams<T>& head() { return layers.back(); }
  const LayerParams<T>& head() const { return layers.back(); }
  void zero_grad() {
    for (auto& l : layers) l.zero_grad();
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Buffer pool

enum class SlotRole { activation, gradient };

struct PoolStats {
  std::size_t slots = 0;
  std::size_t slot_capacity = 0;        // elements reserved per slot
  std::size_t peak_live = 0;            // slots held at once, any role
  std::size_t peak_live_activations = 0;
  std::size_t peak_activation_bytes = 0;  // full-precision activation bytes at that peak
  std::size_t acquisitions = 0;
};

/// Fixed set of equally sized tensors handed out and returned by index.
/// Storage is reserved once; a slot that outgrows it is a bug the
/// instrumented capacity exposes.
template <Real T>
class BufferPool {
 public:
  BufferPool() = default;
  BufferPool(std::size_t slots, std::size_t capacity) { reset(slots, capacity); }

  void reset(std::size_t slots, std::size_t capacity) {
    buffers_.assign(slots, Tensor<T>());
    for (auto& b : buffers_) b.reserve(capacity);
    live_.assign(slots, false);
    role_.assign(slots, SlotRole::activation);
    stats_ = PoolStats{};
    stats_.slots = slots;
    stats_.slot_capacity = capacity;
  }

  std::size_t acquire(SlotRole role) {
    for (std::size_t i = 0; i < live_.size(); ++i) {
      if (!live_[i]) {
        live_[i] = true;
        role_[i] = role;
        ++stats_.acquisitions;
        note_usage();
        return i;
      }
    }
    throw StateError("buffer pool exhausted (" + std::to_string(live_.size()) + " slots)");
  }

  void release(std::size_t i) {
    if (i >= live_.size() || !live_[i]) throw StateError("releasing a slot that is not held");
    live_[i] = false;
  }

  void release_all() { std::fill(live_.begin(), live_.end(), false); }

  Tensor<T>& operator[](std::size_t i) { return buffers_.at(i); }
  const Tensor<T>& operator[](std::size_t i) const { return buffers_.at(i); }

  std::size_t live_count() const { return std::count(live_.begin(), live_.end(), true); }
  std::size_t slots() const { return buffers_.size(); }

  /// Bytes actually reserved by all slots.
  std::size_t capacity_bytes() const {
    std::size_t b = 0;
    for (const auto& t : buffers_) b += t.capacity() * sizeof(T);
    return b;
  }

  const PoolStats& stats() const { return stats_; }
  void reset_stats() {
    const auto slots = stats_.slots, cap = stats_.slot_capacity;
    stats_ = PoolStats{};
    stats_.slots = slots;
    stats_.slot_capacity = cap;
  }

  /// Re-evaluates peaks; call after resizing a live slot.
  void note_usage() {
    std::size_t live = 0, acts = 0, act_bytes = 0;
    for (std::size_t i = 0; i < live_.size(); ++i) {
      if (!live_[i]) continue;
      ++live;
      if (role_[i] == SlotRole::activation) {
        ++acts;
        act_bytes += buffers_[i].bytes();
      }
    }
    stats_.peak_live = std::max(stats_.peak_live, live);
    stats_.peak_live_activations = std::max(stats_.peak_live_activations, acts);
    stats_.peak_activation_bytes = std::max(stats_.peak_activation_bytes, act_bytes);
  }

 private:
  std::vector<Tensor<T>> buffers_;
  std::vector<bool> live_;
  std::vector<SlotRole> role_;
  PoolStats stats_;
};

// ---------------------------------------------------------------------------
// Shortcuts

/// out[n, c, h, w] += in[n, c, h*s, w*s] for c < channels(in); extra output
/// channels receive nothing (zero padding).
template <Real T>
void add_shortcut(const Tensor<T>& in, Tensor<T>& out) {
  const std::size_t s = shortcut_stride(in.shape(), out.shape());
  const std::size_t N = out.batch(), Ci = in.channels(), Co = out.channels();
  const std::size_t OH = out.height(), OW = out.width(), IH = in.height(), IW = in.width();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < Ci; ++c) {
      const T* src = in.data() + (n * Ci + c) * IH * IW;
      T* dst = out.data() + (n * Co + c) * OH * OW;
      for (std::size_t h = 0; h < OH; ++h)
        for (std::size_t w = 0; w < OW; ++w) dst[h * OW + w] += src[h * s * IW + w * s];
    }
}

/// Adjoint of add_shortcut: g_in[n, c, h*s, w*s] += g_out[n, c, h, w].
template <Real T>
void add_shortcut_adjoint(const Tensor<T>& g_out, Tensor<T>& g_in) {
  const std::size_t s = shortcut_stride(g_in.shape(), g_out.shape());
  const std::size_t N = g_out.batch(), Ci = g_in.channels(), Co = g_out.channels();
  const std::size_t OH = g_out.height(), OW = g_out.width(), IH = g_in.height(),
                    IW = g_in.width();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < Ci; ++c) {
      const T* src = g_out.data() + (n * Co + c) * OH * OW;
      T* dst = g_in.data() + (n * Ci + c) * IH * IW;
      for (std::size_t h = 0; h < OH; ++h)
        for (std::size_t w = 0; w < OW; ++w) dst[h * s * IW + w * s] += src[h * OW + w];
    }
}

// ---------------------------------------------------------------------------
// Engine

struct EngineOptions {
  TapeMode mode = TapeMode::approx;
  int bits = 8;
  QuantizerKind quantizer = QuantizerKind::fixed_point;
};

/// Largest activation (elements) that ever occupies a pool slot.
inline std::size_t max_activation_numel(const NetworkSpec& s, std::size_t batch) {
  std::size_t m = 0;
  for (const auto& sh : s.activation_shapes(batch)) m = std::max(m, shape_numel(sh));
  return m;
}

template <Real T>
class Engine {
 public:
  Engine(NetworkSpec spec, EngineOptions opts) : spec_(std::move(spec)), opts_(opts) {
    validate(spec_);
    if (opts_.mode != TapeMode::exact) check_bits(opts_.bits);
    width_ = architecture_width(spec_);
    const std::size_t L = spec_.layers.size();
    starts_.assign(L, false);
    ends_.assign(L, false);
    for (const auto& b : spec_.blocks) {
      starts_[b.first] = true;
      ends_[b.last] = true;
    }
  }

  const NetworkSpec& spec() const { return spec_; }
  const EngineOptions& options() const { return opts_; }
  std::size_t width() const { return width_; }
  std::size_t slot_count() const { return width_ + 1; }

  /// Training-mode forward; records tapes and returns the logits.
  const Tensor<T>& forward(const Tensor<T>& batch, NetworkParams<T>& params) {
    run_forward(batch, params, true);
    have_tapes_ = true;
    return logits_;
  }

  /// Evaluation-mode forward with running statistics; no tapes.
  const Tensor<T>& infer(const Tensor<T>& batch, NetworkParams<T>& params) {
    have_tapes_ = false;
    run_forward(batch, params, false);
    pool_.release_all();
    return logits_;
  }

  /// Accumulates parameter gradients from dL/dlogits. Consumes the tapes.
  void backward(const Tensor<T>& grad_logits, NetworkParams<T>& params) {
    if (!have_tapes_) throw StateError("backward without a preceding training forward");
    check_params(params);
    const std::size_t L = spec_.layers.size();
    const LayerDesc head = spec_.head();

    std::size_t g = pool_.acquire(SlotRole::gradient);
    layer_backward_core(grad_logits, head_tape_, params.head(), head, pool_[g], pool_[head_slot_],
                        BackwardOptions{L > 0});
    pool_.note_usage();
    pool_.release(head_slot_);
    head_tape_.borrowed = nullptr;

    std::size_t retained = kNone;  // gradient at a block output, kept for the shortcut
    for (std::size_t l = L; l-- > 0;) {
      if (ends_[l]) retained = g;
      const std::size_t work = pool_.acquire(SlotRole::gradient);
      const std::size_t scratch = g == retained ? pool_.acquire(SlotRole::gradient) : g;
      layer_backward_core(pool_[g], tapes_[l], params.layers[l], spec_.layers[l], pool_[work],
                          pool_[scratch], BackwardOptions{l > 0});
      pool_.note_usage();
      pool_.release(scratch);
      if (starts_[l]) {
        if (l > 0) add_shortcut_adjoint(pool_[retained], pool_[work]);
        pool_.release(retained);
        retained = kNone;
      }
      g = work;
    }
    pool_.release(g);
    have_tapes_ = false;
  }

  const std::vector<LayerTape<T>>& tapes() const { return tapes_; }

  /// Bytes held by the body tapes right now.
  std::size_t persistent_bytes() const {
    std::size_t b = 0;
    for (const auto& t : tapes_) b += t.persistent_bytes();
    return b;
  }

  const BufferPool<T>& pool() const { return pool_; }
  void reset_pool_stats() { pool_.reset_stats(); }

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  void check_params(const NetworkParams<T>& params) const {
    if (params.layers.size() != spec_.layers.size() + 1) {
      throw StateError("parameter set has " + std::to_string(params.layers.size()) +
                       " layers, network has " + std::to_string(spec_.depth()));
    }
  }

  void ensure_pool(std::size_t batch) {
    const std::size_t need = max_activation_numel(spec_, batch);
    if (pool_.slots() != slot_count() || pool_.stats().slot_capacity < need) {
      pool_.reset(slot_count(), need);
    }
    pool_.release_all();
  }

  void run_forward(const Tensor<T>& batch, NetworkParams<T>& params, bool training) {
    check_params(params);
    if (batch.rank() < 2 || batch.shape() != spec_.batch_shape(batch.batch())) {
      throw DimensionError("input batch " + to_string(batch.shape()) + " does not match " +
                           to_string(spec_.input));
    }
    ensure_pool(batch.batch());
    const std::size_t L = spec_.layers.size();
    tapes_.resize(L);

    std::size_t cur = pool_.acquire(SlotRole::activation);
    pool_[cur].reshape(batch.shape());
    std::copy(batch.values().begin(), batch.values().end(), pool_[cur].values().begin());
    pool_.note_usage();

    std::size_t residual = kNone;
    for (std::size_t l = 0; l < L; ++l) {
      if (starts_[l]) residual = cur;
      const std::size_t work = cur == residual ? pool_.acquire(SlotRole::activation) : cur;
      const std::size_t out = pool_.acquire(SlotRole::activation);
      layer_forward_core(pool_[cur], params.layers[l], spec_.layers[l], opts_.mode, opts_.bits,
                         opts_.quantizer, training, pool_[work], pool_[out],
                         training ? &tapes_[l] : nullptr);
      pool_.note_usage();
      pool_.release(work);
      if (ends_[l]) {
        add_shortcut(pool_[residual], pool_[out]);
        pool_.release(residual);
        residual = kNone;
      }
      cur = out;
    }

    // The head keeps its pre-ReLU input in the current slot at full precision.
    head_tape_ = LayerTape<T>{};
    head_tape_.borrowed = &pool_[cur];
    layer_forward_core(pool_[cur], params.head(), spec_.head(), TapeMode::exact, opts_.bits,
                       opts_.quantizer, training, pool_[cur], logits_,
                       training ? &head_tape_ : nullptr);
    head_slot_ = cur;
    if (!training) head_tape_.borrowed = nullptr;
  }

  NetworkSpec spec_;
  EngineOptions opts_;
  std::size_t width_ = 1;
  std::vector<bool> starts_, ends_;
  BufferPool<T> pool_;
  std::vector<LayerTape<T>> tapes_;
  LayerTape<T> head_tape_;
  std::size_t head_slot_ = kNone;
  Tensor<T> logits_;
  bool have_tapes_ = false;
};

// ---------------------------------------------------------------------------
// Analytic memory accounting

struct LayerMemory {
  std::size_t layer = 0;
  Shape activation;
  std::size_t tape_bytes = 0;
  std::size_t exact_tape_bytes = 0;
};

struct MemoryReport {
  std::size_t batch = 0;
  std::size_t depth = 0;
  std::size_t width = 0;
  std::size_t slots = 0;
  std::size_t slot_bytes = 0;
  std::size_t persistent_tape_bytes = 0;
  std::size_t transient_buffer_bytes = 0;
  std::size_t parameter_bytes = 0;
  std::size_t exact_persistent_bytes = 0;
  double ratio_vs_exact = 0.0;  // (persistent + transient) / exact persistent
  std::vector<LayerMemory> layers;

  std::size_t activation_bytes() const { return persistent_tape_bytes + transient_buffer_bytes; }
  std::size_t total_bytes() const { return activation_bytes() + parameter_bytes; }
};

/// Memory the engine uses for a batch of `batch` samples, without running it.
/// Parameter bytes count value, gradient and momentum for gamma, beta and
/// weights plus the two running statistics.
inline MemoryReport memory_report(const NetworkSpec& spec, std::size_t batch, TapeMode mode,
                                  int bits, std::size_t scalar_size = sizeof(float),
                                  QuantizerKind quantizer = QuantizerKind::fixed_point) {
  validate(spec);
  if (mode != TapeMode::exact) check_bits(bits);
  MemoryReport r;
  r.batch = batch;
  r.depth = spec.depth();
  r.width = architecture_width(spec);
  r.slots = r.width + 1;
  r.slot_bytes = max_activation_numel(spec, batch) * scalar_size;
  r.transient_buffer_bytes = r.slots * r.slot_bytes;
  const bool quantized = mode != TapeMode::exact && quantizer == QuantizerKind::fixed_point;
  const auto shapes = spec.activation_shapes(batch);
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    LayerMemory m;
    m.layer = l;
    m.activation = shapes[l];
    m.tape_bytes = tape_bytes_for(shapes[l], quantized, bits, scalar_size);
    m.exact_tape_bytes = tape_bytes_for(shapes[l], false, bits, scalar_size);
    r.persistent_tape_bytes += m.tape_bytes;
    r.exact_persistent_bytes += m.exact_tape_bytes;
    r.layers.push_back(std::move(m));
  }
  auto add_params = [&](const LayerDesc& d) {
    const std::size_t c = d.in_channels;
    r.parameter_bytes += (3 * (2 * c + shape_numel(d.weight_shape())) + 2 * c) * scalar_size;
  };
  for (const auto& d : spec.layers) add_params(d);
  add_params(spec.head());
  r.ratio_vs_exact = r.exact_persistent_bytes == 0
                         ? 0.0
                         : static_cast<double>(r.activation_bytes()) /
                               static_cast<double>(r.exact_persistent_bytes);
  return r;
}

}  // namespace tapeprop

#endif  // TAPEPROP_ENGINE_HPP
