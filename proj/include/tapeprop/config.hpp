// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON run documents: {"network": ..., "train": ..., "data": ...}.

#ifndef TAPEPROP_CONFIG_HPP
#define TAPEPROP_CONFIG_HPP

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"
#include "tapeprop/data_io.hpp"
#include "tapeprop/errors.hpp"
#include "tapeprop/network_spec.hpp"
#include "tapeprop/trainkit.hpp"

namespace tapeprop {

struct DataConfig {
  // "cifar10": binary batches under `dir` (or $CIFAR10_DIR when empty).
  // "blobs": synth_blobs with the network's input shape.
  // "synthetic_cifar": synth_cifar_like images, standardized like CIFAR-10.
  std::string source = "blobs";
  std::string dir;
  std::optional<std::size_t> limit;
  std::size_t n = 1000;
  double separation = 10.0;
  std::uint64_t seed = 7;
};

struct RunConfig {
  NetworkSpec network;
  TrainConfig train;
  DataConfig data;
};

inline QuantizerKind parse_quantizer(const std::string& s) {
  if (s == "fixed_point") return QuantizerKind::fixed_point;
  if (s == "identity") return QuantizerKind::identity;
  throw ConfigError("unknown quantizer '" + s + "'");
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("mode")) c.mode = parse_tape_mode(j.at("mode").get<std::string>());
    c.bits = j.value("bits", c.bits);
    if (j.contains("quantizer")) c.quantizer = parse_quantizer(j.at("quantizer").get<std::string>());
    c.batch_size = j.value("batch_size", c.batch_size);
    c.total_iters = j.value("total_iters", c.total_iters);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("lr_schedule")) {
      c.lr_schedule.clear();
      for (const auto& p : j.at("lr_schedule"))
        c.lr_schedule.push_back({p.at(0).get<std::size_t>(), p.at(1).get<double>()});
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      c.augment.flip = a.value("flip", c.augment.flip);
      c.augment.translate = a.value("translate", c.augment.translate);
      c.augment.pad = a.value("pad", c.augment.pad);
    }
    c.log_path = j.value("log_path", c.log_path);
    c.timing = j.value("timing", c.timing);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  validate(c);
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j{{"mode", to_string(c.mode)},
                   {"bits", c.bits},
                   {"quantizer", c.quantizer == QuantizerKind::identity ? "identity" : "fixed_point"},
                   {"batch_size", c.batch_size},
                   {"total_iters", c.total_iters},
                   {"momentum", c.momentum},
                   {"weight_decay", c.weight_decay},
                   {"seed", c.seed},
                   {"augment", {{"flip", c.augment.flip}, {"translate", c.augment.translate}, {"pad", c.augment.pad}}},
                   {"log_path", c.log_path},
                   {"timing", c.timing}};
  j["lr_schedule"] = nlohmann::json::array();
  for (const auto& p : c.lr_schedule) j["lr_schedule"].push_back({p.start, p.lr});
  return j;
}

inline DataConfig data_config_from_json(const nlohmann::json& j) {
  DataConfig d;
  try {
    d.source = j.value("source", d.source);
    d.dir = j.value("dir", d.dir);
    if (j.contains("limit")) d.limit = j.at("limit").get<std::size_t>();
    d.n = j.value("n", d.n);
    d.separation = j.value("separation", d.separation);
    d.seed = j.value("seed", d.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data config: ") + e.what());
  }
  if (d.source != "cifar10" && d.source != "blobs" && d.source != "synthetic_cifar") {
    throw ConfigError("unknown data source '" + d.source + "'");
  }
  return d;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("network")) throw ConfigError("run config needs a \"network\" object");
  RunConfig r;
  r.network = network_from_json(j.at("network"));
  if (j.contains("train")) r.train = train_config_from_json(j.at("train"));
  if (j.contains("data")) r.data = data_config_from_json(j.at("data"));
  return r;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(read_json_file(path));
}

/// Standardizes a synthetic image set the way CIFAR-10 is standardized.
inline Dataset dataset_from_synth_images(const SynthImages& s) {
  const std::size_t n = s.labels.size();
  Dataset d;
  d.classes = 10;
  d.labels.assign(s.labels.begin(), s.labels.end());
  d.images = Tensor<float>(Shape{n, 3, kCifarSide, kCifarSide});
  for (std::size_t i = 0; i < s.pixels.size(); ++i) d.images[i] = static_cast<float>(s.pixels[i]) / 255.0f;
  ChannelVector<double> mean, stddev;
  compute_standardization(d, mean, stddev);
  apply_standardization(d, mean, stddev);
  return d;
}

inline Dataset load_dataset(const DataConfig& c, const NetworkSpec& spec) {
  if (c.source == "cifar10") {
    std::string dir = c.dir;
    if (dir.empty()) {
      const char* env = std::getenv("CIFAR10_DIR");
      if (!env) throw ConfigError("cifar10 source needs \"dir\" or CIFAR10_DIR");
      dir = env;
    }
    return load_cifar10(dir, c.limit);
  }
  if (c.source == "synthetic_cifar") return dataset_from_synth_images(synth_cifar_like(c.seed, c.n));
  return synth_blobs(c.seed, c.n, spec.classes, spec.input, c.separation);
}

}  // namespace tapeprop

#endif  // TAPEPROP_CONFIG_HPP
