// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. run_cli is kept separate from main() so tests can
// drive it with captured streams.

#ifndef TAPEPROP_TOOLS_CLI_APP_HPP
#define TAPEPROP_TOOLS_CLI_APP_HPP

#include <cstdint>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tapeprop/tapeprop.hpp"

namespace tapeprop::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline void print_memory_report(std::ostream& out, const MemoryReport& r, TapeMode mode, int bits) {
  out << "mode=" << to_string(mode) << " bits=" << bits << " batch=" << r.batch << " depth=" << r.depth
      << " width=" << r.width << '\n';
  out << "persistent_tape_bytes=" << r.persistent_tape_bytes << '\n';
  out << "transient_buffer_bytes=" << r.transient_buffer_bytes << " (" << r.slots << " x " << r.slot_bytes
      << ")\n";
  out << "parameter_bytes=" << r.parameter_bytes << '\n';
  out << "exact_persistent_bytes=" << r.exact_persistent_bytes << '\n';
  out << "total_bytes=" << r.total_bytes() << '\n';
  out << "ratio_vs_exact=" << std::fixed << std::setprecision(4) << r.ratio_vs_exact << '\n';
  out.unsetf(std::ios::floatfield);
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Memory-efficient training with quantized activation tapes", "tapeprop"};
  app.require_subcommand(1);

  std::string config_path, out_path, engine_name = "approx", depths_arg = "4,8,16,32";
  int bits = 8;
  std::uint64_t seed = 1;
  std::size_t batches = 100, batch = 128, iters = 0, warmup = 0, count = 1000000, channels = 8;
  bool timing = false;

  auto* train = app.add_subcommand("train", "Train a network and write the loss log");
  train->add_option("--config", config_path, "Run description (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--engine", engine_name, "Tape mode")->check(CLI::IsMember({"exact", "approx", "naive"}));
  train->add_option("--bits", bits, "Bits per stored activation")->check(CLI::IsMember({1, 2, 4, 8}));
  train->add_option("--seed", seed, "Seed for initialization, batching and augmentation");
  train->add_option("--out", out_path, "CSV loss log (iter,loss,lr,elapsed_ms)");
  train->add_option("--iters", iters, "Override total iterations");
  train->add_option("--batch", batch, "Override batch size");
  train->add_flag("--timing", timing, "Record wall-clock time in elapsed_ms (breaks byte-reproducibility)");

  auto* grad = app.add_subcommand("gradcheck", "Approximation error of weight gradients against SGD noise");
  grad->add_option("--config", config_path, "Run description (JSON)")->required()->check(CLI::ExistingFile);
  grad->add_option("--bits", bits, "Bits per stored activation")->check(CLI::IsMember({1, 2, 4, 8}));
  grad->add_option("--batches", batches, "Number of batches M")->check(CLI::Range(2, 1000000));
  grad->add_option("--batch", batch, "Batch size");
  grad->add_option("--warmup", warmup, "Exact-mode training iterations before measuring");
  grad->add_option("--seed", seed, "Seed");
  grad->add_option("--out", out_path, "CSV output");

  auto* mem = app.add_subcommand("memreport", "Analytic memory use of a network");
  mem->add_option("--config", config_path, "Run description (JSON)")->required()->check(CLI::ExistingFile);
  mem->add_option("--bits", bits, "Bits per stored activation")->check(CLI::IsMember({1, 2, 4, 8}));
  mem->add_option("--batch", batch, "Batch size");
  mem->add_option("--engine", engine_name, "Tape mode")->check(CLI::IsMember({"exact", "approx", "naive"}));

  auto* quant = app.add_subcommand("quantcheck", "Quantizer error-bound and sign property check");
  quant->add_option("--bits", bits, "Bits per code")->check(CLI::IsMember({1, 2, 4, 8}));
  quant->add_option("--count", count, "Number of random values");
  quant->add_option("--seed", seed, "Seed");

  auto* sweep = app.add_subcommand("sweep", "First-layer gradient error of naive and proposed modes over depth");
  sweep->add_option("--config", config_path, "Run description (JSON); its data section is used")
      ->required()
      ->check(CLI::ExistingFile);
  sweep->add_option("--depths", depths_arg, "Comma-separated depths");
  sweep->add_option("--bits", bits, "Bits per stored activation")->check(CLI::IsMember({1, 2, 4, 8}));
  sweep->add_option("--batches", batches, "Batches averaged per depth (default 20)");
  sweep->add_option("--batch", batch, "Batch size");
  sweep->add_option("--channels", channels, "Channels per convolution");
  sweep->add_option("--seed", seed, "Seed");
  sweep->add_option("--out", out_path, "CSV output");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return kExitUsage;
  }

  auto emit = [&](const std::string& csv) {
    if (out_path.empty()) out << csv;
    else write_text_file(out_path, csv);
  };

  try {
    if (train->parsed()) {
      RunConfig rc = load_run_config(config_path);
      rc.train.mode = parse_tape_mode(engine_name);
      if (rc.train.mode != TapeMode::exact || train->count("--bits")) rc.train.bits = bits;
      rc.train.seed = seed;
      if (iters) rc.train.total_iters = iters;
      if (train->count("--batch")) rc.train.batch_size = batch;
      rc.train.timing = timing;
      rc.train.log_path = out_path;
      const Dataset data = load_dataset(rc.data, rc.network);
      auto result = tapeprop::train<float>(rc.network, rc.train, data);
      out << "final_loss=" << format_double(result.log.final_loss()) << '\n';
      out << "train_error=" << format_double(evaluate(rc.network, result.params, data)) << '\n';
    } else if (grad->parsed()) {
      RunConfig rc = load_run_config(config_path);
      const Dataset data = load_dataset(rc.data, rc.network);
      auto params = init_params<float>(rc.network, seed);
      if (warmup > 0) {
        TrainConfig tc = rc.train;
        tc.mode = TapeMode::exact;
        tc.total_iters = warmup;
        tc.seed = seed;
        tc.log_path.clear();
        tapeprop::train(rc.network, tc, data, params);
      }
      const auto report = grad_error_report(rc.network, params, data, bits, batches,
                                            grad->count("--batch") ? batch : rc.train.batch_size, seed);
      emit(grad_report_csv(report));
    } else if (mem->parsed()) {
      RunConfig rc = load_run_config(config_path);
      const TapeMode mode = parse_tape_mode(engine_name);
      print_memory_report(out, memory_report(rc.network, batch, mode, bits), mode, bits);
    } else if (quant->parsed()) {
      const auto r = quantizer_property_check(bits, count, seed);
      out << "bits=" << r.bits << " values=" << r.values << " unclipped=" << r.unclipped
          << " clipped=" << r.clipped << " bound_violations=" << r.bound_violations
          << " sign_violations=" << r.sign_violations
          << " max_error_over_bound=" << format_double(r.max_error_over_bound) << '\n';
      out << (r.passed() ? "PASS" : "FAIL") << '\n';
      return r.passed() ? kExitOk : kExitFailure;
    } else if (sweep->parsed()) {
      RunConfig rc = load_run_config(config_path);
      std::vector<std::size_t> depths;
      std::stringstream ss(depths_arg);
      for (std::string tok; std::getline(ss, tok, ',');) {
        try {
          std::size_t used = 0;
          const unsigned long v = std::stoul(tok, &used);
          if (used != tok.size() || v == 0) throw std::invalid_argument(tok);
          depths.push_back(v);
        } catch (const std::exception&) {
          err << "usage error: bad depth '" << tok << "'\n";
          return kExitUsage;
        }
      }
      if (!sweep->count("--batches")) batches = 20;
      const Dataset data = load_dataset(rc.data, rc.network);
      const auto rows = naive_vs_proposed_depth_sweep<float>(depths, bits, data, batches,
                                                             sweep->count("--batch") ? batch : 32, channels, seed);
      emit(sweep_csv(rows));
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace tapeprop::cli

#endif  // TAPEPROP_TOOLS_CLI_APP_HPP
