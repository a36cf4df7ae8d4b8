// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli_app.hpp"

using namespace tapeprop;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string config(const std::string& name) { return std::string(TAPEPROP_CONFIG_DIR) + "/" + name; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(invoke({}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"frobnicate"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"quantcheck", "--bits", "3"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"train"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"train", "--config", "/nonexistent.json"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"train", "--config", config("blobs_chain.json"), "--engine", "fast"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"sweep", "--config", config("sweep_chain.json"), "--depths", "4,x"}).code, cli::kExitUsage);
  EXPECT_EQ(invoke({"--help"}).code, cli::kExitOk);
}

TEST(Cli, RuntimeErrorsExitOne) {
  const auto dir = fs::temp_directory_path() / "tapeprop_cli_bad";
  fs::create_directories(dir);
  const auto bad = dir / "bad.json";
  std::ofstream(bad) << R"({"network": {"preset": "resnet", "depth": 21}})";
  const auto r = invoke({"memreport", "--config", bad.string()});
  EXPECT_EQ(r.code, cli::kExitFailure);
  EXPECT_NE(r.err.find("configuration error"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, QuantcheckPasses) {
  const auto r = invoke({"quantcheck", "--bits", "4", "--count", "100000"});
  EXPECT_EQ(r.code, cli::kExitOk);
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_NE(r.out.find("bound_violations=0"), std::string::npos);
}

TEST(Cli, MemreportUniform164) {
  const auto r = invoke({"memreport", "--config", config("uniform164.json"), "--bits", "4"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  const auto pos = r.out.find("ratio_vs_exact=");
  ASSERT_NE(pos, std::string::npos);
  const double ratio = std::stod(r.out.substr(pos + 15));
  EXPECT_NEAR(ratio, 0.143, 0.005);
}

TEST(Cli, TrainWritesByteIdenticalLogs) {
  const auto dir = fs::temp_directory_path() / "tapeprop_cli_train";
  fs::create_directories(dir);
  const auto a = dir / "a.csv", b = dir / "b.csv";
  for (const auto& p : {a, b}) {
    const auto r = invoke({"train", "--config", config("blobs_chain.json"), "--engine", "approx", "--bits", "4",
                        "--seed", "3", "--iters", "40", "--out", p.string()});
    ASSERT_EQ(r.code, cli::kExitOk) << r.err;
    EXPECT_NE(r.out.find("final_loss="), std::string::npos);
  }
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_EQ(slurp(a).substr(0, 23), "iter,loss,lr,elapsed_ms");
  fs::remove_all(dir);
}

TEST(Cli, GradcheckAndSweepCsv) {
  const auto g1 = invoke({"gradcheck", "--config", config("blobs_chain.json"), "--batches", "3", "--batch", "16"});
  const auto g2 = invoke({"gradcheck", "--config", config("blobs_chain.json"), "--batches", "3", "--batch", "16"});
  ASSERT_EQ(g1.code, cli::kExitOk) << g1.err;
  EXPECT_EQ(g1.out, g2.out);
  EXPECT_EQ(g1.out.substr(0, 6), "layer,");
  const auto s = invoke({"sweep", "--config", config("sweep_chain.json"), "--depths", "1,2", "--batches", "2",
                      "--batch", "8", "--channels", "4"});
  ASSERT_EQ(s.code, cli::kExitOk) << s.err;
  EXPECT_EQ(s.out.substr(0, 6), "depth,");
  EXPECT_EQ(std::count(s.out.begin(), s.out.end(), '\n'), 3);
}
