// Copyright 2026 The Tapeprop Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "cli_app.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return tapeprop::cli::run_cli(args, std::cout, std::cerr);
}
