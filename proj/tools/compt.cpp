// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "compt/cli.hpp"
#include "compt/platform.hpp"

int main(int argc, char** argv) {
    compt::tune_allocator();
    std::vector<std::string> args(argv + 1, argv + argc);
    return compt::cli::run(args, std::cout, std::cerr);
}
