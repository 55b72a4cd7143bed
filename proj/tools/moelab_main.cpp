// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "moelab/cli.hpp"

int main(int argc, char** argv) { return moelab::run_cli(argc, argv, std::cout, std::cerr); }
