// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// Writes a synthetic multilingual corpus as <out>/<language>/doc_NNNNN.txt.

#include <CLI11.hpp>

#include <iostream>

#include "moelab/data.hpp"
#include "moelab/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic multilingual toy corpus", "moelab-toycorpus"};
  std::string out;
  moelab::ToyCorpusOptions options;
  app.add_option("--out", out, "Output directory")->required();
  app.add_option("--bytes", options.total_bytes, "Approximate total size in bytes");
  app.add_option("--document-bytes", options.document_bytes, "Bytes per document");
  app.add_option("--seed", options.seed, "Generator seed");
  app.add_option("--languages", options.languages, "Language codes")->delimiter(',');
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  try {
    moelab::write_toy_corpus(out, options);
  } catch (const std::exception& e) {
    std::cerr << "moelab-toycorpus: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
