// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// Token shards, tokenization, batch sampling and labeled evaluation sets.
//
// Shard layout (little-endian):
//
//   offset  size  field
//   0       8     magic "MOEDAT01"
//   8       4     format version (1)
//   12      4     vocab_size
//   16      4     token width in bits (16 or 32)
//   20      4     reserved, 0
//   24      8     token count
//   32      8     document count
//   40      8     label-table offset (bytes from file start)
//   48      ...   token stream, token count × width/8 bytes
//   ...     20×D  document index: u64 start, u64 length, u32 label id (0xFFFFFFFF = none)
//   label-table offset:
//           4     label count, then per label: u32 byte length + UTF-8 bytes

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moelab/model.hpp"

namespace moelab {

inline constexpr std::uint32_t kNoLabel = 0xFFFFFFFFu;

struct DocumentSpan {
  std::uint64_t start = 0;
  std::uint64_t length = 0;
  std::uint32_t label = kNoLabel;

  bool operator==(const DocumentSpan&) const = default;
};

struct TokenShard {
  std::uint32_t vocab_size = 256;
  std::vector<std::int32_t> tokens;
  std::vector<DocumentSpan> documents;
  std::vector<std::string> labels;

  /// 16 when every id fits, else 32.
  std::uint32_t token_width_bits() const { return vocab_size <= 65536 ? 16 : 32; }
  /// Empty string for unlabeled documents.
  std::string_view label_of(std::size_t document) const;
  bool has_labels() const { return !labels.empty(); }

  /// Throws DataError unless ids < vocab_size and documents are disjoint,
  /// ordered and cover the stream.
  void validate() const;

  std::string serialize() const;
  static TokenShard deserialize(std::string_view bytes);
  void write(const std::filesystem::path& path) const;
  static TokenShard read(const std::filesystem::path& path);

  bool operator==(const TokenShard&) const = default;
};

/// Byte-level tokenizer: vocabulary 256, id = byte value.
class ByteTokenizer {
 public:
  static constexpr int kVocabSize = 256;
  std::vector<std::int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::int32_t> ids) const;
};

/// Tokenizes with the byte-level tokenizer; never fails.
std::vector<std::int32_t> tokenize(std::string_view text, const ByteTokenizer& tokenizer = {});

/// Passes a pre-tokenized stream through unchanged after range-checking ids
/// against `vocab_size`. Throws DataError for out-of-range ids.
std::vector<std::int32_t> ingest_pretokenized(std::span<const std::int32_t> ids, std::uint32_t vocab_size);

struct CorpusDocument {
  std::string name;   // path relative to the corpus root
  std::string label;  // language or category; empty when unlabeled
  std::vector<std::int32_t> tokens;
};

struct PrepareOptions {
  bool labels = false;         // label = first directory component below the corpus root
  double split_fraction = 0.9; // share of documents assigned to training
  std::optional<std::uint32_t> vocab_size;  // required when the corpus has `.ids` files
};

struct PreparedShards {
  TokenShard train;
  TokenShard val;
};

/// Reads `*.txt` (byte-level) and `*.ids` (little-endian uint32 ids) files
/// under `corpus`. Documents are ordered by a content hash and the first
/// round(split·n) go to training, so the split is deterministic. Throws
/// DataError for an empty corpus, unreadable files or a bad split fraction.
PreparedShards prepare(const std::filesystem::path& corpus, const PrepareOptions& options);

/// Splits in-memory documents the same way prepare() does.
PreparedShards split_documents(std::vector<CorpusDocument> documents, double split_fraction,
                               std::uint32_t vocab_size);

/// Assembles a shard from documents in the given order.
TokenShard build_shard(const std::vector<CorpusDocument>& documents, std::uint32_t vocab_size);

/// Samples `batch` windows of seq_len + 1 tokens; targets are inputs shifted by
/// one. With `within_documents` every window lies inside one document and
/// carries its label; otherwise window starts are uniform over the stream and
/// windows wrap around its end. Throws DataError if the shard is too small.
Batch sample_batch(const TokenShard& shard, std::size_t batch, std::size_t seq_len, bool within_documents,
                   std::mt19937_64& rng);

struct EvalCategory {
  std::string label;
  std::vector<std::vector<std::int32_t>> sequences;
};

/// Labeled evaluation sequences read from `set/category/*.txt`.
struct EvalCategorySet {
  std::string name;
  std::vector<EvalCategory> categories;

  /// Files are cut into consecutive chunks of at most `context_length` tokens.
  /// Throws DataError for a missing directory or an empty category.
  static EvalCategorySet load(const std::filesystem::path& dir, std::size_t context_length);
};

struct ToyCorpusOptions {
  std::size_t total_bytes = 1 << 20;
  std::size_t document_bytes = 3000;
  std::uint64_t seed = 7;
  std::vector<std::string> languages{"en", "de", "fr", "it"};
};

/// Deterministic synthetic multilingual text: each language has its own
/// syllable inventory, lexicon and word-order habits.
std::vector<CorpusDocument> generate_toy_corpus(const ToyCorpusOptions& options);
/// Writes generate_toy_corpus() output as `dir/<language>/doc_NNNNN.txt`.
void write_toy_corpus(const std::filesystem::path& dir, const ToyCorpusOptions& options);

/// Highly repetitive text of the requested size (a fixed verse cycled).
std::string repetitive_text(std::size_t bytes);

}  // namespace moelab
