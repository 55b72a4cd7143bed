// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'E', 'D', 'A', 'T', '0', '1'};
constexpr std::size_t kHeaderBytes = 48;
constexpr std::size_t kDocumentBytes = 20;

template <typename U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename U>
U get(std::string_view in, std::size_t offset) {
  if (offset + sizeof(U) > in.size()) throw DataError("shard truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return static_cast<U>(v);
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw DataError("error reading '" + path.string() + "'");
  return buf.str();
}

}  // namespace

std::string_view TokenShard::label_of(std::size_t document) const {
  const auto id = documents.at(document).label;
  if (id == kNoLabel) return {};
  return labels.at(id);
}

void TokenShard::validate() const {
  if (vocab_size == 0) throw DataError("shard vocab_size is zero");
  for (const auto id : tokens) {
    if (id < 0 || static_cast<std::uint32_t>(id) >= vocab_size) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size));
    }
  }
  std::uint64_t expected = 0;
  for (const auto& doc : documents) {
    if (doc.start != expected) throw DataError("document spans are not contiguous");
    if (doc.label != kNoLabel && doc.label >= labels.size()) throw DataError("document label id out of range");
    expected += doc.length;
  }
  if (expected != tokens.size()) throw DataError("document spans do not cover the token stream");
}

std::string TokenShard::serialize() const {
  validate();
  const std::uint32_t width = token_width_bits();
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, 1);
  put<std::uint32_t>(out, vocab_size);
  put<std::uint32_t>(out, width);
  put<std::uint32_t>(out, 0);
  put<std::uint64_t>(out, tokens.size());
  put<std::uint64_t>(out, documents.size());
  const std::uint64_t label_offset = kHeaderBytes + tokens.size() * (width / 8) + documents.size() * kDocumentBytes;
  put<std::uint64_t>(out, label_offset);
  for (const auto id : tokens) {
    if (width == 16) {
      put<std::uint16_t>(out, static_cast<std::uint16_t>(id));
    } else {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(id));
    }
  }
  for (const auto& doc : documents) {
    put<std::uint64_t>(out, doc.start);
    put<std::uint64_t>(out, doc.length);
    put<std::uint32_t>(out, doc.label);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(labels.size()));
  for (const auto& label : labels) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(label.size()));
    out += label;
  }
  return out;
}

TokenShard TokenShard::deserialize(std::string_view in) {
  if (in.size() < kHeaderBytes || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DataError("not a token shard (bad magic)");
  }
  if (get<std::uint32_t>(in, 8) != 1) throw DataError("unsupported shard version");
  TokenShard s;
  s.vocab_size = get<std::uint32_t>(in, 12);
  const auto width = get<std::uint32_t>(in, 16);
  if (width != 16 && width != 32) throw DataError("unsupported token width");
  const auto n_tokens = get<std::uint64_t>(in, 24);
  const auto n_docs = get<std::uint64_t>(in, 32);
  const auto label_offset = get<std::uint64_t>(in, 40);
  const std::uint64_t bytes_per = width / 8;
  if (n_tokens > in.size() / bytes_per || n_docs > in.size() / kDocumentBytes) throw DataError("shard truncated");
  if (label_offset != kHeaderBytes + n_tokens * bytes_per + n_docs * kDocumentBytes) {
    throw DataError("shard label-table offset is inconsistent");
  }
  s.tokens.resize(n_tokens);
  std::size_t off = kHeaderBytes;
  for (std::uint64_t i = 0; i < n_tokens; ++i, off += bytes_per) {
    s.tokens[i] = width == 16 ? static_cast<std::int32_t>(get<std::uint16_t>(in, off))
                              : static_cast<std::int32_t>(get<std::uint32_t>(in, off));
  }
  s.documents.resize(n_docs);
  for (auto& doc : s.documents) {
    doc.start = get<std::uint64_t>(in, off);
    doc.length = get<std::uint64_t>(in, off + 8);
    doc.label = get<std::uint32_t>(in, off + 16);
    off += kDocumentBytes;
  }
  const auto n_labels = get<std::uint32_t>(in, off);
  off += 4;
  for (std::uint32_t i = 0; i < n_labels; ++i) {
    const auto len = get<std::uint32_t>(in, off);
    off += 4;
    if (off + len > in.size()) throw DataError("shard truncated");
    s.labels.emplace_back(in.substr(off, len));
    off += len;
  }
  if (off != in.size()) throw DataError("trailing bytes after shard label table");
  s.validate();
  return s;
}

void TokenShard::write(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("error writing '" + path.string() + "'");
}

TokenShard TokenShard::read(const std::filesystem::path& path) { return deserialize(read_file(path)); }

std::vector<std::int32_t> ByteTokenizer::encode(std::string_view text) const {
  std::vector<std::int32_t> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) ids[i] = static_cast<unsigned char>(text[i]);
  return ids;
}

std::string ByteTokenizer::decode(std::span<const std::int32_t> ids) const {
  std::string out(ids.size(), '\0');
  for (std::size_t i = 0; i < ids.size(); ++i) out[i] = static_cast<char>(static_cast<unsigned char>(ids[i]));
  return out;
}

std::vector<std::int32_t> tokenize(std::string_view text, const ByteTokenizer& tokenizer) {
  return tokenizer.encode(text);
}

std::vector<std::int32_t> ingest_pretokenized(std::span<const std::int32_t> ids, std::uint32_t vocab_size) {
  for (const auto id : ids) {
    if (id < 0 || static_cast<std::uint32_t>(id) >= vocab_size) {
      throw DataError("pre-tokenized id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(vocab_size));
    }
  }
  return {ids.begin(), ids.end()};
}

TokenShard build_shard(const std::vector<CorpusDocument>& documents, std::uint32_t vocab_size) {
  TokenShard s;
  s.vocab_size = vocab_size;
  for (const auto& doc : documents) {
    DocumentSpan span;
    span.start = s.tokens.size();
    span.length = doc.tokens.size();
    if (!doc.label.empty()) {
      auto it = std::find(s.labels.begin(), s.labels.end(), doc.label);
      if (it == s.labels.end()) it = s.labels.insert(s.labels.end(), doc.label);
      span.label = static_cast<std::uint32_t>(it - s.labels.begin());
    }
    s.tokens.insert(s.tokens.end(), doc.tokens.begin(), doc.tokens.end());
    s.documents.push_back(span);
  }
  s.validate();
  return s;
}

PreparedShards split_documents(std::vector<CorpusDocument> documents, double split_fraction,
                               std::uint32_t vocab_size) {
  if (documents.empty()) throw DataError("corpus is empty");
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) throw DataError("split fraction must lie in (0, 1)");
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    const auto& doc = documents[i];
    std::string content(reinterpret_cast<const char*>(doc.tokens.data()), doc.tokens.size() * sizeof(std::int32_t));
    keyed.emplace_back(fnv1a(content, fnv1a(doc.name + '\0' + doc.label)), i);
  }
  std::sort(keyed.begin(), keyed.end());
  const std::size_t n = documents.size();
  auto n_train = static_cast<std::size_t>(std::llround(split_fraction * static_cast<double>(n)));
  if (n >= 2) n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  else n_train = n;
  std::vector<bool> is_train(n, false);
  for (std::size_t i = 0; i < n_train; ++i) is_train[keyed[i].second] = true;
  std::vector<CorpusDocument> train, val;
  for (std::size_t i = 0; i < n; ++i) (is_train[i] ? train : val).push_back(std::move(documents[i]));
  return {build_shard(train, vocab_size), build_shard(val, vocab_size)};
}

PreparedShards prepare(const std::filesystem::path& corpus, const PrepareOptions& options) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(corpus, ec)) throw DataError("corpus directory '" + corpus.string() + "' not found");
  std::vector<fs::path> files;
  for (auto it = fs::recursive_directory_iterator(corpus, ec); it != fs::recursive_directory_iterator(); it.increment(ec)) {
    if (ec) throw DataError("cannot list '" + corpus.string() + "': " + ec.message());
    if (!it->is_regular_file()) continue;
    const auto ext = it->path().extension();
    if (ext == ".txt" || ext == ".ids") files.push_back(it->path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("corpus '" + corpus.string() + "' has no .txt or .ids files");

  std::uint32_t vocab = ByteTokenizer::kVocabSize;
  const bool has_ids = std::any_of(files.begin(), files.end(), [](const fs::path& p) { return p.extension() == ".ids"; });
  if (has_ids) {
    if (!options.vocab_size) throw DataError("pre-tokenized .ids files need an explicit vocabulary size");
    vocab = *options.vocab_size;
  } else if (options.vocab_size) {
    vocab = *options.vocab_size;
  }
  if (vocab < ByteTokenizer::kVocabSize &&
      std::any_of(files.begin(), files.end(), [](const fs::path& p) { return p.extension() == ".txt"; })) {
    throw DataError("byte-level text needs a vocabulary of at least 256");
  }

  std::vector<CorpusDocument> docs;
  const ByteTokenizer tokenizer;
  for (const auto& path : files) {
    CorpusDocument doc;
    const auto rel = fs::relative(path, corpus);
    doc.name = rel.generic_string();
    if (options.labels) {
      if (std::distance(rel.begin(), rel.end()) < 2) {
        throw DataError("labeled corpus file '" + doc.name + "' is not inside a label directory");
      }
      doc.label = rel.begin()->string();
    }
    const auto bytes = read_file(path);
    if (path.extension() == ".txt") {
      doc.tokens = tokenize(bytes, tokenizer);
    } else {
      if (bytes.size() % 4 != 0) throw DataError("'" + doc.name + "' is not a whole number of uint32 ids");
      std::vector<std::int32_t> ids(bytes.size() / 4);
      for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int32_t>(get<std::uint32_t>(bytes, 4 * i));
      doc.tokens = ingest_pretokenized(ids, vocab);
    }
    docs.push_back(std::move(doc));
  }
  return split_documents(std::move(docs), options.split_fraction, vocab);
}

Batch sample_batch(const TokenShard& shard, std::size_t batch, std::size_t seq_len, bool within_documents,
                   std::mt19937_64& rng) {
  Batch out;
  out.batch = batch;
  out.seq_len = seq_len;
  out.tokens.resize(batch * seq_len);
  out.targets.resize(batch * seq_len);
  const std::size_t window = seq_len + 1;

  if (!within_documents) {
    const std::size_t n = shard.tokens.size();
    if (n <= seq_len) {
      throw DataError("shard of " + std::to_string(n) + " tokens is too small for sequence length " +
                      std::to_string(seq_len));
    }
    std::uniform_int_distribution<std::size_t> start_dist(0, n - 1);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t start = start_dist(rng);
      for (std::size_t t = 0; t < seq_len; ++t) {
        out.tokens[b * seq_len + t] = shard.tokens[(start + t) % n];
        out.targets[b * seq_len + t] = shard.tokens[(start + t + 1) % n];
      }
    }
    return out;
  }

  // Valid starts per document, concatenated; a global uniform draw picks one.
  std::vector<std::uint64_t> cumulative;
  std::vector<std::size_t> doc_index;
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < shard.documents.size(); ++i) {
    const auto& doc = shard.documents[i];
    if (doc.length < window) continue;
    total += doc.length - window + 1;
    cumulative.push_back(total);
    doc_index.push_back(i);
  }
  if (total == 0) {
    throw DataError("no document holds a window of " + std::to_string(window) + " tokens");
  }
  std::uniform_int_distribution<std::uint64_t> dist(0, total - 1);
  out.labels.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto draw = dist(rng);
    const auto pos = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), draw) - cumulative.begin());
    const auto before = pos == 0 ? 0 : cumulative[pos - 1];
    const auto& doc = shard.documents[doc_index[pos]];
    const std::size_t start = doc.start + (draw - before);
    for (std::size_t t = 0; t < seq_len; ++t) {
      out.tokens[b * seq_len + t] = shard.tokens[start + t];
      out.targets[b * seq_len + t] = shard.tokens[start + t + 1];
    }
    out.labels[b] = std::string(shard.label_of(doc_index[pos]));
  }
  return out;
}

EvalCategorySet EvalCategorySet::load(const std::filesystem::path& dir, std::size_t context_length) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw DataError("evaluation set '" + dir.string() + "' not found");
  if (context_length == 0) throw DataError("context length must be positive");
  EvalCategorySet set;
  set.name = dir.filename().string();
  if (set.name.empty()) set.name = dir.parent_path().filename().string();
  std::vector<fs::path> category_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) category_dirs.push_back(entry.path());
  }
  std::sort(category_dirs.begin(), category_dirs.end());
  if (category_dirs.empty()) throw DataError("evaluation set '" + dir.string() + "' has no category directories");
  const ByteTokenizer tokenizer;
  for (const auto& cdir : category_dirs) {
    EvalCategory category;
    category.label = cdir.filename().string();
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(cdir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      const auto ids = tokenize(read_file(file), tokenizer);
      for (std::size_t off = 0; off < ids.size(); off += context_length) {
        const std::size_t len = std::min(context_length, ids.size() - off);
        category.sequences.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(off),
                                        ids.begin() + static_cast<std::ptrdiff_t>(off + len));
      }
    }
    if (category.sequences.empty()) throw DataError("evaluation category '" + category.label + "' is empty");
    set.categories.push_back(std::move(category));
  }
  return set;
}

}  // namespace moelab
