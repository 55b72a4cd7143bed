// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "moelab/data.hpp"
#include "moelab/error.hpp"

namespace moelab {

namespace {

struct Phonology {
  std::vector<std::string> onsets;
  std::vector<std::string> nuclei;
  std::vector<std::string> codas;
  int min_syllables;
  int max_syllables;
  std::string sentence_end;
};

const Phonology& phonology_for(std::size_t index) {
  static const std::vector<Phonology> table = {
      {{"th", "w", "s", "b", "r", "l", "h", "m", "c", "st"}, {"e", "a", "o", "i", "ee", "ou"}, {"", "n", "t", "d", "ng", "ll"}, 1, 2, ". "},
      {{"sch", "k", "z", "g", "w", "st", "d", "h", "pf"}, {"e", "a", "ei", "ie", "u", "au", "ü"}, {"", "n", "ch", "r", "t", "ng", "st"}, 1, 3, ". "},
      {{"qu", "l", "p", "v", "j", "ch", "m", "r", "d"}, {"e", "ou", "ai", "a", "é", "eu", "on"}, {"", "", "s", "x", "t", "nt"}, 1, 3, " . "},
      {{"c", "g", "z", "sc", "p", "v", "t", "n", "gl"}, {"a", "o", "i", "e", "ia", "io"}, {"", "", "", "n", "l", "r"}, 2, 3, ". "},
  };
  return table[index % table.size()];
}

std::vector<std::string> make_lexicon(const Phonology& ph, std::mt19937_64& rng, std::size_t size) {
  std::uniform_int_distribution<int> syll(ph.min_syllables, ph.max_syllables);
  std::vector<std::string> words;
  while (words.size() < size) {
    std::string w;
    const int n = syll(rng);
    for (int s = 0; s < n; ++s) {
      w += ph.onsets[rng() % ph.onsets.size()];
      w += ph.nuclei[rng() % ph.nuclei.size()];
      if (s + 1 == n) w += ph.codas[rng() % ph.codas.size()];
    }
    if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(std::move(w));
  }
  return words;
}

struct Language {
  std::string name;
  const Phonology* phonology;
  std::vector<std::string> function_words;
  std::vector<std::string> content_words;
  std::discrete_distribution<std::size_t> zipf;
  std::vector<std::vector<std::size_t>> successors;  // preferred follow-ups per content word
};

Language make_language(const std::string& name, std::size_t index, std::uint64_t seed) {
  Language lang;
  lang.name = name;
  lang.phonology = &phonology_for(index);
  std::mt19937_64 rng(seed * 1000003ULL + index * 7919ULL + 11);
  lang.function_words = make_lexicon(*lang.phonology, rng, 12);
  for (auto& w : lang.function_words) {
    if (w.size() > 3) w.resize(3);
  }
  lang.content_words = make_lexicon(*lang.phonology, rng, 400);
  std::vector<double> weights(lang.content_words.size());
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = 1.0 / static_cast<double>(i + 1);
  lang.zipf = std::discrete_distribution<std::size_t>(weights.begin(), weights.end());
  lang.successors.resize(lang.content_words.size());
  for (auto& s : lang.successors) {
    for (int j = 0; j < 4; ++j) s.push_back(rng() % lang.content_words.size());
  }
  return lang;
}

std::string sentence(Language& lang, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len(4, 11);
  const int n = len(rng);
  std::string out;
  std::size_t prev = lang.zipf(rng);
  for (int i = 0; i < n; ++i) {
    std::string word;
    if (i % 3 == 0) {
      word = lang.function_words[rng() % lang.function_words.size()];
    } else {
      prev = (rng() % 3 != 0) ? lang.successors[prev][rng() % 4] : lang.zipf(rng);
      word = lang.content_words[prev];
    }
    if (i == 0 && !word.empty() && word[0] >= 'a' && word[0] <= 'z') word[0] = static_cast<char>(word[0] - 'a' + 'A');
    if (!out.empty()) out += ' ';
    out += word;
  }
  out += lang.phonology->sentence_end;
  return out;
}

}  // namespace

std::vector<CorpusDocument> generate_toy_corpus(const ToyCorpusOptions& options) {
  if (options.languages.empty()) throw DataError("toy corpus needs at least one language");
  if (options.document_bytes == 0) throw DataError("toy corpus document size must be positive");
  std::vector<Language> langs;
  for (std::size_t i = 0; i < options.languages.size(); ++i) langs.push_back(make_language(options.languages[i], i, options.seed));

  const std::size_t per_language = options.total_bytes / options.languages.size();
  std::vector<CorpusDocument> docs;
  std::mt19937_64 rng(options.seed);
  for (auto& lang : langs) {
    std::size_t written = 0;
    std::size_t index = 0;
    while (written < per_language) {
      const std::size_t target = std::min(options.document_bytes, per_language - written);
      std::string text;
      while (text.size() < target) text += sentence(lang, rng);
      text.resize(std::max<std::size_t>(target, 1));
      CorpusDocument doc;
      char name[32];
      std::snprintf(name, sizeof(name), "doc_%05zu.txt", index++);
      doc.name = lang.name + "/" + name;
      doc.label = lang.name;
      doc.tokens = tokenize(text);
      written += doc.tokens.size();
      docs.push_back(std::move(doc));
    }
  }
  return docs;
}

void write_toy_corpus(const std::filesystem::path& dir, const ToyCorpusOptions& options) {
  const auto docs = generate_toy_corpus(options);
  const ByteTokenizer tokenizer;
  for (const auto& doc : docs) {
    const auto path = dir / doc.name;
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    const auto text = tokenizer.decode(doc.tokens);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw DataError("cannot write '" + path.string() + "'");
  }
}

std::string repetitive_text(std::size_t bytes) {
  static const std::string verse =
      "Row, row, row your boat, gently down the stream. Merrily, merrily, merrily, merrily, life is but a dream.\n";
  std::string out;
  out.reserve(bytes);
  while (out.size() < bytes) out += verse;
  out.resize(bytes);
  return out;
}

}  // namespace moelab
