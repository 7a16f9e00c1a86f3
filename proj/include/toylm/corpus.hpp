#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "toylm/tensor.hpp"

namespace toylm {

// Character-level vocabulary with reserved multi-character symbols (the think
// tags) that encode as single atomic tokens, longest match first.
class Tokenizer {
 public:
  Tokenizer() = default;
  // chars: deduplicated+sorted automatically; atoms: kept in given order,
  // appended after the character symbols.
  static Tokenizer build(std::string_view text,
                         std::span<const std::string> extra_chars,
                         std::span<const std::string> atoms);

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;
  int id_of(std::string_view symbol) const;  // -1 when absent
  size_t vocab() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }

  static Tokenizer from_symbols(std::vector<std::string> symbols);

 private:
  std::vector<std::string> symbols_;
  std::vector<std::string> atoms_;  // multi-char symbols, longest first
};

struct Corpus {
  std::string text;
  Tokenizer tokenizer;
  std::vector<int> train_ids;
  std::vector<int> valid_ids;  // disjoint tail split
};

// Loads a UTF-8 text file, builds the vocabulary from its characters plus
// the reserved tags and any extra characters, and splits train/validation by
// offset (validation is the trailing fraction).
Corpus load_corpus(const std::string& path,
                   std::span<const std::string> extra_chars,
                   double valid_fraction);
Corpus corpus_from_text(std::string text,
                        std::span<const std::string> extra_chars,
                        double valid_fraction);

}  // namespace toylm
