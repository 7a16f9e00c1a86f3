#include "toylm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace toylm {

namespace {
const std::vector<std::string> kThinkTags = {"<think>", "</think>"};
}

Tokenizer Tokenizer::build(std::string_view text,
                           std::span<const std::string> extra_chars,
                           std::span<const std::string> atoms) {
  std::set<char> chars(text.begin(), text.end());
  for (const std::string& s : extra_chars)
    for (const char c : s) chars.insert(c);
  std::vector<std::string> symbols;
  for (const char c : chars) symbols.emplace_back(1, c);
  for (const std::string& a : atoms) symbols.push_back(a);
  return from_symbols(std::move(symbols));
}

Tokenizer Tokenizer::from_symbols(std::vector<std::string> symbols) {
  Tokenizer t;
  t.symbols_ = std::move(symbols);
  for (const std::string& s : t.symbols_)
    if (s.size() > 1) t.atoms_.push_back(s);
  std::sort(t.atoms_.begin(), t.atoms_.end(),
            [](const std::string& a, const std::string& b) {
              return a.size() > b.size();
            });
  return t;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    for (const std::string& a : atoms_) {
      if (text.compare(i, a.size(), a) == 0) {
        out.push_back(id_of(a));
        i += a.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    const int id = id_of(text.substr(i, 1));
    if (id < 0)
      throw ContractError("tokenizer: symbol not in vocabulary: '" +
                          std::string(1, text[i]) + "'");
    out.push_back(id);
    ++i;
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (const int id : ids) {
    if (id < 0 || static_cast<size_t>(id) >= symbols_.size())
      throw ContractError("tokenizer: id out of range: " + std::to_string(id));
    out += symbols_[id];
  }
  return out;
}

int Tokenizer::id_of(std::string_view symbol) const {
  for (size_t i = 0; i < symbols_.size(); ++i)
    if (symbols_[i] == symbol) return static_cast<int>(i);
  return -1;
}

Corpus corpus_from_text(std::string text,
                        std::span<const std::string> extra_chars,
                        double valid_fraction) {
  if (text.empty()) throw ContractError("corpus: empty text");
  if (valid_fraction < 0 || valid_fraction >= 1)
    throw ContractError("corpus: valid_fraction must be in [0, 1)");
  Corpus c;
  c.tokenizer = Tokenizer::build(text, extra_chars, kThinkTags);
  std::vector<int> all = c.tokenizer.encode(text);
  const size_t n_valid = static_cast<size_t>(
      static_cast<double>(all.size()) * valid_fraction);
  const size_t n_train = all.size() - n_valid;
  c.train_ids.assign(all.begin(), all.begin() + n_train);
  c.valid_ids.assign(all.begin() + n_train, all.end());
  c.text = std::move(text);
  return c;
}

Corpus load_corpus(const std::string& path,
                   std::span<const std::string> extra_chars,
                   double valid_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("corpus: cannot open file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (text.empty()) throw ContractError("corpus: file is empty: " + path);
  return corpus_from_text(std::move(text), extra_chars, valid_fraction);
}

}  // namespace toylm
