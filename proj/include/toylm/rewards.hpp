#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "toylm/rng.hpp"

namespace toylm {

// One synthetic arithmetic question: prompt "12+7=" with its integer answer.
struct ArithmeticTask {
  std::string prompt;
  long answer = 0;
};

// Seeded sampler over 1..max_digits-digit addition/subtraction; the ground
// truth comes from the generator itself.
class ArithmeticTaskGen {
 public:
  ArithmeticTaskGen(uint64_t seed, int max_digits = 3)
      : rng_(seed), max_digits_(max_digits) {}
  ArithmeticTask sample();
  // "A+B=<think>A+B=C</think>C\n" template line
  std::string templated_line(const ArithmeticTask& t) const;

 private:
  Rng rng_;
  int max_digits_;
};

// The span between one well-formed <think>…</think> pair; nullopt when the
// completion is not well-formed (missing tag, duplicate, nested, or closing
// before opening).
std::optional<std::string_view> think_span(std::string_view completion);
// Text after the closing tag (empty when malformed).
std::string_view answer_segment(std::string_view completion);

// 1 when the extracted final answer equals the ground truth parsed from the
// prompt expression, else 0. Unparseable completions score 0.
double reward_accuracy(std::string_view prompt, std::string_view completion);
// 1 for a single well-formed <think>…</think> pair followed by a nonempty
// answer segment (a trailing newline does not count as answer text), else 0.
double reward_format(std::string_view completion);
// Fraction of think-span characters inside target_charset; 0 without a
// well-formed (or nonempty) think span.
double reward_language_consistency(std::string_view completion,
                                   const std::set<char>& target_charset);
// Proxy helpfulness score: format gate times a shortness bonus.
double reward_brevity_proxy(std::string_view completion, size_t target_len);

// Parses the prompt's arithmetic expression; nullopt if not of the family.
std::optional<long> arithmetic_ground_truth(std::string_view prompt);

using TextRewardFn =
    std::function<double(std::string_view prompt, std::string_view completion)>;

// Named rule-based rewards; composite rewards are weighted sums selected by
// spec strings like "accuracy:1,format:1".
class RewardRegistry {
 public:
  static RewardRegistry with_builtins();
  void add(const std::string& name, TextRewardFn fn);
  bool has(const std::string& name) const;
  const TextRewardFn& get(const std::string& name) const;
  // "name:weight,name:weight" → Σ weight·reward
  TextRewardFn composite(const std::string& spec) const;

 private:
  std::map<std::string, TextRewardFn> fns_;
};

}  // namespace toylm
