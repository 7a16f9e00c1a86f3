#include "toylm/rewards.hpp"

#include <charconv>
#include <cmath>

#include "toylm/tensor.hpp"

namespace toylm {

namespace {

constexpr std::string_view kOpen = "<think>";
constexpr std::string_view kClose = "</think>";

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\n')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

std::optional<long> parse_int(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  return v;
}

}  // namespace

ArithmeticTask ArithmeticTaskGen::sample() {
  const int digits_a = 1 + static_cast<int>(rng_.uniform_index(
                               static_cast<size_t>(max_digits_)));
  const int digits_b = 1 + static_cast<int>(rng_.uniform_index(
                               static_cast<size_t>(max_digits_)));
  auto draw = [&](int digits) {
    long lo = digits == 1 ? 0 : static_cast<long>(std::pow(10, digits - 1));
    long hi = static_cast<long>(std::pow(10, digits)) - 1;
    return lo + static_cast<long>(rng_.uniform_index(
                    static_cast<size_t>(hi - lo + 1)));
  };
  const long a = draw(digits_a);
  const long b = draw(digits_b);
  const bool subtract = rng_.uniform() < 0.5;
  ArithmeticTask t;
  t.prompt = std::to_string(a) + (subtract ? "-" : "+") + std::to_string(b) + "=";
  t.answer = subtract ? a - b : a + b;
  return t;
}

std::string ArithmeticTaskGen::templated_line(const ArithmeticTask& t) const {
  const std::string ans = std::to_string(t.answer);
  return t.prompt + std::string(kOpen) + t.prompt + ans + std::string(kClose) +
         ans + "\n";
}

std::optional<std::string_view> think_span(std::string_view completion) {
  const size_t open = completion.find(kOpen);
  if (open == std::string_view::npos) return std::nullopt;
  if (completion.find(kOpen, open + kOpen.size()) != std::string_view::npos)
    return std::nullopt;  // duplicated opening tag
  const size_t close = completion.find(kClose, open + kOpen.size());
  if (close == std::string_view::npos) return std::nullopt;
  if (completion.find(kClose, close + kClose.size()) != std::string_view::npos)
    return std::nullopt;  // duplicated closing tag
  // a stray close before the open also disqualifies
  if (completion.find(kClose) < open) return std::nullopt;
  return completion.substr(open + kOpen.size(), close - open - kOpen.size());
}

std::string_view answer_segment(std::string_view completion) {
  if (!think_span(completion)) return {};
  const size_t close = completion.find(kClose);
  return completion.substr(close + kClose.size());
}

std::optional<long> arithmetic_ground_truth(std::string_view prompt) {
  std::string_view s = trim(prompt);
  if (s.empty() || s.back() != '=') return std::nullopt;
  s.remove_suffix(1);
  // the operator is the +/- that is not a leading sign
  size_t op = std::string_view::npos;
  for (size_t i = 1; i < s.size(); ++i)
    if (s[i] == '+' || s[i] == '-') {
      op = i;
      break;
    }
  if (op == std::string_view::npos) return std::nullopt;
  const auto a = parse_int(s.substr(0, op));
  const auto b = parse_int(s.substr(op + 1));
  if (!a || !b) return std::nullopt;
  return s[op] == '+' ? *a + *b : *a - *b;
}

double reward_accuracy(std::string_view prompt, std::string_view completion) {
  const auto truth = arithmetic_ground_truth(prompt);
  if (!truth) return 0.0;
  // prefer the answer after a well-formed think span; otherwise take the
  // completion itself as the answer
  std::string_view answer = completion;
  if (think_span(completion)) answer = answer_segment(completion);
  const auto parsed = parse_int(answer);
  return (parsed && *parsed == *truth) ? 1.0 : 0.0;
}

double reward_format(std::string_view completion) {
  if (!think_span(completion)) return 0.0;
  if (completion.substr(0, kOpen.size()) != kOpen) return 0.0;
  return trim(answer_segment(completion)).empty() ? 0.0 : 1.0;
}

double reward_language_consistency(std::string_view completion,
                                   const std::set<char>& target_charset) {
  const auto span = think_span(completion);
  if (!span || span->empty()) return 0.0;
  size_t in = 0;
  for (const char c : *span)
    if (target_charset.count(c)) ++in;
  return static_cast<double>(in) / static_cast<double>(span->size());
}

double reward_brevity_proxy(std::string_view completion, size_t target_len) {
  if (reward_format(completion) == 0.0) return 0.0;
  if (completion.size() <= target_len) return 1.0;
  const double excess = static_cast<double>(completion.size() - target_len);
  return std::max(0.0, 1.0 - excess / static_cast<double>(target_len));
}

RewardRegistry RewardRegistry::with_builtins() {
  RewardRegistry r;
  r.add("accuracy", [](std::string_view p, std::string_view c) {
    return reward_accuracy(p, c);
  });
  r.add("format",
        [](std::string_view, std::string_view c) { return reward_format(c); });
  r.add("language_consistency", [](std::string_view, std::string_view c) {
    static const std::set<char> digits = {'0', '1', '2', '3', '4',
                                          '5', '6', '7', '8', '9',
                                          '+', '-', '='};
    return reward_language_consistency(c, digits);
  });
  r.add("brevity", [](std::string_view, std::string_view c) {
    return reward_brevity_proxy(c, 24);
  });
  return r;
}

void RewardRegistry::add(const std::string& name, TextRewardFn fn) {
  fns_[name] = std::move(fn);
}

bool RewardRegistry::has(const std::string& name) const {
  return fns_.count(name) > 0;
}

const TextRewardFn& RewardRegistry::get(const std::string& name) const {
  const auto it = fns_.find(name);
  if (it == fns_.end())
    throw ContractError("reward registry: unknown reward '" + name + "'");
  return it->second;
}

TextRewardFn RewardRegistry::composite(const std::string& spec) const {
  std::vector<std::pair<TextRewardFn, double>> parts;
  size_t pos = 0;
  while (pos < spec.size()) {
    size_t comma = spec.find(',', pos);
    if (comma == std::string::npos) comma = spec.size();
    const std::string item = spec.substr(pos, comma - pos);
    const size_t colon = item.find(':');
    const std::string name = item.substr(0, colon);
    double weight = 1.0;
    if (colon != std::string::npos) weight = std::stod(item.substr(colon + 1));
    parts.emplace_back(get(name), weight);
    pos = comma + 1;
  }
  if (parts.empty())
    throw ContractError("reward registry: empty composite spec '" + spec + "'");
  return [parts](std::string_view p, std::string_view c) {
    double total = 0.0;
    for (const auto& [fn, w] : parts) total += w * fn(p, c);
    return total;
  };
}

}  // namespace toylm
