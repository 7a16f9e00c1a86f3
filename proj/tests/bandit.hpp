#pragma once

// Single-token "string bandit" policy over V arms: logits are the only
// parameters, outputs are one sampled arm. Shared by the unit and acceptance
// suites.

#include <cmath>
#include <vector>

#include "toylm/grpo.hpp"

class TabularPolicy : public toylm::Policy {
 public:
  explicit TabularPolicy(size_t n_arms)
      : logits_(toylm::Tensor::zeros({1, n_arms}).set_requires_grad(true)) {}

  std::vector<double> probs() const {
    const auto lv = logits_.values();
    double mx = lv[0];
    for (const double v : lv) mx = std::max(mx, v);
    std::vector<double> p(lv.size());
    double denom = 0.0;
    for (size_t i = 0; i < lv.size(); ++i) {
      p[i] = std::exp(lv[i] - mx);
      denom += p[i];
    }
    for (double& x : p) x /= denom;
    return p;
  }

  toylm::Rollout sample(const std::vector<int>&, toylm::Rng& rng) override {
    const std::vector<double> p = probs();
    const int arm = rng.categorical(p);
    return {{arm}, {std::log(p[arm])}};
  }

  toylm::Tensor output_logits(const std::vector<int>&,
                              const std::vector<int>& output) override {
    if (output.size() != 1)
      throw toylm::ContractError("bandit outputs are single tokens");
    return logits_;
  }

  std::vector<double> output_logprobs(
      const std::vector<int>&, const std::vector<int>& output) const override {
    return {std::log(probs()[output[0]])};
  }

  std::vector<double> output_full_logprobs(
      const std::vector<int>&, const std::vector<int>&) const override {
    std::vector<double> p = probs();
    for (double& x : p) x = std::log(x);
    return p;
  }

  std::vector<toylm::Tensor> trainable_params() override { return {logits_}; }

  toylm::Tensor& logits() { return logits_; }

 private:
  toylm::Tensor logits_;
};

struct BanditRunResult {
  double best_arm_prob = 0.0;
  double kl_to_uniform = 0.0;  // exact KL(π‖uniform reference)
  toylm::GrpoStepMetrics last_metrics;
};

inline BanditRunResult run_bandit(size_t n_arms, int best_arm, size_t steps,
                                  toylm::GrpoConfig cfg, double lr,
                                  uint64_t seed) {
  using namespace toylm;
  TabularPolicy policy(n_arms);
  TabularPolicy ref(n_arms);  // uniform reference, never updated
  Optimizer opt({lr, 0, 0.99, 1e-8}, policy.trainable_params());
  Rng rng = Rng(seed).fork("bandit/sampling");
  const std::vector<std::vector<int>> prompts = {{0}};
  RewardFn reward = [best_arm](const std::vector<int>&,
                               const std::vector<int>& out) {
    return out[0] == best_arm ? 1.0 : 0.0;
  };
  BanditRunResult res;
  for (size_t s = 0; s < steps; ++s)
    res.last_metrics = grpo_step(policy, &ref, prompts, reward, cfg, opt, rng);
  const std::vector<double> p = policy.probs();
  res.best_arm_prob = p[best_arm];
  for (const double x : p)
    res.kl_to_uniform += x * std::log(x * static_cast<double>(n_arms));
  return res;
}
