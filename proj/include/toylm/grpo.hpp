#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "toylm/optimizer.hpp"
#include "toylm/rng.hpp"
#include "toylm/tensor.hpp"

namespace toylm {

enum class Supervision { outcome, process };

struct GrpoConfig {
  double epsilon = 0.2;  // clip range
  double beta = 0.04;    // KL weight against the reference policy
  size_t group_size = 8;
  Supervision supervision = Supervision::outcome;
  double std_floor = 1e-8;
  // exact vocab-sum KL instead of the sampled-token estimator; viable for
  // small vocabularies only
  bool exact_kl = false;
  size_t inner_epochs = 1;

  void validate() const {
    if (!(epsilon > 0)) throw ContractError("grpo config: epsilon must be > 0");
    if (beta < 0) throw ContractError("grpo config: beta must be >= 0");
    if (group_size < 2) throw ContractError("grpo config: G must be >= 2");
    if (!(std_floor > 0))
      throw ContractError("grpo config: std_floor must be > 0");
  }
};

// Group-normalized terminal rewards: (r_i − mean)/std with the population
// std; all advantages are 0 when std < std_floor.
std::vector<double> outcome_advantages(std::span<const double> rewards,
                                       double std_floor);

// One intermediate step of an output: the index of its last token
// (inclusive, 0-based) and its reward.
struct StepReward {
  size_t end_index;
  double reward;
};

// Process supervision: every step reward in the group is jointly
// mean/std-normalized, then the advantage of token t sums the normalized
// rewards of steps whose end_index >= t.
std::vector<std::vector<double>> process_advantages(
    std::span<const std::vector<StepReward>> steps,
    std::span<const size_t> output_lengths, double std_floor);

// Per-output policy scores entering the surrogate objective.
struct SequenceScores {
  Tensor logp_theta;              // differentiable, 1-D [len]
  std::vector<double> logp_old;   // sampling-time log-probs
  std::vector<double> logp_ref;   // empty when beta == 0 and exact_kl off
  std::vector<double> advantages;

  // exact-KL mode only
  Tensor full_logp_theta;             // [len × V]
  std::vector<double> full_logp_ref;  // len·V
};

struct ObjectiveMetrics {
  double kl = 0.0;
  double clip_fraction = 0.0;
  double objective = 0.0;
};

// The group-relative objective (to maximize; trainers negate):
//   (1/G)·Σ_i (1/|o_i|)·Σ_t { min[ρ·Â, clip(ρ, 1−ε, 1+ε)·Â] − β·KL̂ }
// with ρ the π_θ/π_old token probability ratio and KL̂ the per-token
// nonnegative estimator π_ref/π_θ − log(π_ref/π_θ) − 1 (or the vocab sum in
// exact_kl mode).
Tensor grpo_objective(std::span<const SequenceScores> group,
                      const GrpoConfig& cfg, ObjectiveMetrics* metrics = nullptr);

// The clipped surrogate alone, with externally supplied advantages: mean over
// sequences of the per-token average of min[ρ·A, clip(ρ)·A]. No KL term.
Tensor ppo_objective(std::span<const SequenceScores> seqs,
                     const GrpoConfig& cfg,
                     ObjectiveMetrics* metrics = nullptr);

// A sampled completion and its sampling-time log-probs.
struct Rollout {
  std::vector<int> tokens;
  std::vector<double> logprobs;
};

// Anything GRPO can train: sampling, differentiable logits over an output,
// fast no-tape log-probs, and the trainable parameter list.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual Rollout sample(const std::vector<int>& prompt, Rng& rng) = 0;
  // raw logits [len × V], one row per output position, on the tape
  virtual Tensor output_logits(const std::vector<int>& prompt,
                               const std::vector<int>& output) = 0;
  virtual std::vector<double> output_logprobs(
      const std::vector<int>& prompt, const std::vector<int>& output) const = 0;
  // full per-position log distributions (len·V, row-major); exact-KL only
  virtual std::vector<double> output_full_logprobs(
      const std::vector<int>& prompt, const std::vector<int>& output) const;
  virtual std::vector<Tensor> trainable_params() = 0;
};

using RewardFn = std::function<double(const std::vector<int>& prompt,
                                      const std::vector<int>& output)>;
using StepRewardFn = std::function<std::vector<StepReward>(
    const std::vector<int>& prompt, const std::vector<int>& output)>;

struct GrpoStepMetrics {
  double mean_reward = 0.0;
  double kl = 0.0;
  double clip_fraction = 0.0;
  double objective = 0.0;
};

// One GRPO update: samples G outputs per prompt under the current parameters
// (the step's π_old), scores them, normalizes advantages within each group,
// and ascends the objective. `ref` supplies π_ref log-probs; it may be the
// policy's own frozen clone and is never written to. With process
// supervision `step_rewards` must be provided.
GrpoStepMetrics grpo_step(Policy& policy, const Policy* ref,
                          std::span<const std::vector<int>> prompts,
                          const RewardFn& reward_fn, const GrpoConfig& cfg,
                          Optimizer& opt, Rng& rng,
                          const StepRewardFn* step_rewards = nullptr);

}  // namespace toylm
