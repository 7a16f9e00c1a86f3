#include "toylm/grpo.hpp"

#include <cmath>

namespace toylm {

std::vector<double> outcome_advantages(std::span<const double> rewards,
                                       double std_floor) {
  if (rewards.size() < 2)
    throw ContractError("outcome_advantages: need G >= 2 rewards, got " +
                        std::to_string(rewards.size()));
  double mean = 0.0;
  for (const double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  double var = 0.0;
  for (const double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(rewards.size());  // population variance
  const double sd = std::sqrt(var);
  std::vector<double> adv(rewards.size(), 0.0);
  if (sd < std_floor) return adv;
  for (size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

std::vector<std::vector<double>> process_advantages(
    std::span<const std::vector<StepReward>> steps,
    std::span<const size_t> output_lengths, double std_floor) {
  if (steps.size() != output_lengths.size())
    throw DimensionError("process_advantages: outputs/lengths size mismatch");
  std::vector<double> flat;
  for (size_t i = 0; i < steps.size(); ++i) {
    if (steps[i].empty())
      throw ContractError("process_advantages: output " + std::to_string(i) +
                          " has no steps");
    size_t prev = 0;
    bool first = true;
    for (const StepReward& s : steps[i]) {
      if (!first && s.end_index <= prev)
        throw ContractError(
            "process_advantages: step end indices must increase");
      if (s.end_index >= output_lengths[i])
        throw ContractError("process_advantages: step end beyond output");
      prev = s.end_index;
      first = false;
      flat.push_back(s.reward);
    }
  }
  double mean = 0.0;
  for (const double r : flat) mean += r;
  mean /= static_cast<double>(flat.size());
  double var = 0.0;
  for (const double r : flat) var += (r - mean) * (r - mean);
  var /= static_cast<double>(flat.size());
  const double sd = std::sqrt(var);

  std::vector<std::vector<double>> adv(steps.size());
  for (size_t i = 0; i < steps.size(); ++i) {
    adv[i].assign(output_lengths[i], 0.0);
    for (const StepReward& s : steps[i]) {
      const double norm = sd < std_floor ? 0.0 : (s.reward - mean) / sd;
      // this step rewards every token up to and including its end
      for (size_t t = 0; t <= s.end_index; ++t) adv[i][t] += norm;
    }
  }
  return adv;
}

namespace {

Tensor surrogate_core(std::span<const SequenceScores> seqs,
                      const GrpoConfig& cfg, bool with_kl,
                      ObjectiveMetrics* metrics) {
  if (seqs.empty()) throw ContractError("objective: empty group");
  Tensor acc;
  double kl_sum = 0.0;
  size_t clipped = 0, tokens = 0;
  for (const SequenceScores& s : seqs) {
    const size_t len = s.logp_theta.size();
    if (len == 0 || s.logp_old.size() != len || s.advantages.size() != len)
      throw DimensionError("objective: per-token arrays misaligned");
    for (const double v : s.logp_old)
      if (!std::isfinite(v)) throw NumericError("objective: NaN log-probs");
    for (const double v : s.logp_theta.values())
      if (!std::isfinite(v)) throw NumericError("objective: NaN log-probs");

    Tensor old_c = Tensor::from_data(s.logp_old, {len});
    Tensor adv_c = Tensor::from_data(s.advantages, {len});
    Tensor ratio = exp(sub(s.logp_theta, old_c));
    Tensor surr = minimum(mul(ratio, adv_c),
                          mul(clip(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon),
                              adv_c));
    Tensor per_seq = sum(surr);

    if (with_kl && cfg.beta > 0.0) {
      Tensor kl;
      if (cfg.exact_kl) {
        if (!s.full_logp_theta.defined() ||
            s.full_logp_ref.size() != s.full_logp_theta.size())
          throw ContractError("objective: exact_kl needs full distributions");
        // Σ_v π_θ(v)·(log π_θ(v) − log π_ref(v)) per position
        Tensor ref_c = Tensor::from_data(s.full_logp_ref,
                                         s.full_logp_theta.shape());
        Tensor diff = sub(s.full_logp_theta, ref_c);
        kl = sum(mul(exp(s.full_logp_theta), diff));
      } else {
        if (s.logp_ref.size() != len)
          throw DimensionError("objective: logp_ref misaligned");
        Tensor ref_c = Tensor::from_data(s.logp_ref, {len});
        Tensor d = sub(ref_c, s.logp_theta);
        kl = sum(add_const(sub(exp(d), d), -1.0));
      }
      kl_sum += kl.scalar_value() / static_cast<double>(len);
      per_seq = sub(per_seq, scale(kl, cfg.beta));
    }

    per_seq = scale(per_seq, 1.0 / static_cast<double>(len));
    acc = acc.defined() ? add(acc, per_seq) : per_seq;

    const auto rv = ratio.values();
    for (size_t t = 0; t < len; ++t) {
      const double a = s.advantages[t];
      if ((a > 0 && rv[t] > 1.0 + cfg.epsilon) ||
          (a < 0 && rv[t] < 1.0 - cfg.epsilon))
        ++clipped;
    }
    tokens += len;
  }
  Tensor obj = scale(acc, 1.0 / static_cast<double>(seqs.size()));
  if (metrics) {
    metrics->kl = kl_sum / static_cast<double>(seqs.size());
    metrics->clip_fraction =
        static_cast<double>(clipped) / static_cast<double>(tokens);
    metrics->objective = obj.scalar_value();
  }
  return obj;
}

}  // namespace

Tensor grpo_objective(std::span<const SequenceScores> group,
                      const GrpoConfig& cfg, ObjectiveMetrics* metrics) {
  cfg.validate();
  return surrogate_core(group, cfg, /*with_kl=*/true, metrics);
}

Tensor ppo_objective(std::span<const SequenceScores> seqs,
                     const GrpoConfig& cfg, ObjectiveMetrics* metrics) {
  cfg.validate();
  return surrogate_core(seqs, cfg, /*with_kl=*/false, metrics);
}

std::vector<double> Policy::output_full_logprobs(const std::vector<int>&,
                                                 const std::vector<int>&)
    const {
  throw ContractError("policy does not implement full log distributions");
}

GrpoStepMetrics grpo_step(Policy& policy, const Policy* ref,
                          std::span<const std::vector<int>> prompts,
                          const RewardFn& reward_fn, const GrpoConfig& cfg,
                          Optimizer& opt, Rng& rng,
                          const StepRewardFn* step_rewards) {
  cfg.validate();
  if (prompts.empty()) throw ContractError("grpo_step: no prompts");
  if (cfg.supervision == Supervision::process && !step_rewards)
    throw ContractError("grpo_step: process supervision needs step rewards");
  if (cfg.beta > 0.0 && !ref)
    throw ContractError("grpo_step: beta > 0 needs a reference policy");

  struct Group {
    std::vector<Rollout> rollouts;
    std::vector<std::vector<double>> advantages;
    std::vector<double> rewards;
  };

  // rollouts under the pre-update parameters: this step's frozen π_old
  std::vector<Group> groups(prompts.size());
  double reward_sum = 0.0;
  size_t n_outputs = 0;
  for (size_t p = 0; p < prompts.size(); ++p) {
    Group& g = groups[p];
    for (size_t i = 0; i < cfg.group_size; ++i) {
      Rollout r = policy.sample(prompts[p], rng);
      if (r.tokens.empty())
        throw ContractError("grpo_step: policy sampled an empty output");
      g.rollouts.push_back(std::move(r));
    }
    if (cfg.supervision == Supervision::outcome) {
      for (const Rollout& r : g.rollouts) {
        double rew = 0.0;
        try {
          rew = reward_fn(prompts[p], r.tokens);
        } catch (const std::exception& e) {
          throw ContractError(std::string("grpo_step: reward function "
                                          "failed, step aborted: ") +
                              e.what());
        }
        g.rewards.push_back(rew);
      }
      const std::vector<double> adv =
          outcome_advantages(g.rewards, cfg.std_floor);
      for (size_t i = 0; i < g.rollouts.size(); ++i)
        g.advantages.push_back(
            std::vector<double>(g.rollouts[i].tokens.size(), adv[i]));
    } else {
      std::vector<std::vector<StepReward>> steps;
      std::vector<size_t> lengths;
      for (const Rollout& r : g.rollouts) {
        std::vector<StepReward> s;
        try {
          s = (*step_rewards)(prompts[p], r.tokens);
        } catch (const std::exception& e) {
          throw ContractError(std::string("grpo_step: reward function "
                                          "failed, step aborted: ") +
                              e.what());
        }
        double total = 0.0;
        for (const StepReward& sr : s) total += sr.reward;
        g.rewards.push_back(total);
        steps.push_back(std::move(s));
        lengths.push_back(r.tokens.size());
      }
      g.advantages = process_advantages(steps, lengths, cfg.std_floor);
    }
    for (const double r : g.rewards) reward_sum += r;
    n_outputs += g.rollouts.size();
  }

  GrpoStepMetrics metrics;
  metrics.mean_reward = reward_sum / static_cast<double>(n_outputs);

  const size_t epochs = std::max<size_t>(1, cfg.inner_epochs);
  for (size_t epoch = 0; epoch < epochs; ++epoch) {
    Tensor total_obj;
    double kl_acc = 0.0, clip_acc = 0.0, obj_acc = 0.0;
    for (size_t p = 0; p < prompts.size(); ++p) {
      Group& g = groups[p];
      std::vector<SequenceScores> scores;
      scores.reserve(g.rollouts.size());
      for (size_t i = 0; i < g.rollouts.size(); ++i) {
        const Rollout& r = g.rollouts[i];
        SequenceScores s;
        Tensor logits = policy.output_logits(prompts[p], r.tokens);
        Tensor lp = log_softmax_rows(logits);
        s.logp_theta = gather_cols(lp, r.tokens);
        s.logp_old = r.logprobs;
        s.advantages = g.advantages[i];
        if (cfg.beta > 0.0) {
          if (cfg.exact_kl) {
            s.full_logp_theta = lp;
            s.full_logp_ref = ref->output_full_logprobs(prompts[p], r.tokens);
          } else {
            s.logp_ref = ref->output_logprobs(prompts[p], r.tokens);
          }
        }
        scores.push_back(std::move(s));
      }
      ObjectiveMetrics om;
      Tensor obj = grpo_objective(scores, cfg, &om);
      kl_acc += om.kl;
      clip_acc += om.clip_fraction;
      obj_acc += om.objective;
      total_obj = total_obj.defined() ? add(total_obj, obj) : obj;
    }
    metrics.kl = kl_acc / static_cast<double>(prompts.size());
    metrics.clip_fraction = clip_acc / static_cast<double>(prompts.size());
    metrics.objective = obj_acc / static_cast<double>(prompts.size());

    // gradient ascent on the averaged objective
    Tensor loss =
        scale(total_obj, -1.0 / static_cast<double>(prompts.size()));
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  return metrics;
}

}  // namespace toylm
