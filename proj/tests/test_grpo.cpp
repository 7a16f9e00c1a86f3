#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bandit.hpp"
#include "gradcheck.hpp"
#include "toylm/grpo.hpp"

using namespace toylm;

namespace {

GrpoConfig base_cfg() {
  GrpoConfig c;
  c.epsilon = 0.2;
  c.beta = 0.0;
  c.group_size = 4;
  return c;
}

SequenceScores make_scores(std::vector<double> logp_theta,
                           std::vector<double> logp_old,
                           std::vector<double> advantages) {
  SequenceScores s;
  s.logp_theta =
      Tensor::from_data(std::move(logp_theta), {advantages.size()});
  s.logp_old = std::move(logp_old);
  s.advantages = std::move(advantages);
  return s;
}

}  // namespace

TEST_CASE("outcome advantages normalize within the group") {
  const std::vector<double> r1 = {1, 0, 1, 0};
  const std::vector<double> a1 = outcome_advantages(r1, 1e-8);
  CHECK(a1[0] == doctest::Approx(1.0));
  CHECK(a1[1] == doctest::Approx(-1.0));
  CHECK(a1[2] == doctest::Approx(1.0));
  CHECK(a1[3] == doctest::Approx(-1.0));

  const std::vector<double> r2 = {3, 3, 3};
  for (const double a : outcome_advantages(r2, 1e-8)) CHECK(a == 0.0);

  const std::vector<double> r3 = {2, 4, 6};  // population std sqrt(8/3)
  const std::vector<double> a3 = outcome_advantages(r3, 1e-8);
  CHECK(a3[0] == doctest::Approx(-1.2247448713915890).epsilon(1e-12));
  CHECK(a3[1] == doctest::Approx(0.0));
  CHECK(a3[2] == doctest::Approx(1.2247448713915890).epsilon(1e-12));

  const std::vector<double> tiny = {1.0};
  CHECK_THROWS_AS(outcome_advantages(tiny, 1e-8), ContractError);
}

TEST_CASE("outcome advantages: mean 0, std 1, translation and scale "
          "invariance") {
  Rng rng(31);
  for (int rep = 0; rep < 30; ++rep) {
    const size_t g = 2 + rng.uniform_index(10);
    std::vector<double> r(g);
    for (double& x : r) x = rng.normal(0.0, 3.0);
    const std::vector<double> a = outcome_advantages(r, 1e-8);
    double mean = 0.0, var = 0.0;
    for (const double x : a) mean += x;
    mean /= static_cast<double>(g);
    for (const double x : a) var += (x - mean) * (x - mean);
    var /= static_cast<double>(g);
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-10);

    std::vector<double> shifted = r, scaled = r;
    for (double& x : shifted) x += 17.5;
    for (double& x : scaled) x *= 3.25;
    const std::vector<double> as = outcome_advantages(shifted, 1e-8);
    const std::vector<double> ac = outcome_advantages(scaled, 1e-8);
    for (size_t i = 0; i < g; ++i) {
      CHECK(as[i] == doctest::Approx(a[i]).epsilon(1e-9));
      CHECK(ac[i] == doctest::Approx(a[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("process advantages: reduction, definition and brute-force oracle") {
  SUBCASE("one terminal step per output equals outcome advantages") {
    const std::vector<std::vector<StepReward>> steps = {
        {{4, 2.0}}, {{2, 4.0}}, {{6, 6.0}}};
    const std::vector<size_t> lens = {5, 3, 7};
    const auto adv = process_advantages(steps, lens, 1e-8);
    const std::vector<double> rewards = {2, 4, 6};
    const auto expect = outcome_advantages(rewards, 1e-8);
    for (size_t i = 0; i < 3; ++i)
      for (size_t t = 0; t < lens[i]; ++t)
        CHECK(adv[i][t] == doctest::Approx(expect[i]).epsilon(1e-12));
  }

  SUBCASE("token advantage sums normalized rewards of later-or-current "
          "steps") {
    // two outputs so normalization has a spread; focus on output 0
    const std::vector<std::vector<StepReward>> steps = {
        {{3, 1.0}, {7, 5.0}}, {{7, 3.0}}};
    const std::vector<size_t> lens = {8, 8};
    const auto adv = process_advantages(steps, lens, 1e-8);
    // joint normalization over {1, 5, 3}
    const std::vector<double> flat = {1, 5, 3};
    const auto norm = outcome_advantages(flat, 1e-8);
    for (size_t t = 0; t <= 3; ++t)
      CHECK(adv[0][t] == doctest::Approx(norm[0] + norm[1]).epsilon(1e-12));
    for (size_t t = 4; t <= 7; ++t)
      CHECK(adv[0][t] == doctest::Approx(norm[1]).epsilon(1e-12));
  }

  SUBCASE("randomized groups match a per-token summation oracle") {
    Rng rng(37);
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<std::vector<StepReward>> steps(3);
      std::vector<size_t> lens(3);
      std::vector<double> flat;
      for (size_t i = 0; i < 3; ++i) {
        lens[i] = 4 + rng.uniform_index(6);
        size_t end = 0;
        while (true) {
          end += 1 + rng.uniform_index(3);
          if (end >= lens[i]) break;
          const double r = rng.normal(0.0, 2.0);
          steps[i].push_back({end, r});
          flat.push_back(r);
        }
        if (steps[i].empty()) {
          steps[i].push_back({lens[i] - 1, 1.0 + rng.normal(0, 1)});
          flat.push_back(steps[i][0].reward);
        }
      }
      const auto adv = process_advantages(steps, lens, 1e-8);
      // oracle: normalize flat list, then per token brute-force sum
      double mean = 0.0, var = 0.0;
      for (const double r : flat) mean += r;
      mean /= static_cast<double>(flat.size());
      for (const double r : flat) var += (r - mean) * (r - mean);
      const double sd = std::sqrt(var / static_cast<double>(flat.size()));
      for (size_t i = 0; i < 3; ++i)
        for (size_t t = 0; t < lens[i]; ++t) {
          double want = 0.0;
          for (const StepReward& s : steps[i])
            if (s.end_index >= t)
              want += sd < 1e-8 ? 0.0 : (s.reward - mean) / sd;
          CHECK(adv[i][t] == doctest::Approx(want).epsilon(1e-10));
        }
    }
  }

  SUBCASE("contract errors") {
    const std::vector<std::vector<StepReward>> empty_steps = {{}};
    const std::vector<size_t> lens = {4};
    CHECK_THROWS_AS(process_advantages(empty_steps, lens, 1e-8),
                    ContractError);
    const std::vector<std::vector<StepReward>> bad_order = {
        {{3, 1.0}, {2, 1.0}}};
    CHECK_THROWS_AS(process_advantages(bad_order, lens, 1e-8), ContractError);
  }
}

TEST_CASE("grpo objective values") {
  GrpoConfig cfg = base_cfg();
  cfg.group_size = 2;

  SUBCASE("identical policies and zero advantages give zero") {
    std::vector<SequenceScores> group;
    group.push_back(make_scores({-1.0, -2.0}, {-1.0, -2.0}, {0.0, 0.0}));
    group.push_back(make_scores({-0.5}, {-0.5}, {0.0}));
    CHECK(grpo_objective(group, cfg).scalar_value() == 0.0);
  }

  SUBCASE("single token, ratio 1.5, advantage 1 clips to 1.2") {
    std::vector<SequenceScores> group;
    const double lp = std::log(0.6);
    group.push_back(make_scores({lp}, {lp - std::log(1.5)}, {1.0}));
    group.push_back(make_scores({lp}, {lp}, {0.0}));  // inert companion
    ObjectiveMetrics m;
    const double obj = grpo_objective(group, cfg, &m).scalar_value();
    CHECK(obj == doctest::Approx(0.5 * 1.2).epsilon(1e-12));
    CHECK(m.clip_fraction == doctest::Approx(0.5));
  }

  SUBCASE("KL estimator is zero when theta equals ref") {
    GrpoConfig kcfg = base_cfg();
    kcfg.beta = 0.7;
    std::vector<SequenceScores> group;
    SequenceScores s = make_scores({-1.0, -0.3}, {-1.0, -0.3}, {0.0, 0.0});
    s.logp_ref = {-1.0, -0.3};
    group.push_back(s);
    group.push_back(s);
    ObjectiveMetrics m;
    CHECK(grpo_objective(group, kcfg, &m).scalar_value() == 0.0);
    CHECK(m.kl == 0.0);
  }

  SUBCASE("NaN log-probs raise a numeric error") {
    std::vector<SequenceScores> group;
    group.push_back(make_scores({std::nan("")}, {-1.0}, {1.0}));
    group.push_back(make_scores({-1.0}, {-1.0}, {0.0}));
    CHECK_THROWS_AS(grpo_objective(group, cfg), NumericError);
  }
}

TEST_CASE("surrogate term magnitude bound and clip fraction range") {
  Rng rng(41);
  GrpoConfig cfg = base_cfg();
  for (int rep = 0; rep < 25; ++rep) {
    const size_t len = 1 + rng.uniform_index(6);
    std::vector<double> lt(len), lo(len), adv(len);
    for (size_t i = 0; i < len; ++i) {
      lt[i] = -rng.uniform(0.1, 3.0);
      lo[i] = -rng.uniform(0.1, 3.0);
      adv[i] = rng.normal(0.0, 2.0);
    }
    std::vector<SequenceScores> group;
    group.push_back(make_scores(lt, lo, adv));
    group.push_back(make_scores(lo, lo, std::vector<double>(len, 0.0)));
    ObjectiveMetrics m;
    grpo_objective(group, cfg, &m);
    CHECK(m.clip_fraction >= 0.0);
    CHECK(m.clip_fraction <= 1.0);
    for (size_t i = 0; i < len; ++i) {
      const double ratio = std::exp(lt[i] - lo[i]);
      const double surr =
          std::min(ratio * adv[i],
                   std::clamp(ratio, 1 - cfg.epsilon, 1 + cfg.epsilon) *
                       adv[i]);
      CHECK(std::abs(surr) <=
            std::max(ratio, 1 + cfg.epsilon) * std::abs(adv[i]) + 1e-12);
    }
  }
}

TEST_CASE("grpo objective gradient matches finite differences") {
  Rng rng(43);
  GrpoConfig cfg = base_cfg();
  cfg.beta = 0.3;
  const size_t V = 6;
  // tiny direct-logit policy over two outputs of lengths 2 and 3
  Tensor logits_a = Tensor::randn({2, V}, rng, 0.8).set_requires_grad(true);
  Tensor logits_b = Tensor::randn({3, V}, rng, 0.8).set_requires_grad(true);
  const std::vector<int> toks_a = {1, 4};
  const std::vector<int> toks_b = {0, 5, 2};
  std::vector<double> old_a = {-1.1, -2.0};
  std::vector<double> old_b = {-0.4, -1.7, -2.2};
  std::vector<double> ref_a = {-1.0, -1.9};
  std::vector<double> ref_b = {-0.6, -1.5, -2.0};
  std::vector<double> adv_a = {0.7, 0.7};
  std::vector<double> adv_b = {-0.9, -0.9, -0.9};

  auto make = [&] {
    std::vector<SequenceScores> group;
    SequenceScores a;
    a.logp_theta = gather_cols(log_softmax_rows(logits_a), toks_a);
    a.logp_old = old_a;
    a.logp_ref = ref_a;
    a.advantages = adv_a;
    group.push_back(std::move(a));
    SequenceScores b;
    b.logp_theta = gather_cols(log_softmax_rows(logits_b), toks_b);
    b.logp_old = old_b;
    b.logp_ref = ref_b;
    b.advantages = adv_b;
    group.push_back(std::move(b));
    return grpo_objective(group, cfg);
  };
  const double err = gradcheck_max_rel_err(make, {logits_a, logits_b});
  CHECK(err < 1e-4);
}

TEST_CASE("ppo objective: unit ratio recovers mean advantage; matches grpo "
          "at beta 0; pessimistic min in the clipped region") {
  GrpoConfig cfg = base_cfg();

  SUBCASE("ratio one everywhere") {
    std::vector<SequenceScores> seqs;
    seqs.push_back(make_scores({-1.0, -2.0, -0.5}, {-1.0, -2.0, -0.5},
                               {2.0, -1.0, 0.5}));
    seqs.push_back(make_scores({-0.7}, {-0.7}, {4.0}));
    // per-sequence token means: 0.5 and 4.0 → objective 2.25
    CHECK(ppo_objective(seqs, cfg).scalar_value() ==
          doctest::Approx(2.25).epsilon(1e-12));
  }

  SUBCASE("equality with grpo at beta 0 on shared inputs") {
    Rng rng(47);
    std::vector<double> rewards = {1.0, 0.0, 1.0, 1.0};
    const std::vector<double> adv = outcome_advantages(rewards, 1e-8);
    std::vector<SequenceScores> seqs;
    for (size_t i = 0; i < 4; ++i) {
      const size_t len = 2 + rng.uniform_index(3);
      std::vector<double> lt(len), lo(len);
      for (size_t j = 0; j < len; ++j) {
        lt[j] = -rng.uniform(0.2, 2.0);
        lo[j] = -rng.uniform(0.2, 2.0);
      }
      seqs.push_back(
          make_scores(lt, lo, std::vector<double>(len, adv[i])));
    }
    GrpoConfig g = cfg;
    g.beta = 0.0;
    CHECK(ppo_objective(seqs, cfg).scalar_value() ==
          doctest::Approx(grpo_objective(seqs, g).scalar_value())
              .epsilon(1e-14));
  }

  SUBCASE("negative advantage keeps the more pessimistic term") {
    std::vector<SequenceScores> seqs;
    const double lp = std::log(0.3);
    seqs.push_back(make_scores({lp}, {lp - std::log(3.0)}, {-1.0}));
    // min(3·(−1), 1.2·(−1)) = −3
    CHECK(ppo_objective(seqs, cfg).scalar_value() ==
          doctest::Approx(-3.0).epsilon(1e-12));
  }
}

TEST_CASE("grpo_step with zero learning rate leaves the policy unchanged "
          "but reports metrics") {
  TabularPolicy policy(10);
  TabularPolicy ref(10);
  const std::vector<double> before(policy.logits().values().begin(),
                                   policy.logits().values().end());
  GrpoConfig cfg;
  cfg.group_size = 8;
  cfg.beta = 0.04;
  Optimizer opt({0.0, 0, 0.99, 1e-8}, policy.trainable_params());
  Rng rng(3);
  const std::vector<std::vector<int>> prompts = {{0}};
  RewardFn reward = [](const std::vector<int>&, const std::vector<int>& o) {
    return o[0] == 3 ? 1.0 : 0.0;
  };
  const GrpoStepMetrics m =
      grpo_step(policy, &ref, prompts, reward, cfg, opt, rng);
  for (size_t i = 0; i < before.size(); ++i)
    CHECK(policy.logits().values()[i] == before[i]);
  CHECK(m.mean_reward >= 0.0);
  CHECK(m.clip_fraction >= 0.0);
}

TEST_CASE("reward function failures abort the step with a diagnostic") {
  TabularPolicy policy(4);
  GrpoConfig cfg;
  cfg.group_size = 2;
  cfg.beta = 0.0;
  Optimizer opt({0.1, 0, 0.99, 1e-8}, policy.trainable_params());
  Rng rng(5);
  const std::vector<std::vector<int>> prompts = {{0}};
  RewardFn bad = [](const std::vector<int>&,
                    const std::vector<int>&) -> double {
    throw std::runtime_error("scorer offline");
  };
  try {
    grpo_step(policy, nullptr, prompts, bad, cfg, opt, rng);
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("step aborted") != std::string::npos);
  }
}

TEST_CASE("bandit improves the best arm within a short run") {
  GrpoConfig cfg;
  cfg.group_size = 8;
  cfg.epsilon = 0.2;
  cfg.beta = 0.0;
  const BanditRunResult r = run_bandit(10, 3, 150, cfg, 0.1, 0);
  INFO("best arm prob " << r.best_arm_prob);
  CHECK(r.best_arm_prob > 0.5);
}

TEST_CASE("beta sweep: stronger KL regularization keeps the policy closer "
          "to the reference") {
  GrpoConfig cfg;
  cfg.group_size = 8;
  cfg.epsilon = 0.2;
  auto run = [&](double beta) {
    GrpoConfig c = cfg;
    c.beta = beta;
    return run_bandit(10, 3, 300, c, 0.1, 0);
  };
  const BanditRunResult free_run = run(0.0);
  const BanditRunResult mild = run(0.04);
  const BanditRunResult heavy = run(10.0);
  INFO("kl " << free_run.kl_to_uniform << " " << mild.kl_to_uniform << " "
             << heavy.kl_to_uniform);
  CHECK(heavy.kl_to_uniform <= mild.kl_to_uniform);
  CHECK(mild.kl_to_uniform <= free_run.kl_to_uniform);
  CHECK(heavy.kl_to_uniform < free_run.kl_to_uniform);
  CHECK(heavy.kl_to_uniform < 0.2);          // regularization dominates
  CHECK(heavy.best_arm_prob < free_run.best_arm_prob);  // reward gain limited
}

TEST_CASE("exact KL mode agrees with the estimator at the optimum point") {
  // when theta == ref both the estimator and the vocab sum give exactly 0
  GrpoConfig cfg;
  cfg.group_size = 2;
  cfg.beta = 1.0;
  cfg.exact_kl = true;
  const size_t V = 5;
  Tensor logits = Tensor::zeros({1, V}).set_requires_grad(true);
  auto full = log_softmax_rows(logits);
  SequenceScores s;
  const std::vector<int> tok = {2};
  s.logp_theta = gather_cols(full, tok);
  s.logp_old = {s.logp_theta.values()[0]};
  s.advantages = {0.0};
  s.full_logp_theta = full;
  s.full_logp_ref.assign(full.values().begin(), full.values().end());
  std::vector<SequenceScores> group = {s, s};
  ObjectiveMetrics m;
  const double obj = grpo_objective(group, cfg, &m).scalar_value();
  CHECK(std::abs(obj) < 1e-15);
  CHECK(std::abs(m.kl) < 1e-15);
}
