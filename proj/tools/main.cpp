#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "toylm/config.hpp"
#include "toylm/stages.hpp"

namespace {

using namespace toylm;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

int cmd_train(const std::string& config_path, long seed_override,
              const std::string& out_override) {
  RunConfig cfg = parse_config_file(config_path);
  if (seed_override >= 0)
    cfg.harness.seed = static_cast<uint64_t>(seed_override);
  if (!out_override.empty()) cfg.out_dir = out_override;
  cfg.validate();

  std::filesystem::create_directories(cfg.out_dir);
  const std::string snapshot = render_config(cfg);
  {
    std::ofstream snap(cfg.out_dir + "/config_resolved.txt", std::ios::trunc);
    snap << snapshot;
  }

  const PlanRunResult res =
      run_stage_plan(cfg.harness, cfg.out_dir, snapshot);
  for (const StageRunResult& s : res.stages)
    std::cout << "stage=" << s.name << " metrics=" << s.metrics_csv
              << " checkpoint=" << s.checkpoint << "\n";
  std::cout << "final_checkpoint=" << cfg.out_dir + "/final.ckpt" << "\n";
  return kExitOk;
}

// Rebuilds the model a checkpoint describes; throws ConfigError on any
// checkpoint/config disagreement.
struct RestoredRun {
  RunConfig cfg;
  Tokenizer tok;
  std::unique_ptr<ToyModel> model;
};

RestoredRun restore_run(const std::string& ckpt_path) {
  LoadedCheckpoint lc = load_model_checkpoint(ckpt_path);
  if (!lc.tokenizer || lc.config_snapshot.empty())
    throw ConfigError("checkpoint lacks embedded config/vocab: " + ckpt_path);
  RestoredRun r;
  r.cfg = parse_config_text(lc.config_snapshot);
  r.tok = *lc.tokenizer;
  ModelConfig mc = r.cfg.harness.model;
  mc.vocab = r.tok.vocab();
  r.model = std::make_unique<ToyModel>(mc, r.cfg.harness.seed);
  try {
    restore_parameters(*r.model, lc.tensors);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("checkpoint/config mismatch: ") + e.what());
  }
  return r;
}

int cmd_eval(const std::string& ckpt_path, const std::string& task, size_t n,
             long seed_flag) {
  RestoredRun r = restore_run(ckpt_path);
  const uint64_t seed =
      seed_flag >= 0 ? static_cast<uint64_t>(seed_flag) : 0;
  if (task == "loss") {
    const Corpus corpus =
        load_corpus(r.cfg.harness.corpus_path, {}, r.cfg.harness.valid_fraction);
    if (corpus.tokenizer.vocab() != r.tok.vocab())
      throw ConfigError("corpus vocabulary differs from the checkpoint's");
    const double loss = validation_loss(*r.model, corpus,
                                        r.cfg.harness.pretrain.seq_len);
    std::printf("loss=%.17g\n", loss);
    std::printf("vocab=%zu\n", r.tok.vocab());
    std::printf("ln_vocab=%.17g\n",
                std::log(static_cast<double>(r.tok.vocab())));
  } else if (task == "arithmetic") {
    const ArithEval ev = evaluate_arithmetic(
        *r.model, r.tok, n, r.cfg.harness.rl.max_digits,
        r.cfg.harness.rl.max_new_tokens, seed);
    std::printf("accuracy=%.17g\n", ev.accuracy);
    std::printf("format_rate=%.17g\n", ev.format_rate);
    std::printf("n=%zu\n", ev.n);
  } else {
    throw ConfigError("unknown eval task '" + task +
                      "' (expected loss or arithmetic)");
  }
  return kExitOk;
}

int cmd_inspect(const std::string& subject, const std::string& config_path) {
  RunConfig cfg = parse_config_file(config_path);
  cfg.validate(/*check_corpus_readable=*/false);
  const AttentionConfig& a = cfg.harness.model.attn;
  if (subject == "attention") {
    const size_t mha = kv_cache_size(a, AttentionVariant::mha);
    const size_t mla = kv_cache_size(a, AttentionVariant::mla);
    const size_t T = cfg.harness.pretrain.seq_len;
    std::printf("variant,scalars_per_token,scalars_per_sequence_T%zu\n", T);
    std::printf("mha,%zu,%zu\n", mha, mha * T);
    std::printf("mla,%zu,%zu\n", mla, mla * T);
    std::printf("mla_to_mha_ratio=%.17g\n",
                static_cast<double>(mla) / static_cast<double>(mha));
    std::printf("mla_per_token_in_dh_l_units=%.17g\n",
                static_cast<double>(mla) /
                    static_cast<double>(a.d_h * a.l));
  } else if (subject == "moe") {
    const MoeLayerConfig& m = cfg.harness.model.moe;
    m.validate();
    std::printf("total_experts=%zu\n", m.total_experts());
    std::printf("routed_experts=%zu\n", m.routed_experts());
    std::printf("active_routed_per_token=%zu\n", m.active_routed());
    std::printf("total_expert_params=%zu\n", m.total_expert_params());
    std::printf("activated_expert_params=%zu\n", m.activated_expert_params());
    // seeded routing summary over random tokens
    RouterState router =
        RouterState::init(m, Rng(cfg.harness.seed).fork("inspect/router"));
    Rng tokens = Rng(cfg.harness.seed).fork("inspect/tokens");
    const size_t n_tokens = 512;
    std::vector<uint64_t> loads(m.routed_experts(), 0);
    std::vector<double> u(m.d);
    for (size_t t = 0; t < n_tokens; ++t) {
      for (double& x : u) x = tokens.normal();
      const RouteResult rr = route(u, router, m);
      for (const size_t i : rr.selected) loads[i] += 1;
    }
    std::printf("expert,load,bias\n");
    for (size_t i = 0; i < loads.size(); ++i)
      std::printf("%zu,%llu,%.17g\n", i,
                  static_cast<unsigned long long>(loads[i]), router.bias[i]);
  } else {
    throw ConfigError("unknown inspect subject '" + subject +
                      "' (expected attention or moe)");
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toy language model exercising latent attention, fine-grained "
               "mixture routing, multi-token prediction and group-relative "
               "policy optimization"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt_path, task = "loss", subject;
  long seed = -1;
  size_t eval_n = 200;

  CLI::App* train = app.add_subcommand("train", "run the configured stage plan");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--seed", seed, "seed override");
  train->add_option("--out", out_dir, "output directory override");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--task", task, "loss | arithmetic");
  eval->add_option("--n", eval_n, "prompts for task evaluation");
  eval->add_option("--seed", seed, "evaluation seed");

  CLI::App* inspect =
      app.add_subcommand("inspect", "report cache sizes or expert loads");
  inspect->add_option("subject", subject, "attention | moe")->required();
  inspect->add_option("--config", config_path, "config file")->required();

  CLI::App* pdc = app.add_subcommand("print-default-config",
                                     "print every key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(config_path, seed, out_dir);
    if (eval->parsed()) return cmd_eval(ckpt_path, task, eval_n, seed);
    if (inspect->parsed()) return cmd_inspect(subject, config_path);
    if (pdc->parsed()) {
      std::cout << render_config(default_run_config());
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitConfig;
}
