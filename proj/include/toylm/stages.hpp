#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "toylm/checkpoint.hpp"
#include "toylm/corpus.hpp"
#include "toylm/grpo.hpp"
#include "toylm/model.hpp"
#include "toylm/rewards.hpp"
#include "toylm/train.hpp"

namespace toylm {

// --- GRPO over the toy language model ----------------------------------------

// Policy view of a ToyModel for a fixed decode budget and stop symbol.
class LmPolicy : public Policy {
 public:
  LmPolicy(ToyModel& model, size_t max_new, int stop_token)
      : model_(model), max_new_(max_new), stop_(stop_token) {}

  Rollout sample(const std::vector<int>& prompt, Rng& rng) override;
  Tensor output_logits(const std::vector<int>& prompt,
                       const std::vector<int>& output) override;
  std::vector<double> output_logprobs(
      const std::vector<int>& prompt,
      const std::vector<int>& output) const override;
  std::vector<double> output_full_logprobs(
      const std::vector<int>& prompt,
      const std::vector<int>& output) const override;
  std::vector<Tensor> trainable_params() override;

 private:
  ToyModel& model_;
  size_t max_new_;
  int stop_;
};

// --- stage plan ---------------------------------------------------------------

enum class StageKind {
  pretrain,
  cold_start_sft,
  reasoning_rl,
  rejection_sampling_sft,
  rl_alignment_proxy,
};

std::string stage_name(StageKind k);
StageKind stage_from_name(const std::string& name);

struct StagePlan {
  std::vector<StageKind> stages;

  static StagePlan parse(const std::string& comma_list);
  std::string render() const;
};

struct RlStageConfig {
  size_t steps = 300;
  size_t prompts_per_step = 2;
  size_t max_new_tokens = 24;
  double lr = 0.02;
  size_t warmup = 0;
  double beta2 = 0.99;
  std::string rewards = "accuracy:1,format:1";
  int max_digits = 2;
};

struct ColdStartConfig {
  size_t samples = 2000;
  int max_digits = 2;
  SftConfig sft;
};

struct RejectConfig {
  size_t prompts = 100;
  size_t n_per_prompt = 8;
  int max_digits = 2;
  size_t max_new_tokens = 24;
  SftConfig sft;
};

// Everything one training run needs besides the output directory.
struct HarnessConfig {
  ModelConfig model;  // model.vocab is filled from the corpus
  PretrainConfig pretrain;
  ColdStartConfig cold_start;
  RlStageConfig rl;
  GrpoConfig grpo;
  RejectConfig reject;
  RlStageConfig align;  // proxy alignment stage (rule-based rewards only)
  StagePlan plan;
  std::string corpus_path;
  double valid_fraction = 0.1;
  uint64_t seed = 0;

  // stage dependencies + reward resolvability; throws before any compute
  void validate_plan(const RewardRegistry& registry) const;
};

struct StageRunResult {
  std::string name;
  std::string metrics_csv;
  std::string checkpoint;
};

struct PlanRunResult {
  std::vector<StageRunResult> stages;
  std::unique_ptr<ToyModel> model;
  Corpus corpus;
};

// Executes the stages in order under out_dir. config_snapshot, when nonempty,
// is embedded into every saved checkpoint together with the vocabulary so
// checkpoints are self-describing.
PlanRunResult run_stage_plan(const HarnessConfig& cfg,
                             const std::string& out_dir,
                             const std::string& config_snapshot = "");

// --- individual stages (exposed for tests) ------------------------------------

struct RlStageResult {
  std::string metrics_csv;
  double final_mean_reward = 0.0;
};

RlStageResult reasoning_rl_stage(ToyModel& model, const Tokenizer& tok,
                                 const RlStageConfig& rl, const GrpoConfig& g,
                                 const RewardRegistry& registry,
                                 uint64_t seed, const std::string& csv_path);

std::vector<SftExample> make_cold_start_dataset(size_t samples, int max_digits,
                                                uint64_t seed);

// Samples n_per_prompt completions per prompt, keeps reward-passing ones
// (default rule: reward >= 1), deduplicates exact records. Zero survivors is
// an empty dataset, not a failure.
std::vector<SftExample> rejection_sample(
    const ToyModel& model, const Tokenizer& tok,
    std::span<const std::string> prompts, const TextRewardFn& reward,
    size_t n_per_prompt, size_t max_new, Rng& rng,
    const std::function<bool(double)>& keep_rule = {});

// Line-delimited SFT records with a leading format tag; prompt and completion
// fields are tab-separated with \t, \n, \\ escaped.
void save_sft_dataset(const std::string& path,
                      std::span<const SftExample> examples);
std::vector<SftExample> load_sft_dataset(const std::string& path);

// --- evaluation ----------------------------------------------------------------

struct ArithEval {
  double accuracy = 0.0;
  double format_rate = 0.0;
  size_t n = 0;
};

// Seeded sampling evaluation over fresh arithmetic prompts.
ArithEval evaluate_arithmetic(const ToyModel& model, const Tokenizer& tok,
                              size_t n_prompts, int max_digits, size_t max_new,
                              uint64_t seed);

// Mean main cross-entropy over non-overlapping validation windows.
double validation_loss(ToyModel& model, const Corpus& corpus, size_t seq_len,
                       size_t max_windows = 64);

// Model parameters under their canonical names plus meta.* entries (config
// snapshot text and vocabulary) when provided.
void save_model_checkpoint(const std::string& path, const ToyModel& model,
                           const Tokenizer* tok = nullptr,
                           const std::string& config_snapshot = "");

struct LoadedCheckpoint {
  NamedTensors tensors;
  std::optional<Tokenizer> tokenizer;
  std::string config_snapshot;
};
LoadedCheckpoint load_model_checkpoint(const std::string& path);
// Copies parameter values into the model; names and shapes must match.
void restore_parameters(ToyModel& model, const NamedTensors& tensors);

}  // namespace toylm
