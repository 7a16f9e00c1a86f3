#include "toylm/stages.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

namespace toylm {

namespace {

const std::vector<std::string> kTaskChars = {"0123456789+-=\n"};

std::vector<int> full_sequence(const std::vector<int>& prompt,
                               const std::vector<int>& output) {
  std::vector<int> seq = prompt;
  seq.insert(seq.end(), output.begin(), output.end());
  return seq;
}

}  // namespace

// --- LmPolicy -----------------------------------------------------------------

Rollout LmPolicy::sample(const std::vector<int>& prompt, Rng& rng) {
  ToyModel::Sampled s = model_.sample_completion(prompt, max_new_, stop_, rng);
  return {std::move(s.tokens), std::move(s.logprobs)};
}

Tensor LmPolicy::output_logits(const std::vector<int>& prompt,
                               const std::vector<int>& output) {
  if (prompt.empty() || output.empty())
    throw ContractError("policy: prompt and output must be nonempty");
  const std::vector<int> seq = full_sequence(prompt, output);
  // rows P-1 .. P+L-2 of the body output predict the output tokens
  std::span<const int> ctx{seq.data(), seq.size() - 1};
  ToyModel::BodyOut body = model_.body_forward(ctx);
  Tensor rows = slice_rows(body.hidden, prompt.size() - 1,
                           prompt.size() - 1 + output.size());
  return model_.logits_from_hidden(rows);
}

std::vector<double> LmPolicy::output_logprobs(
    const std::vector<int>& prompt, const std::vector<int>& output) const {
  return model_.completion_logprobs_plain(prompt, output);
}

std::vector<double> LmPolicy::output_full_logprobs(
    const std::vector<int>& prompt, const std::vector<int>& output) const {
  ToyModel::DecodeState st = model_.new_decode_state();
  std::vector<double> logits;
  for (const int t : prompt) logits = model_.decode_step(st, t);
  std::vector<double> out;
  out.reserve(output.size() * model_.config().vocab);
  for (size_t i = 0; i < output.size(); ++i) {
    double mx = logits[0];
    for (const double v : logits) mx = std::max(mx, v);
    double denom = 0.0;
    for (const double v : logits) denom += std::exp(v - mx);
    const double lse = mx + std::log(denom);
    for (const double v : logits) out.push_back(v - lse);
    if (i + 1 < output.size()) logits = model_.decode_step(st, output[i]);
  }
  return out;
}

std::vector<Tensor> LmPolicy::trainable_params() {
  std::vector<Tensor> out;
  for (const auto& [name, t] : model_.named_parameters()) out.push_back(t);
  return out;
}

// --- stage plan ----------------------------------------------------------------

std::string stage_name(StageKind k) {
  switch (k) {
    case StageKind::pretrain: return "pretrain";
    case StageKind::cold_start_sft: return "cold_start_sft";
    case StageKind::reasoning_rl: return "reasoning_rl";
    case StageKind::rejection_sampling_sft: return "rejection_sampling_sft";
    case StageKind::rl_alignment_proxy: return "rl_alignment_proxy";
  }
  throw ContractError("stage_name: bad stage kind");
}

StageKind stage_from_name(const std::string& name) {
  for (const StageKind k :
       {StageKind::pretrain, StageKind::cold_start_sft, StageKind::reasoning_rl,
        StageKind::rejection_sampling_sft, StageKind::rl_alignment_proxy})
    if (stage_name(k) == name) return k;
  throw ContractError("unknown stage '" + name + "'");
}

StagePlan StagePlan::parse(const std::string& comma_list) {
  StagePlan plan;
  size_t pos = 0;
  while (pos < comma_list.size()) {
    size_t comma = comma_list.find(',', pos);
    if (comma == std::string::npos) comma = comma_list.size();
    const std::string name = comma_list.substr(pos, comma - pos);
    if (!name.empty()) plan.stages.push_back(stage_from_name(name));
    pos = comma + 1;
  }
  return plan;
}

std::string StagePlan::render() const {
  std::string out;
  for (size_t i = 0; i < stages.size(); ++i) {
    if (i) out += ",";
    out += stage_name(stages[i]);
  }
  return out;
}

void HarnessConfig::validate_plan(const RewardRegistry& registry) const {
  bool saw_rl = false;
  for (const StageKind k : plan.stages) {
    if (k == StageKind::reasoning_rl) {
      // every reward named in the spec string must be registered
      size_t pos = 0;
      const std::string& spec = rl.rewards;
      while (pos < spec.size()) {
        size_t comma = spec.find(',', pos);
        if (comma == std::string::npos) comma = spec.size();
        std::string item = spec.substr(pos, comma - pos);
        const size_t colon = item.find(':');
        if (colon != std::string::npos) item = item.substr(0, colon);
        if (!registry.has(item))
          throw ContractError("plan validation: reasoning_rl reward '" + item +
                              "' is not registered");
        pos = comma + 1;
      }
      saw_rl = true;
    }
    if (k == StageKind::rejection_sampling_sft && !saw_rl)
      throw ContractError(
          "plan validation: rejection_sampling_sft requires a prior "
          "reasoning_rl stage");
  }
}

// --- datasets -------------------------------------------------------------------

std::vector<SftExample> make_cold_start_dataset(size_t samples, int max_digits,
                                                uint64_t seed) {
  ArithmeticTaskGen gen(Rng(seed).fork("cold_start/tasks").seed(), max_digits);
  std::vector<SftExample> out;
  out.reserve(samples);
  for (size_t i = 0; i < samples; ++i) {
    const ArithmeticTask t = gen.sample();
    const std::string line = gen.templated_line(t);
    out.push_back({t.prompt, line.substr(t.prompt.size())});
  }
  return out;
}

std::vector<SftExample> rejection_sample(
    const ToyModel& model, const Tokenizer& tok,
    std::span<const std::string> prompts, const TextRewardFn& reward,
    size_t n_per_prompt, size_t max_new, Rng& rng,
    const std::function<bool(double)>& keep_rule) {
  std::function<bool(double)> keep = keep_rule;
  if (!keep) keep = [](double r) { return r >= 1.0; };
  const int stop = tok.id_of("\n");
  std::vector<SftExample> out;
  std::set<std::pair<std::string, std::string>> seen;
  for (const std::string& prompt : prompts) {
    const std::vector<int> pids = tok.encode(prompt);
    for (size_t i = 0; i < n_per_prompt; ++i) {
      ToyModel::Sampled s =
          model.sample_completion(pids, max_new, stop, rng);
      const std::string completion = tok.decode(s.tokens);
      if (!keep(reward(prompt, completion))) continue;
      if (!seen.insert({prompt, completion}).second) continue;
      out.push_back({prompt, completion});
    }
  }
  if (out.empty())
    std::cerr << "warning: rejection sampling kept zero completions\n";
  return out;
}

namespace {

std::string escape_field(std::string_view s) {
  std::string out;
  for (const char c : s) {
    if (c == '\\') out += "\\\\";
    else if (c == '\t') out += "\\t";
    else if (c == '\n') out += "\\n";
    else out += c;
  }
  return out;
}

std::string unescape_field(std::string_view s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      ++i;
      if (s[i] == 't') out += '\t';
      else if (s[i] == 'n') out += '\n';
      else out += s[i];
    } else {
      out += s[i];
    }
  }
  return out;
}

}  // namespace

void save_sft_dataset(const std::string& path,
                      std::span<const SftExample> examples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ContractError("sft dataset: cannot open for write: " + path);
  out << "toylm_sft_v1\n";
  for (const SftExample& e : examples)
    out << escape_field(e.prompt) << '\t' << escape_field(e.completion)
        << '\n';
}

std::vector<SftExample> load_sft_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("sft dataset: cannot open: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "toylm_sft_v1")
    throw ContractError("sft dataset: bad format tag in " + path);
  std::vector<SftExample> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw ContractError("sft dataset: malformed record in " + path);
    out.push_back({unescape_field(line.substr(0, tab)),
                   unescape_field(line.substr(tab + 1))});
  }
  return out;
}

// --- evaluation -----------------------------------------------------------------

ArithEval evaluate_arithmetic(const ToyModel& model, const Tokenizer& tok,
                              size_t n_prompts, int max_digits, size_t max_new,
                              uint64_t seed) {
  ArithmeticTaskGen gen(Rng(seed).fork("eval/tasks").seed(), max_digits);
  Rng sampler = Rng(seed).fork("eval/sampling");
  const int stop = tok.id_of("\n");
  ArithEval ev;
  ev.n = n_prompts;
  for (size_t i = 0; i < n_prompts; ++i) {
    const ArithmeticTask t = gen.sample();
    const std::vector<int> pids = tok.encode(t.prompt);
    ToyModel::Sampled s =
        model.sample_completion(pids, max_new, stop, sampler);
    const std::string completion = tok.decode(s.tokens);
    ev.accuracy += reward_accuracy(t.prompt, completion);
    ev.format_rate += reward_format(completion);
  }
  ev.accuracy /= static_cast<double>(n_prompts);
  ev.format_rate /= static_cast<double>(n_prompts);
  return ev;
}

double validation_loss(ToyModel& model, const Corpus& corpus, size_t seq_len,
                       size_t max_windows) {
  const size_t window = seq_len + 1 + model.config().mtp.D;
  if (corpus.valid_ids.size() < window)
    throw ContractError("validation_loss: validation split too small");
  double total = 0.0;
  size_t n = 0;
  for (size_t off = 0;
       off + window <= corpus.valid_ids.size() && n < max_windows;
       off += window) {
    const LmLossOut loss = model.sequence_loss(
        {corpus.valid_ids.data() + off, window});
    total += loss.main;
    ++n;
  }
  return total / static_cast<double>(n);
}

// --- checkpoints -----------------------------------------------------------------

namespace {

Tensor bytes_tensor(const std::string& text) {
  std::vector<double> data(text.size());
  for (size_t i = 0; i < text.size(); ++i)
    data[i] = static_cast<double>(static_cast<unsigned char>(text[i]));
  return Tensor::from_data(std::move(data), {std::max<size_t>(1, text.size())});
}

std::string tensor_bytes(const Tensor& t) {
  std::string out;
  out.reserve(t.size());
  for (const double v : t.values())
    out += static_cast<char>(static_cast<unsigned char>(v));
  return out;
}

}  // namespace

void save_model_checkpoint(const std::string& path, const ToyModel& model,
                           const Tokenizer* tok,
                           const std::string& config_snapshot) {
  NamedTensors nt;
  for (const auto& [name, t] : model.named_parameters()) nt.add(name, t);
  if (tok) {
    std::string joined;
    for (size_t i = 0; i < tok->symbols().size(); ++i) {
      if (i) joined += '\0';
      joined += tok->symbols()[i];
    }
    nt.add("meta.vocab", bytes_tensor(joined));
  }
  if (!config_snapshot.empty())
    nt.add("meta.config", bytes_tensor(config_snapshot));
  save_checkpoint(path, nt);
}

LoadedCheckpoint load_model_checkpoint(const std::string& path) {
  LoadedCheckpoint out;
  out.tensors = load_checkpoint(path);
  if (const Tensor* v = out.tensors.find("meta.vocab")) {
    const std::string joined = tensor_bytes(*v);
    std::vector<std::string> symbols;
    std::string cur;
    for (const char c : joined) {
      if (c == '\0') {
        symbols.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    symbols.push_back(cur);
    out.tokenizer = Tokenizer::from_symbols(std::move(symbols));
  }
  if (const Tensor* c = out.tensors.find("meta.config"))
    out.config_snapshot = tensor_bytes(*c);
  return out;
}

void restore_parameters(ToyModel& model, const NamedTensors& tensors) {
  for (auto& [name, t] : model.named_parameters()) {
    const Tensor* src = tensors.find(name);
    if (!src)
      throw ContractError("checkpoint: missing tensor '" + name + "'");
    if (src->shape() != t.shape())
      throw ContractError("checkpoint: shape mismatch for '" + name + "'");
    Tensor dst = t;
    auto d = dst.mutable_values();
    const auto s = src->values();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

// --- stages -----------------------------------------------------------------------

RlStageResult reasoning_rl_stage(ToyModel& model, const Tokenizer& tok,
                                 const RlStageConfig& rl, const GrpoConfig& g,
                                 const RewardRegistry& registry, uint64_t seed,
                                 const std::string& csv_path) {
  const TextRewardFn text_reward = registry.composite(rl.rewards);
  const int stop = tok.id_of("\n");
  if (stop < 0)
    throw ContractError("reasoning_rl: newline must be in the vocabulary");

  // the reference policy is a frozen clone; the live model never aliases it
  std::unique_ptr<ToyModel> ref_model = model.clone();
  LmPolicy policy(model, rl.max_new_tokens, stop);
  LmPolicy ref(*ref_model, rl.max_new_tokens, stop);

  RewardFn reward = [&](const std::vector<int>& prompt,
                        const std::vector<int>& output) {
    return text_reward(tok.decode(prompt), tok.decode(output));
  };

  Optimizer opt({rl.lr, rl.warmup, rl.beta2, 1e-8}, policy.trainable_params());
  Rng rng = Rng(seed).fork("rl/sampling");
  ArithmeticTaskGen gen(Rng(seed).fork("rl/tasks").seed(), rl.max_digits);

  const std::vector<std::string> cols = {"step", "mean_reward", "kl",
                                         "clip_fraction", "objective"};
  MetricsCsv csv(csv_path, cols);

  RlStageResult res;
  res.metrics_csv = csv_path;
  for (size_t step = 1; step <= rl.steps; ++step) {
    std::vector<std::vector<int>> prompts;
    for (size_t p = 0; p < rl.prompts_per_step; ++p)
      prompts.push_back(tok.encode(gen.sample().prompt));
    const GrpoStepMetrics m =
        grpo_step(policy, &ref, prompts, reward, g, opt, rng);
    model.end_batch();
    const double row[] = {static_cast<double>(step), m.mean_reward, m.kl,
                          m.clip_fraction, m.objective};
    csv.row(row);
    res.final_mean_reward = m.mean_reward;
  }
  return res;
}

PlanRunResult run_stage_plan(const HarnessConfig& cfg,
                             const std::string& out_dir,
                             const std::string& config_snapshot) {
  const RewardRegistry registry = RewardRegistry::with_builtins();
  cfg.validate_plan(registry);
  std::filesystem::create_directories(out_dir);

  PlanRunResult result;
  result.corpus =
      load_corpus(cfg.corpus_path, kTaskChars, cfg.valid_fraction);
  ModelConfig mc = cfg.model;
  mc.vocab = result.corpus.tokenizer.vocab();
  result.model = std::make_unique<ToyModel>(mc, cfg.seed);

  size_t idx = 0;
  for (const StageKind kind : cfg.plan.stages) {
    StageRunResult sr;
    sr.name = stage_name(kind);
    const std::string base =
        out_dir + "/" + std::to_string(idx) + "_" + sr.name;
    sr.metrics_csv = base + ".csv";

    switch (kind) {
      case StageKind::pretrain: {
        PretrainConfig pc = cfg.pretrain;
        pc.seed = cfg.seed;
        pretrain(*result.model, result.corpus, pc, sr.metrics_csv);
        break;
      }
      case StageKind::cold_start_sft: {
        const std::vector<SftExample> data = make_cold_start_dataset(
            cfg.cold_start.samples, cfg.cold_start.max_digits, cfg.seed);
        save_sft_dataset(base + ".sft", data);
        SftConfig sc = cfg.cold_start.sft;
        sc.seed = cfg.seed;
        sft_train(*result.model, result.corpus.tokenizer, data, sc,
                  sr.metrics_csv);
        break;
      }
      case StageKind::reasoning_rl: {
        reasoning_rl_stage(*result.model, result.corpus.tokenizer, cfg.rl,
                           cfg.grpo, registry, cfg.seed, sr.metrics_csv);
        break;
      }
      case StageKind::rejection_sampling_sft: {
        ArithmeticTaskGen gen(Rng(cfg.seed).fork("reject/tasks").seed(),
                              cfg.reject.max_digits);
        std::vector<std::string> prompts;
        for (size_t i = 0; i < cfg.reject.prompts; ++i)
          prompts.push_back(gen.sample().prompt);
        Rng rng = Rng(cfg.seed).fork("reject/sampling");
        const TextRewardFn reward = registry.get("accuracy");
        const std::vector<SftExample> data = rejection_sample(
            *result.model, result.corpus.tokenizer, prompts, reward,
            cfg.reject.n_per_prompt, cfg.reject.max_new_tokens, rng);
        save_sft_dataset(base + ".sft", data);
        if (!data.empty()) {
          SftConfig sc = cfg.reject.sft;
          sc.seed = cfg.seed;
          sft_train(*result.model, result.corpus.tokenizer, data, sc,
                    sr.metrics_csv);
        }
        break;
      }
      case StageKind::rl_alignment_proxy: {
        // same GRPO machinery, rule-based helpfulness proxy rewards
        reasoning_rl_stage(*result.model, result.corpus.tokenizer, cfg.align,
                           cfg.grpo, registry, cfg.seed, sr.metrics_csv);
        break;
      }
    }

    sr.checkpoint = base + ".ckpt";
    save_model_checkpoint(sr.checkpoint, *result.model,
                          &result.corpus.tokenizer, config_snapshot);
    result.stages.push_back(std::move(sr));
    ++idx;
  }

  save_model_checkpoint(out_dir + "/final.ckpt", *result.model,
                        &result.corpus.tokenizer, config_snapshot);
  return result;
}

}  // namespace toylm
