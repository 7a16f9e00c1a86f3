#include "toylm/train.hpp"

#include <cmath>
#include <cstdio>
#include <deque>

#include "toylm/checkpoint.hpp"

namespace toylm {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<Tensor> param_tensors(const ToyModel& model) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : model.named_parameters()) out.push_back(t);
  return out;
}

}  // namespace

MetricsCsv::MetricsCsv(const std::string& path,
                       std::span<const std::string> columns)
    : path_(path), n_cols_(columns.size()) {
  out_.open(path, std::ios::trunc);
  if (!out_) throw ContractError("metrics: cannot open for write: " + path);
  out_ << "toylm_metrics_v1\n";
  for (size_t i = 0; i < columns.size(); ++i)
    out_ << columns[i] << (i + 1 < columns.size() ? "," : "\n");
}

void MetricsCsv::row(std::span<const double> values) {
  if (values.size() != n_cols_)
    throw ContractError("metrics: row width mismatch");
  for (size_t i = 0; i < values.size(); ++i)
    out_ << fmt_double(values[i]) << (i + 1 < values.size() ? "," : "\n");
}

PretrainResult pretrain(ToyModel& model, const Corpus& corpus,
                        const PretrainConfig& cfg,
                        const std::string& metrics_path) {
  if (corpus.train_ids.empty()) throw ContractError("pretrain: empty corpus");
  const size_t window = cfg.seq_len + 1 + model.config().mtp.D;
  if (corpus.train_ids.size() < window)
    throw ContractError("pretrain: corpus shorter than one training window (" +
                        std::to_string(corpus.train_ids.size()) + " < " +
                        std::to_string(window) + " tokens)");

  std::vector<std::string> cols = {"step", "loss", "loss_main"};
  for (size_t k = 1; k <= model.config().mtp.D; ++k)
    cols.push_back("loss_mtp_k" + std::to_string(k));
  cols.push_back("loss_balance");
  cols.push_back("loss_smoothed");
  cols.push_back("lr");
  MetricsCsv csv(metrics_path, cols);

  Optimizer opt({cfg.lr, cfg.warmup, cfg.beta2, 1e-8}, param_tensors(model));
  Rng offsets = Rng(cfg.seed).fork("pretrain/offsets");

  std::deque<double> recent;
  double recent_sum = 0.0;
  PretrainResult res;
  std::vector<int> tokens(window);
  for (size_t step = 1; step <= cfg.steps; ++step) {
    // circular windows: the draw does not depend on the window length, so
    // the data stream is identical across MTP depths
    const size_t off = offsets.uniform_index(corpus.train_ids.size());
    for (size_t i = 0; i < window; ++i)
      tokens[i] = corpus.train_ids[(off + i) % corpus.train_ids.size()];

    LmLossOut loss;
    try {
      loss = model.sequence_loss(tokens);
    } catch (const NumericError&) {
      NamedTensors diag;
      for (const auto& [name, t] : model.named_parameters())
        diag.add(name, t);
      save_checkpoint(metrics_path + ".diverged.ckpt", diag);
      throw;
    }
    opt.zero_grad();
    loss.total.backward();
    const double lr_used = opt.current_lr();
    opt.step();
    model.end_batch();

    const double total = loss.total.scalar_value();
    recent.push_back(total);
    recent_sum += total;
    if (recent.size() > cfg.smooth_window) {
      recent_sum -= recent.front();
      recent.pop_front();
    }
    const double smoothed = recent_sum / static_cast<double>(recent.size());

    std::vector<double> row = {static_cast<double>(step), total, loss.main};
    for (size_t k = 0; k < model.config().mtp.D; ++k)
      row.push_back(k < loss.mtp_per_depth.size() ? loss.mtp_per_depth[k]
                                                  : 0.0);
    row.push_back(loss.balance);
    row.push_back(smoothed);
    row.push_back(lr_used);
    csv.row(row);

    res.final_loss = total;
    res.smoothed_loss = smoothed;
    res.steps = step;
  }
  return res;
}

double sft_train(ToyModel& model, const Tokenizer& tok,
                 std::span<const SftExample> examples, const SftConfig& cfg,
                 const std::string& metrics_path) {
  if (examples.empty()) throw ContractError("sft: no examples");
  const std::vector<std::string> cols = {"step", "loss", "lr"};
  MetricsCsv csv(metrics_path, cols);
  Optimizer opt({cfg.lr, cfg.warmup, cfg.beta2, 1e-8}, param_tensors(model));
  Rng pick = Rng(cfg.seed).fork("sft/examples");

  double last = 0.0;
  for (size_t step = 1; step <= cfg.steps; ++step) {
    const SftExample& ex = examples[pick.uniform_index(examples.size())];
    const std::vector<int> prompt_ids = tok.encode(ex.prompt);
    const std::vector<int> all_ids = tok.encode(ex.prompt + ex.completion);
    if (all_ids.size() < prompt_ids.size() + 1)
      throw ContractError("sft: empty completion for prompt '" + ex.prompt +
                          "'");
    Tensor lp =
        model.token_logprobs(all_ids, prompt_ids.size(), all_ids.size());
    Tensor loss = scale(mean(lp), -1.0);
    if (!std::isfinite(loss.scalar_value()))
      throw NumericError("sft: non-finite loss");
    opt.zero_grad();
    loss.backward();
    const double lr_used = opt.current_lr();
    opt.step();
    model.end_batch();
    last = loss.scalar_value();
    const double row[] = {static_cast<double>(step), last, lr_used};
    csv.row(row);
  }
  return last;
}

}  // namespace toylm
