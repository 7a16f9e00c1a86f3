#pragma once

#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "toylm/corpus.hpp"
#include "toylm/model.hpp"
#include "toylm/optimizer.hpp"

namespace toylm {

// CSV with a leading format tag line, a header line, then rows; floats are
// rendered with %.17g so identical runs produce byte-identical files.
class MetricsCsv {
 public:
  MetricsCsv() = default;
  MetricsCsv(const std::string& path, std::span<const std::string> columns);
  void row(std::span<const double> values);
  const std::string& path() const { return path_; }
  bool open() const { return out_.is_open(); }

 private:
  std::string path_;
  size_t n_cols_ = 0;
  std::ofstream out_;
};

struct PretrainConfig {
  size_t steps = 2000;
  size_t seq_len = 64;
  double lr = 3e-3;
  size_t warmup = 100;
  double beta2 = 0.99;
  size_t smooth_window = 100;
  uint64_t seed = 0;
};

struct PretrainResult {
  double final_loss = 0.0;
  double smoothed_loss = 0.0;  // trailing mean over smooth_window steps
  size_t steps = 0;
};

// Minimizes main cross-entropy + MTP + balance losses over random corpus
// windows. Writes one CSV row per step (columns: step, loss, loss_main,
// loss_mtp_k*, loss_balance, loss_smoothed, lr). On divergence saves a
// diagnostic checkpoint next to the CSV and rethrows.
PretrainResult pretrain(ToyModel& model, const Corpus& corpus,
                        const PretrainConfig& cfg,
                        const std::string& metrics_path);

struct SftExample {
  std::string prompt;
  std::string completion;
};

struct SftConfig {
  size_t steps = 500;
  double lr = 1e-3;
  size_t warmup = 20;
  double beta2 = 0.99;
  uint64_t seed = 0;
};

// Supervised fine-tuning: cross-entropy over completion tokens only.
double sft_train(ToyModel& model, const Tokenizer& tok,
                 std::span<const SftExample> examples, const SftConfig& cfg,
                 const std::string& metrics_path);

}  // namespace toylm
