#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "toylm/attention.hpp"
#include "toylm/moe.hpp"
#include "toylm/mtp.hpp"
#include "toylm/rng.hpp"
#include "toylm/tensor.hpp"

namespace toylm {

enum class FfnVariant { dense, moe };

struct ModelConfig {
  size_t vocab = 0;
  AttentionVariant attention = AttentionVariant::mla;
  FfnVariant ffn = FfnVariant::dense;
  AttentionConfig attn;    // attn.l is the block count
  size_t ffn_inner = 128;  // dense-FFN inner dim
  MoeLayerConfig moe;      // used when ffn == moe; moe.d must equal attn.d
  MtpConfig mtp;
  bool tie_head = false;
  bool mha_rope = true;
  DType dtype = DType::f64;
  double init_std = 0.02;
  double rms_eps = 1e-6;

  size_t layers() const { return attn.l; }
  void validate() const;
  size_t analytic_param_count() const;
};

struct LmLossOut {
  Tensor total;  // main CE + MTP + balance losses
  double main = 0.0;
  std::vector<double> mtp_per_depth;
  double balance = 0.0;
};

// Character-level toy language model hosting the attention, mixture and
// multi-token-prediction mechanisms. One instance is single-writer; clone()
// gives an independent deep copy (same config, copied parameter values).
class ToyModel {
 public:
  ToyModel(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // --- training graph -------------------------------------------------------
  struct BodyOut {
    Tensor hidden;    // [T × d], final-normed
    Tensor aux_loss;  // summed balance losses (scalar)
  };
  BodyOut body_forward(std::span<const int> tokens);
  Tensor logits_from_hidden(const Tensor& hidden) const;

  // Per-depth MTP logits at source positions 0..T-1. tokens must extend at
  // least T + D entries (embedding inputs for the deepest module). Balance
  // losses of MTP mixture sublayers accumulate into *aux_out when given.
  std::vector<Tensor> mtp_forward(const Tensor& main_hidden,
                                  std::span<const int> tokens,
                                  Tensor* aux_out = nullptr);

  // Window layout: tokens has T + 1 + D entries; the main loss covers the
  // first T positions, MTP depths consume the tail.
  LmLossOut sequence_loss(std::span<const int> tokens);

  // Differentiable log-probabilities of tokens[pos] for pos in [from, to)
  // given the preceding context; 1-D tensor of length to-from.
  Tensor token_logprobs(std::span<const int> tokens, size_t from, size_t to);

  // --- inference (plain doubles, no tape) ------------------------------------
  struct LayerCache {
    std::optional<LatentKVCache> mla;
    std::optional<MhaKVCache> mha;
  };
  struct DecodeState {
    std::vector<LayerCache> layers;
    size_t tokens = 0;
  };
  DecodeState new_decode_state() const;
  // Appends one token and returns the next-token logits [V].
  std::vector<double> decode_step(DecodeState& state, int token) const;

  struct Sampled {
    std::vector<int> tokens;
    std::vector<double> logprobs;  // under the sampling-time parameters
  };
  Sampled sample_completion(std::span<const int> prompt, size_t max_new,
                            int stop_token, Rng& rng) const;
  std::vector<int> greedy_completion(std::span<const int> prompt,
                                     size_t max_new, int stop_token) const;
  std::vector<double> completion_logprobs_plain(std::span<const int> prompt,
                                                std::span<const int> output)
      const;

  // --- parameters & persistence ----------------------------------------------
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  size_t param_count() const;
  void copy_values_from(const ToyModel& other);
  std::unique_ptr<ToyModel> clone() const;

  // loss_free bias updates + window resets on every mixture layer
  void end_batch();
  std::vector<MoeLayer*> moe_layers();

  const Tensor& embedding() const { return embedding_; }
  const Tensor& output_head() const { return head_; }

 private:
  struct Block {
    Tensor attn_gain;  // rms gain before attention
    std::optional<MhaWeights> mha;
    std::optional<MlaWeights> mla;
    std::optional<ExpertFfn> dense;
    std::optional<MoeLayer> moe;
  };
  struct MtpDepthModule {
    Tensor projection;  // [d × 2d]
    Block block;
    Tensor final_gain;
  };

  Block make_block(const std::string& name, Rng rng);
  Tensor block_forward(Block& b, const Tensor& x, Tensor& aux_acc);
  std::vector<double> block_infer(const Block& b, LayerCache& cache,
                                  std::span<const double> x) const;
  void collect_block_params(const std::string& prefix, const Block& b,
                            std::vector<std::pair<std::string, Tensor>>& out)
      const;

  ModelConfig cfg_;
  uint64_t seed_;
  Tensor embedding_;  // [V × d]
  std::vector<Block> blocks_;
  Tensor final_gain_;
  Tensor head_;  // [V × d]; aliases embedding_ when tied
  std::vector<MtpDepthModule> mtp_;
};

}  // namespace toylm
