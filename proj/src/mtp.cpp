#include "toylm/mtp.hpp"

namespace toylm {

MtpLossOut mtp_loss(std::span<const Tensor> depth_logits,
                    std::span<const int> tokens, const MtpConfig& cfg) {
  cfg.validate();
  MtpLossOut out;
  if (cfg.D == 0 || cfg.lambda == 0.0) {
    out.total = Tensor::scalar(0.0);
    out.per_depth.assign(depth_logits.size(), 0.0);
    return out;
  }
  if (depth_logits.size() != cfg.D)
    throw ContractError("mtp_loss: expected " + std::to_string(cfg.D) +
                        " depth logit tensors, got " +
                        std::to_string(depth_logits.size()));

  const size_t T = depth_logits[0].rows();
  if (tokens.size() < T + cfg.D + 1)
    throw ContractError("mtp_loss: token window of " +
                        std::to_string(tokens.size()) +
                        " too short for T=" + std::to_string(T) +
                        ", D=" + std::to_string(cfg.D));

  Tensor acc;
  for (size_t k = 1; k <= cfg.D; ++k) {
    const Tensor& logits = depth_logits[k - 1];
    for (const double v : logits.values())
      if (!std::isfinite(v)) throw NumericError("mtp_loss: non-finite logits");
    if (logits.rows() != T)
      throw ContractError("mtp_loss: depth logits row counts differ");
    if (T < k + 1)
      throw ContractError("mtp_loss: sequence length T=" + std::to_string(T) +
                          " too small for depth " + std::to_string(k));
    // source positions 0..T-k-1 (0-based) predict tokens[j+k+1]
    const size_t n_terms = T - k;
    Tensor lp = log_softmax_rows(slice_rows(logits, 0, n_terms));
    std::vector<int> targets(n_terms);
    for (size_t j = 0; j < n_terms; ++j) targets[j] = tokens[j + k + 1];
    Tensor picked = gather_cols(lp, targets);
    // literal normalizer: 1/T even though only T−k terms exist
    Tensor l_k = scale(sum(picked), -1.0 / static_cast<double>(T));
    out.per_depth.push_back(l_k.scalar_value());
    acc = acc.defined() ? add(acc, l_k) : l_k;
  }
  out.total = scale(acc, cfg.lambda / static_cast<double>(cfg.D));
  return out;
}

}  // namespace toylm
