#pragma once

#include <span>
#include <vector>

#include "toylm/tensor.hpp"

namespace toylm {

// Multi-token prediction settings. D = 0 disables the module chain entirely.
struct MtpConfig {
  size_t D = 0;
  double lambda = 0.3;
  size_t d = 0;           // model dim (for module construction)
  size_t vocab_size = 0;

  void validate() const {
    if (lambda < 0) throw ContractError("mtp config: lambda must be >= 0");
  }
};

struct MtpLossOut {
  Tensor total;                   // (λ/D)·Σ_k L^k, scalar; 0 when D=0 or λ=0
  std::vector<double> per_depth;  // L^k values for metrics
};

// Cross-entropy over the literal index range of the training objective:
// depth k sums target positions 2+k..T+1 (1-based) but still divides by T,
// so L^k has T−k terms and a 1/T normalizer.
//
// depth_logits[k-1] holds raw logits [T × V] at source positions 1..T;
// the row at source position j predicts token t_{j+k+1}. tokens must have at
// least T+D+1 entries.
MtpLossOut mtp_loss(std::span<const Tensor> depth_logits,
                    std::span<const int> tokens, const MtpConfig& cfg);

}  // namespace toylm
