#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "toylm/rng.hpp"
#include "toylm/tensor.hpp"

namespace toylm {

enum class RoutingMode { aux_loss, loss_free };

// Fine-grained mixture layer: N conventional experts segmented by m, K
// conventionally activated, K_s of the mN slots reserved as shared experts.
// ffn_inner is the inner dim of one *conventional* expert; each segmented
// expert uses ffn_inner/m, which keeps total and activated expert parameters
// invariant in m.
struct MoeLayerConfig {
  size_t d = 64;
  size_t N = 4;
  size_t m = 1;
  size_t K = 2;
  size_t K_s = 0;
  size_t ffn_inner = 128;
  double alpha = 0.01;   // balance-loss weight
  double gamma = 0.001;  // bias step
  RoutingMode routing = RoutingMode::aux_loss;

  size_t total_experts() const { return m * N; }
  size_t routed_experts() const { return m * N - K_s; }     // N_r
  size_t active_routed() const { return m * K - K_s; }      // K_r
  size_t expert_inner() const { return ffn_inner / m; }
  size_t params_per_expert() const { return 2 * d * expert_inner(); }
  // FFN weights only; router centroids and biases are not expert parameters.
  size_t total_expert_params() const {
    return total_experts() * params_per_expert();
  }
  size_t activated_expert_params() const {
    return (K_s + active_routed()) * params_per_expert();
  }
  void validate() const;
};

// Router side of one layer: centroids are trainable, biases steer Top-K
// selection in loss_free mode only, and the f/P counters accumulate over one
// optimizer batch.
struct RouterState {
  Tensor centroids;                   // [N_r × d]
  std::vector<double> bias;           // per routed expert; all 0 in aux_loss
  std::vector<uint64_t> load;         // selections in the current window
  std::vector<double> affinity_sum;   // Σ_t s_{i,t} in the current window
  uint64_t window_tokens = 0;

  static RouterState init(const MoeLayerConfig& cfg, Rng rng,
                          DType dt = DType::f64, double init_std = 0.02);
  void reset_window();
};

struct RouteResult {
  std::vector<size_t> selected;       // K_r routed expert indices, ascending
  std::vector<double> gates;          // dense over routed experts; s_i or 0
  std::vector<double> affinities;     // softmax affinities s_i
};

// Softmax affinities over routed experts, Top-K_r selection. In loss_free
// mode selection ranks s_i + b_i but gates keep the original s_i. Ties break
// toward the lowest expert index. Does not touch the window counters.
RouteResult route(std::span<const double> u, const RouterState& state,
                  const MoeLayerConfig& cfg);

// Top-K of score with lowest-index tie-break; returned ascending.
std::vector<size_t> top_k_indices(std::span<const double> score, size_t k);

// α·Σ f_i·P_i.
double balance_loss(std::span<const double> f, std::span<const double> P,
                    double alpha);
// Same from raw window counters: f_i = N'/(K'·T)·count_i, P_i = affinity_sum_i/T.
double balance_loss_from_window(std::span<const uint64_t> counts,
                                std::span<const double> affinity_sums,
                                uint64_t tokens, size_t k_prime, double alpha);

// b_i -= γ for loads above the batch mean, += γ below, unchanged at the mean.
void bias_update(RouterState& state, std::span<const uint64_t> loads,
                 double gamma);

// Two-layer expert with a smooth elementwise nonlinearity: w2·silu(w1·x).
struct ExpertFfn {
  Tensor w1;  // [inner × d]
  Tensor w2;  // [d × inner]

  static ExpertFfn init(size_t d, size_t inner, Rng rng, DType dt,
                        double init_std, bool zero_w2);
  Tensor forward(const Tensor& rows) const;
  std::vector<double> forward_plain(std::span<const double> x) const;
};

struct MoeForwardOut {
  Tensor h;         // [T × d]
  Tensor aux_loss;  // scalar; 0 unless routing == aux_loss
};

// One full mixture layer with K_s shared and N_r routed experts.
class MoeLayer {
 public:
  MoeLayer(MoeLayerConfig cfg, Rng rng, DType dt = DType::f64,
           double init_std = 0.02, bool zero_w2 = true);

  // h_t = Σ_shared FFN_i(u_t) + Σ_selected s_i·FFN_i(u_t) + u_t per token.
  // Window counters (loads, affinity sums) accumulate across calls until
  // end_batch()/reset.
  MoeForwardOut forward(const Tensor& u);
  std::vector<double> forward_infer(std::span<const double> u_row);

  // loss_free: apply the bias update from the window loads; both modes then
  // reset the window.
  void end_batch();

  const MoeLayerConfig& config() const { return cfg_; }
  RouterState& router() { return router_; }
  const RouterState& router() const { return router_; }
  std::vector<std::pair<std::string, Tensor>> named(
      const std::string& prefix) const;

 private:
  MoeLayerConfig cfg_;
  std::vector<ExpertFfn> shared_;
  std::vector<ExpertFfn> routed_;
  RouterState router_;
};

}  // namespace toylm
