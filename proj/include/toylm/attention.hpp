#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "toylm/rng.hpp"
#include "toylm/tensor.hpp"

namespace toylm {

enum class AttentionVariant { mha, mla };

struct AttentionConfig {
  size_t d = 64;      // embedding dim
  size_t n_h = 4;     // heads
  size_t d_h = 16;    // per-head dim
  size_t d_c = 64;    // KV latent dim
  size_t d_c_q = 32;  // query latent dim
  size_t d_h_r = 8;   // decoupled rotary per-head dim (0 disables the path)
  size_t l = 2;       // layer count, used for cache accounting only
  double rope_base = 10000.0;

  size_t qk_head_dim() const { return d_h + d_h_r; }
  void validate(AttentionVariant variant) const;
};

struct MhaWeights {
  Tensor w_q, w_k, w_v;  // [d_h·n_h × d]
  Tensor w_o;            // [d × d_h·n_h]

  static MhaWeights init(const AttentionConfig& cfg, Rng rng,
                         DType dt = DType::f64, double init_std = 0.02,
                         bool zero_out_proj = false);
  std::vector<std::pair<std::string, Tensor>> named(
      const std::string& prefix) const;
};

struct MlaWeights {
  Tensor w_dkv;  // [d_c × d]
  Tensor w_uk;   // [d_h·n_h × d_c]
  Tensor w_uv;   // [d_h·n_h × d_c]
  Tensor w_dq;   // [d_c_q × d]
  Tensor w_uq;   // [d_h·n_h × d_c_q]
  Tensor w_qr;   // [d_h_r·n_h × d_c_q], undefined when d_h_r == 0
  Tensor w_kr;   // [d_h_r × d], undefined when d_h_r == 0
  Tensor w_o;    // [d × d_h·n_h]

  static MlaWeights init(const AttentionConfig& cfg, Rng rng,
                         DType dt = DType::f64, double init_std = 0.02,
                         bool zero_out_proj = false);
  std::vector<std::pair<std::string, Tensor>> named(
      const std::string& prefix) const;
};

// Per-token compressed cache for one decoding stream of one layer: the
// latent c^KV and the shared rotary key k^R. Stored scalars per token are
// exactly d_c + d_h_r. Reads go through fetch(), which counts every cached
// scalar touched so tests can assert the per-step cache traffic.
class LatentKVCache {
 public:
  LatentKVCache(size_t d_c, size_t d_h_r) : d_c_(d_c), d_h_r_(d_h_r) {}

  void append(std::span<const double> c_kv, std::span<const double> k_r);
  void fetch(size_t token, std::span<double> c_kv_out,
             std::span<double> k_r_out) const;

  size_t tokens() const { return tokens_; }
  size_t scalars_per_token() const { return d_c_ + d_h_r_; }
  size_t stored_scalars() const { return tokens_ * scalars_per_token(); }
  uint64_t latent_reads() const { return latent_reads_; }
  void reset_read_counter() { latent_reads_ = 0; }

 private:
  size_t d_c_, d_h_r_;
  size_t tokens_ = 0;
  std::vector<double> c_kv_;  // token-major
  std::vector<double> k_r_;
  mutable uint64_t latent_reads_ = 0;
};

// Full keys/values per token; the baseline cache MLA is measured against.
struct MhaKVCache {
  size_t dim = 0;  // d_h·n_h
  std::vector<double> k, v;
  size_t tokens = 0;

  void append(std::span<const double> kt, std::span<const double> vt);
};

// Standard causal multi-head attention over a whole sequence, Rotary position
// embedding on full q/k when rope is set.
Tensor mha_forward(const Tensor& h, const MhaWeights& w,
                   const AttentionConfig& cfg, bool rope = true);

// Training path of latent attention: compressed KV latent, low-rank queries,
// decoupled rotary path, softmax scaled by 1/sqrt(d_h + d_h_r). When `cache`
// is given, appends one (c^KV, k^R) entry per token.
Tensor mla_forward_train(const Tensor& h, const MlaWeights& w,
                         const AttentionConfig& cfg,
                         LatentKVCache* cache = nullptr);

// Incremental decode for one new token. Evaluates the same output as the
// training path without materializing per-token keys or values: the
// compressed-path logit is reassociated as (W^UQ c^Q)ᵀ W^UK c^KV so only
// d_c-dimensional latents are touched per cached token, and the value
// contribution goes through W^O·W^UV after attention-weighting the latents.
// Appends this token's cache entry before attending (a first token attends
// to itself).
std::vector<double> mla_forward_infer(std::span<const double> h_token,
                                      const MlaWeights& w,
                                      const AttentionConfig& cfg,
                                      LatentKVCache& cache);

// Incremental decode for the MHA baseline.
std::vector<double> mha_forward_infer(std::span<const double> h_token,
                                      const MhaWeights& w,
                                      const AttentionConfig& cfg,
                                      MhaKVCache& cache, bool rope = true);

// Cached scalars per token across all l layers:
//   mha: 2·n_h·d_h·l      mla: (d_c + d_h^R)·l
size_t kv_cache_size(const AttentionConfig& cfg, AttentionVariant variant);

}  // namespace toylm
