#include "toylm/attention.hpp"

#include <cmath>

namespace toylm {

namespace {

// plain double helpers for the inference path
std::vector<double> matvec(std::span<const double> w, size_t out_dim,
                           size_t in_dim, std::span<const double> x) {
  std::vector<double> y(out_dim, 0.0);
  for (size_t i = 0; i < out_dim; ++i) {
    double s = 0.0;
    for (size_t j = 0; j < in_dim; ++j) s += w[i * in_dim + j] * x[j];
    y[i] = s;
  }
  return y;
}

void rope_inplace(std::span<double> x, size_t head_dim, size_t pos,
                  double base) {
  const size_t pairs = head_dim / 2;
  for (size_t h = 0; h < x.size() / head_dim; ++h)
    for (size_t i = 0; i < pairs; ++i) {
      const double f = std::pow(base, -2.0 * static_cast<double>(i) /
                                          static_cast<double>(head_dim));
      const double a = static_cast<double>(pos) * f;
      const double c = std::cos(a), s = std::sin(a);
      const size_t k = h * head_dim + 2 * i;
      const double x0 = x[k], x1 = x[k + 1];
      x[k] = c * x0 - s * x1;
      x[k + 1] = s * x0 + c * x1;
    }
}

void softmax_inplace(std::span<double> v) {
  double mx = v[0];
  for (const double x : v) mx = std::max(mx, x);
  double denom = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    denom += x;
  }
  for (double& x : v) x /= denom;
}

}  // namespace

void AttentionConfig::validate(AttentionVariant variant) const {
  if (d == 0 || n_h == 0 || d_h == 0 || l == 0)
    throw ContractError("attention config: d, n_h, d_h, l must be positive");
  if (variant == AttentionVariant::mha) {
    if (d_h % 2 != 0)
      throw ContractError("attention config: rotary needs even d_h");
    return;
  }
  if (d_c == 0 || d_c_q == 0)
    throw ContractError("attention config: latent dims must be positive");
  if (d_c >= d_h * n_h)
    throw ContractError("attention config: d_c must be < d_h*n_h (" +
                        std::to_string(d_c) + " vs " +
                        std::to_string(d_h * n_h) + ")");
  if (d_c_q >= d_h * n_h)
    throw ContractError("attention config: d_c_q must be < d_h*n_h");
  if (d_h_r % 2 != 0)
    throw ContractError("attention config: d_h_r must be even");
}

MhaWeights MhaWeights::init(const AttentionConfig& cfg, Rng rng, DType dt,
                            double init_std, bool zero_out_proj) {
  const size_t dm = cfg.d_h * cfg.n_h;
  MhaWeights w;
  auto draw = [&](const char* name, Shape shape) {
    Rng r = rng.fork(std::string("param/") + name);
    return Tensor::randn(std::move(shape), r, init_std, dt)
        .set_requires_grad(true);
  };
  w.w_q = draw("w_q", {dm, cfg.d});
  w.w_k = draw("w_k", {dm, cfg.d});
  w.w_v = draw("w_v", {dm, cfg.d});
  w.w_o = zero_out_proj
              ? Tensor::zeros({cfg.d, dm}, dt).set_requires_grad(true)
              : draw("w_o", {cfg.d, dm});
  return w;
}

std::vector<std::pair<std::string, Tensor>> MhaWeights::named(
    const std::string& prefix) const {
  return {{prefix + "w_q", w_q},
          {prefix + "w_k", w_k},
          {prefix + "w_v", w_v},
          {prefix + "w_o", w_o}};
}

MlaWeights MlaWeights::init(const AttentionConfig& cfg, Rng rng, DType dt,
                            double init_std, bool zero_out_proj) {
  const size_t dm = cfg.d_h * cfg.n_h;
  MlaWeights w;
  auto draw = [&](const char* name, Shape shape) {
    Rng r = rng.fork(std::string("param/") + name);
    return Tensor::randn(std::move(shape), r, init_std, dt)
        .set_requires_grad(true);
  };
  w.w_dkv = draw("w_dkv", {cfg.d_c, cfg.d});
  w.w_uk = draw("w_uk", {dm, cfg.d_c});
  w.w_uv = draw("w_uv", {dm, cfg.d_c});
  w.w_dq = draw("w_dq", {cfg.d_c_q, cfg.d});
  w.w_uq = draw("w_uq", {dm, cfg.d_c_q});
  if (cfg.d_h_r > 0) {
    w.w_qr = draw("w_qr", {cfg.d_h_r * cfg.n_h, cfg.d_c_q});
    w.w_kr = draw("w_kr", {cfg.d_h_r, cfg.d});
  }
  w.w_o = zero_out_proj
              ? Tensor::zeros({cfg.d, dm}, dt).set_requires_grad(true)
              : draw("w_o", {cfg.d, dm});
  return w;
}

std::vector<std::pair<std::string, Tensor>> MlaWeights::named(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out = {
      {prefix + "w_dkv", w_dkv}, {prefix + "w_uk", w_uk},
      {prefix + "w_uv", w_uv},   {prefix + "w_dq", w_dq},
      {prefix + "w_uq", w_uq},   {prefix + "w_o", w_o}};
  if (w_qr.defined()) {
    out.insert(out.begin() + 5, {prefix + "w_qr", w_qr});
    out.insert(out.begin() + 6, {prefix + "w_kr", w_kr});
  }
  return out;
}

void LatentKVCache::append(std::span<const double> c_kv,
                           std::span<const double> k_r) {
  if (c_kv.size() != d_c_ || k_r.size() != d_h_r_)
    throw DimensionError("LatentKVCache::append: entry sizes " +
                         std::to_string(c_kv.size()) + "/" +
                         std::to_string(k_r.size()) + " do not match d_c=" +
                         std::to_string(d_c_) + ", d_h_r=" +
                         std::to_string(d_h_r_));
  c_kv_.insert(c_kv_.end(), c_kv.begin(), c_kv.end());
  k_r_.insert(k_r_.end(), k_r.begin(), k_r.end());
  ++tokens_;
}

void LatentKVCache::fetch(size_t token, std::span<double> c_kv_out,
                          std::span<double> k_r_out) const {
  if (token >= tokens_) throw ContractError("LatentKVCache::fetch: no entry");
  for (size_t i = 0; i < d_c_; ++i) c_kv_out[i] = c_kv_[token * d_c_ + i];
  for (size_t i = 0; i < d_h_r_; ++i) k_r_out[i] = k_r_[token * d_h_r_ + i];
  latent_reads_ += d_c_ + d_h_r_;
}

void MhaKVCache::append(std::span<const double> kt,
                        std::span<const double> vt) {
  if (dim == 0) dim = kt.size();
  if (kt.size() != dim || vt.size() != dim)
    throw DimensionError("MhaKVCache::append: entry size mismatch");
  k.insert(k.end(), kt.begin(), kt.end());
  v.insert(v.end(), vt.begin(), vt.end());
  ++tokens;
}

Tensor mha_forward(const Tensor& h, const MhaWeights& w,
                   const AttentionConfig& cfg, bool rope) {
  cfg.validate(AttentionVariant::mha);
  if (h.ndim() != 2 || h.cols() != cfg.d)
    throw DimensionError("mha_forward: input " + shape_str(h.shape()) +
                         " does not match d=" + std::to_string(cfg.d));
  Tensor q = matmul_nt(h, w.w_q);  // [T × d_h·n_h]
  Tensor k = matmul_nt(h, w.w_k);
  Tensor v = matmul_nt(h, w.w_v);
  if (rope) {
    q = rope_rows(q, cfg.d_h, 0, cfg.rope_base);
    k = rope_rows(k, cfg.d_h, 0, cfg.rope_base);
  }
  const double sc = 1.0 / std::sqrt(static_cast<double>(cfg.d_h));
  std::vector<Tensor> heads;
  heads.reserve(cfg.n_h);
  for (size_t i = 0; i < cfg.n_h; ++i) {
    Tensor qi = slice_cols(q, i * cfg.d_h, (i + 1) * cfg.d_h);
    Tensor ki = slice_cols(k, i * cfg.d_h, (i + 1) * cfg.d_h);
    Tensor vi = slice_cols(v, i * cfg.d_h, (i + 1) * cfg.d_h);
    Tensor att = softmax_rows(matmul_nt(qi, ki), sc, /*causal=*/true);
    heads.push_back(matmul(att, vi));
  }
  Tensor o = heads[0];
  for (size_t i = 1; i < heads.size(); ++i) o = concat_cols(o, heads[i]);
  return matmul_nt(o, w.w_o);
}

Tensor mla_forward_train(const Tensor& h, const MlaWeights& w,
                         const AttentionConfig& cfg, LatentKVCache* cache) {
  cfg.validate(AttentionVariant::mla);
  if (h.ndim() != 2 || h.cols() != cfg.d)
    throw DimensionError("mla_forward_train: input " + shape_str(h.shape()) +
                         " does not match d=" + std::to_string(cfg.d));
  const size_t T = h.rows();

  Tensor c_kv = matmul_nt(h, w.w_dkv);   // [T × d_c]
  Tensor k_c = matmul_nt(c_kv, w.w_uk);  // [T × d_h·n_h]
  Tensor v_c = matmul_nt(c_kv, w.w_uv);
  Tensor c_q = matmul_nt(h, w.w_dq);     // [T × d_c_q]
  Tensor q_c = matmul_nt(c_q, w.w_uq);

  Tensor q_r, k_r;
  if (cfg.d_h_r > 0) {
    q_r = rope_rows(matmul_nt(c_q, w.w_qr), cfg.d_h_r, 0, cfg.rope_base);
    k_r = rope_rows(matmul_nt(h, w.w_kr), cfg.d_h_r, 0, cfg.rope_base);
  }

  const double sc = 1.0 / std::sqrt(static_cast<double>(cfg.qk_head_dim()));
  std::vector<Tensor> heads;
  heads.reserve(cfg.n_h);
  for (size_t i = 0; i < cfg.n_h; ++i) {
    Tensor qi = slice_cols(q_c, i * cfg.d_h, (i + 1) * cfg.d_h);
    Tensor ki = slice_cols(k_c, i * cfg.d_h, (i + 1) * cfg.d_h);
    if (cfg.d_h_r > 0) {
      qi = concat_cols(qi, slice_cols(q_r, i * cfg.d_h_r, (i + 1) * cfg.d_h_r));
      ki = concat_cols(ki, k_r);  // shared decoupled key
    }
    Tensor att = softmax_rows(matmul_nt(qi, ki), sc, /*causal=*/true);
    heads.push_back(matmul(att, slice_cols(v_c, i * cfg.d_h, (i + 1) * cfg.d_h)));
  }
  Tensor o = heads[0];
  for (size_t i = 1; i < heads.size(); ++i) o = concat_cols(o, heads[i]);
  Tensor u = matmul_nt(o, w.w_o);

  if (cache) {
    const auto ckv = c_kv.values();
    for (size_t t = 0; t < T; ++t) {
      std::span<const double> row_ckv{ckv.data() + t * cfg.d_c, cfg.d_c};
      if (cfg.d_h_r > 0) {
        const auto kr = k_r.values();
        cache->append(row_ckv, {kr.data() + t * cfg.d_h_r, cfg.d_h_r});
      } else {
        cache->append(row_ckv, {});
      }
    }
  }
  return u;
}

std::vector<double> mla_forward_infer(std::span<const double> h_token,
                                      const MlaWeights& w,
                                      const AttentionConfig& cfg,
                                      LatentKVCache& cache) {
  cfg.validate(AttentionVariant::mla);
  if (h_token.size() != cfg.d)
    throw DimensionError("mla_forward_infer: token dim " +
                         std::to_string(h_token.size()) + " != d=" +
                         std::to_string(cfg.d));
  const size_t dm = cfg.d_h * cfg.n_h;
  const size_t pos = cache.tokens();

  // this token's cache entry
  std::vector<double> c_kv_t =
      matvec(w.w_dkv.values(), cfg.d_c, cfg.d, h_token);
  std::vector<double> k_r_t;
  if (cfg.d_h_r > 0) {
    k_r_t = matvec(w.w_kr.values(), cfg.d_h_r, cfg.d, h_token);
    rope_inplace(k_r_t, cfg.d_h_r, pos, cfg.rope_base);
  }
  cache.append(c_kv_t, k_r_t);

  // query path
  std::vector<double> c_q = matvec(w.w_dq.values(), cfg.d_c_q, cfg.d, h_token);
  std::vector<double> q_c = matvec(w.w_uq.values(), dm, cfg.d_c_q, c_q);
  std::vector<double> q_r;
  if (cfg.d_h_r > 0) {
    q_r = matvec(w.w_qr.values(), cfg.d_h_r * cfg.n_h, cfg.d_c_q, c_q);
    rope_inplace(q_r, cfg.d_h_r, pos, cfg.rope_base);
  }

  // absorbed queries: a_i = (W^UK restricted to head i)ᵀ · q_c_i, one d_c
  // vector per head, so cached-token work never touches d_h·n_h.
  const auto uk = w.w_uk.values();
  std::vector<double> absorbed(cfg.n_h * cfg.d_c, 0.0);
  for (size_t i = 0; i < cfg.n_h; ++i)
    for (size_t r = 0; r < cfg.d_h; ++r) {
      const double qv = q_c[i * cfg.d_h + r];
      if (qv == 0.0) continue;
      const size_t wrow = (i * cfg.d_h + r) * cfg.d_c;
      for (size_t c = 0; c < cfg.d_c; ++c)
        absorbed[i * cfg.d_c + c] += qv * uk[wrow + c];
    }

  // one fetch per cached token; rows stay in step-local buffers
  const size_t n_tok = cache.tokens();
  std::vector<double> latents(n_tok * cfg.d_c);
  std::vector<double> rot_keys(n_tok * std::max<size_t>(cfg.d_h_r, 1));
  for (size_t j = 0; j < n_tok; ++j)
    cache.fetch(j, {latents.data() + j * cfg.d_c, cfg.d_c},
                {rot_keys.data() + j * cfg.d_h_r, cfg.d_h_r});

  const double sc = 1.0 / std::sqrt(static_cast<double>(cfg.qk_head_dim()));
  std::vector<double> weights(cfg.n_h * n_tok);
  for (size_t i = 0; i < cfg.n_h; ++i) {
    for (size_t j = 0; j < n_tok; ++j) {
      double logit = 0.0;
      for (size_t c = 0; c < cfg.d_c; ++c)
        logit += absorbed[i * cfg.d_c + c] * latents[j * cfg.d_c + c];
      for (size_t c = 0; c < cfg.d_h_r; ++c)
        logit += q_r[i * cfg.d_h_r + c] * rot_keys[j * cfg.d_h_r + c];
      weights[i * n_tok + j] = sc * logit;
    }
    softmax_inplace({weights.data() + i * n_tok, n_tok});
  }

  // value path: attention-weight the latents, then W^UV per head, then W^O
  const auto uv = w.w_uv.values();
  std::vector<double> o(dm, 0.0);
  std::vector<double> mix(cfg.d_c);
  for (size_t i = 0; i < cfg.n_h; ++i) {
    std::fill(mix.begin(), mix.end(), 0.0);
    for (size_t j = 0; j < n_tok; ++j) {
      const double wj = weights[i * n_tok + j];
      for (size_t c = 0; c < cfg.d_c; ++c)
        mix[c] += wj * latents[j * cfg.d_c + c];
    }
    for (size_t r = 0; r < cfg.d_h; ++r) {
      double s = 0.0;
      const size_t wrow = (i * cfg.d_h + r) * cfg.d_c;
      for (size_t c = 0; c < cfg.d_c; ++c) s += uv[wrow + c] * mix[c];
      o[i * cfg.d_h + r] = s;
    }
  }
  return matvec(w.w_o.values(), cfg.d, dm, o);
}

std::vector<double> mha_forward_infer(std::span<const double> h_token,
                                      const MhaWeights& w,
                                      const AttentionConfig& cfg,
                                      MhaKVCache& cache, bool rope) {
  cfg.validate(AttentionVariant::mha);
  const size_t dm = cfg.d_h * cfg.n_h;
  const size_t pos = cache.tokens;
  std::vector<double> q = matvec(w.w_q.values(), dm, cfg.d, h_token);
  std::vector<double> k = matvec(w.w_k.values(), dm, cfg.d, h_token);
  std::vector<double> v = matvec(w.w_v.values(), dm, cfg.d, h_token);
  if (rope) {
    rope_inplace(q, cfg.d_h, pos, cfg.rope_base);
    rope_inplace(k, cfg.d_h, pos, cfg.rope_base);
  }
  cache.append(k, v);

  const double sc = 1.0 / std::sqrt(static_cast<double>(cfg.d_h));
  const size_t n_tok = cache.tokens;
  std::vector<double> o(dm, 0.0);
  std::vector<double> logits(n_tok);
  for (size_t i = 0; i < cfg.n_h; ++i) {
    for (size_t j = 0; j < n_tok; ++j) {
      double s = 0.0;
      for (size_t c = 0; c < cfg.d_h; ++c)
        s += q[i * cfg.d_h + c] * cache.k[j * dm + i * cfg.d_h + c];
      logits[j] = sc * s;
    }
    softmax_inplace(logits);
    for (size_t j = 0; j < n_tok; ++j)
      for (size_t c = 0; c < cfg.d_h; ++c)
        o[i * cfg.d_h + c] += logits[j] * cache.v[j * dm + i * cfg.d_h + c];
  }
  return matvec(w.w_o.values(), cfg.d, dm, o);
}

size_t kv_cache_size(const AttentionConfig& cfg, AttentionVariant variant) {
  if (variant == AttentionVariant::mha) return 2 * cfg.n_h * cfg.d_h * cfg.l;
  return (cfg.d_c + cfg.d_h_r) * cfg.l;
}

}  // namespace toylm
