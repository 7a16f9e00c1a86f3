#include "toylm/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace toylm {

void MoeLayerConfig::validate() const {
  if (d == 0 || N == 0 || m == 0 || K == 0)
    throw ContractError("moe config: d, N, m, K must be positive");
  if (K > N) throw ContractError("moe config: K must be <= N");
  if (ffn_inner % m != 0)
    throw ContractError("moe config: m=" + std::to_string(m) +
                        " does not divide ffn_inner=" +
                        std::to_string(ffn_inner));
  if (K_s >= m * K)
    throw ContractError("moe config: need K_r = mK - K_s >= 1, got K_s=" +
                        std::to_string(K_s) + " with mK=" +
                        std::to_string(m * K));
  if (active_routed() > routed_experts())
    throw ContractError("moe config: K_r=" + std::to_string(active_routed()) +
                        " exceeds routed expert count N_r=" +
                        std::to_string(routed_experts()));
  if (gamma < 0) throw ContractError("moe config: gamma must be >= 0");
}

RouterState RouterState::init(const MoeLayerConfig& cfg, Rng rng, DType dt,
                              double init_std) {
  RouterState s;
  Rng r = rng.fork("param/centroids");
  s.centroids = Tensor::randn({cfg.routed_experts(), cfg.d}, r, init_std, dt)
                    .set_requires_grad(true);
  s.bias.assign(cfg.routed_experts(), 0.0);
  s.load.assign(cfg.routed_experts(), 0);
  s.affinity_sum.assign(cfg.routed_experts(), 0.0);
  return s;
}

void RouterState::reset_window() {
  std::fill(load.begin(), load.end(), uint64_t{0});
  std::fill(affinity_sum.begin(), affinity_sum.end(), 0.0);
  window_tokens = 0;
}

std::vector<size_t> top_k_indices(std::span<const double> score, size_t k) {
  std::vector<size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    return score[a] > score[b];  // stable keeps the lowest index on ties
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

RouteResult route(std::span<const double> u, const RouterState& state,
                  const MoeLayerConfig& cfg) {
  cfg.validate();
  const size_t n_r = cfg.routed_experts();
  const size_t k_r = cfg.active_routed();
  if (u.size() != cfg.d)
    throw DimensionError("route: token dim " + std::to_string(u.size()) +
                         " != d=" + std::to_string(cfg.d));

  RouteResult out;
  out.affinities.resize(n_r);
  const auto cen = state.centroids.values();
  double mx = -1e300;
  for (size_t i = 0; i < n_r; ++i) {
    double dot = 0.0;
    for (size_t j = 0; j < cfg.d; ++j) dot += u[j] * cen[i * cfg.d + j];
    out.affinities[i] = dot;
    mx = std::max(mx, dot);
  }
  double denom = 0.0;
  for (double& a : out.affinities) {
    a = std::exp(a - mx);
    denom += a;
  }
  for (double& a : out.affinities) a /= denom;

  std::vector<double> sel_score = out.affinities;
  if (cfg.routing == RoutingMode::loss_free)
    for (size_t i = 0; i < n_r; ++i) sel_score[i] += state.bias[i];
  out.selected = top_k_indices(sel_score, k_r);

  out.gates.assign(n_r, 0.0);
  for (const size_t i : out.selected) out.gates[i] = out.affinities[i];
  return out;
}

double balance_loss(std::span<const double> f, std::span<const double> P,
                    double alpha) {
  if (f.size() != P.size())
    throw DimensionError("balance_loss: f and P sizes differ");
  double s = 0.0;
  for (size_t i = 0; i < f.size(); ++i) s += f[i] * P[i];
  return alpha * s;
}

double balance_loss_from_window(std::span<const uint64_t> counts,
                                std::span<const double> affinity_sums,
                                uint64_t tokens, size_t k_prime, double alpha) {
  if (tokens == 0)
    throw ContractError("balance_loss_from_window: empty window (T=0)");
  if (counts.size() != affinity_sums.size())
    throw DimensionError("balance_loss_from_window: size mismatch");
  const double n_prime = static_cast<double>(counts.size());
  const double t = static_cast<double>(tokens);
  double s = 0.0;
  for (size_t i = 0; i < counts.size(); ++i) {
    const double f_i =
        n_prime / (static_cast<double>(k_prime) * t) * counts[i];
    const double p_i = affinity_sums[i] / t;
    s += f_i * p_i;
  }
  return alpha * s;
}

void bias_update(RouterState& state, std::span<const uint64_t> loads,
                 double gamma) {
  if (gamma < 0) throw ContractError("bias_update: gamma must be >= 0");
  if (loads.size() != state.bias.size())
    throw DimensionError("bias_update: load vector size mismatch");
  double mean = 0.0;
  for (const uint64_t l : loads) mean += static_cast<double>(l);
  mean /= static_cast<double>(loads.size());
  for (size_t i = 0; i < loads.size(); ++i) {
    const double l = static_cast<double>(loads[i]);
    if (l > mean)
      state.bias[i] -= gamma;
    else if (l < mean)
      state.bias[i] += gamma;
  }
}

ExpertFfn ExpertFfn::init(size_t d, size_t inner, Rng rng, DType dt,
                          double init_std, bool zero_w2) {
  ExpertFfn e;
  Rng r1 = rng.fork("param/w1");
  e.w1 = Tensor::randn({inner, d}, r1, init_std, dt).set_requires_grad(true);
  if (zero_w2) {
    e.w2 = Tensor::zeros({d, inner}, dt).set_requires_grad(true);
  } else {
    Rng r2 = rng.fork("param/w2");
    e.w2 = Tensor::randn({d, inner}, r2, init_std, dt).set_requires_grad(true);
  }
  return e;
}

Tensor ExpertFfn::forward(const Tensor& rows) const {
  return matmul_nt(silu(matmul_nt(rows, w1)), w2);
}

std::vector<double> ExpertFfn::forward_plain(std::span<const double> x) const {
  const size_t inner = w1.rows(), d = w1.cols();
  const auto w1v = w1.values();
  const auto w2v = w2.values();
  std::vector<double> hidden(inner);
  for (size_t i = 0; i < inner; ++i) {
    double s = 0.0;
    for (size_t j = 0; j < d; ++j) s += w1v[i * d + j] * x[j];
    hidden[i] = s / (1.0 + std::exp(-s));
  }
  std::vector<double> y(d, 0.0);
  for (size_t i = 0; i < d; ++i) {
    double s = 0.0;
    for (size_t j = 0; j < inner; ++j) s += w2v[i * inner + j] * hidden[j];
    y[i] = s;
  }
  return y;
}

MoeLayer::MoeLayer(MoeLayerConfig cfg, Rng rng, DType dt, double init_std,
                   bool zero_w2)
    : cfg_(cfg) {
  cfg_.validate();
  const size_t inner = cfg_.expert_inner();
  for (size_t i = 0; i < cfg_.K_s; ++i)
    shared_.push_back(ExpertFfn::init(
        cfg_.d, inner, rng.fork("shared" + std::to_string(i)), dt, init_std,
        zero_w2));
  for (size_t i = 0; i < cfg_.routed_experts(); ++i)
    routed_.push_back(ExpertFfn::init(
        cfg_.d, inner, rng.fork("routed" + std::to_string(i)), dt, init_std,
        zero_w2));
  router_ = RouterState::init(cfg_, rng.fork("router"), dt, init_std);
}

MoeForwardOut MoeLayer::forward(const Tensor& u) {
  if (u.ndim() != 2 || u.cols() != cfg_.d)
    throw DimensionError("moe forward: input " + shape_str(u.shape()) +
                         " does not match d=" + std::to_string(cfg_.d));
  const size_t T = u.rows();
  const size_t n_r = cfg_.routed_experts();
  const size_t k_r = cfg_.active_routed();

  std::vector<Tensor> out_rows;
  out_rows.reserve(T);
  std::vector<Tensor> affinity_rows;
  affinity_rows.reserve(T);
  std::vector<uint64_t> call_counts(n_r, 0);

  for (size_t t = 0; t < T; ++t) {
    Tensor u_t = slice_rows(u, t, t + 1);  // [1 × d]
    Tensor s_row = softmax_rows(matmul_nt(u_t, router_.centroids), 1.0);

    // selection is hard: indices are computed from values, never on the tape
    const auto s = s_row.values();
    std::vector<double> sel_score(s.begin(), s.end());
    if (cfg_.routing == RoutingMode::loss_free)
      for (size_t i = 0; i < n_r; ++i) sel_score[i] += router_.bias[i];
    const std::vector<size_t> selected = top_k_indices(sel_score, k_r);

    for (size_t i = 0; i < n_r; ++i) router_.affinity_sum[i] += s[i];
    for (const size_t i : selected) {
      router_.load[i] += 1;
      call_counts[i] += 1;
    }
    ++router_.window_tokens;

    Tensor h_t = u_t;  // residual term of the layer equation
    for (const ExpertFfn& e : shared_) h_t = add(h_t, e.forward(u_t));
    for (const size_t i : selected) {
      Tensor gate = slice_cols(s_row, i, i + 1);  // [1 × 1], original affinity
      h_t = add(h_t, smul(gate, routed_[i].forward(u_t)));
    }
    out_rows.push_back(h_t);
    affinity_rows.push_back(s_row);
  }

  MoeForwardOut out;
  out.h = stack_rows(out_rows);

  if (cfg_.routing == RoutingMode::aux_loss && cfg_.alpha != 0.0) {
    // P_i stays differentiable through the affinities; f_i comes from the
    // hard selection counts of this call's tokens
    Tensor s_all = stack_rows(affinity_rows);  // [T × N_r]
    Tensor ones = Tensor::full({1, T}, 1.0 / static_cast<double>(T));
    Tensor p = matmul(ones, s_all);  // [1 × N_r]
    std::vector<double> f(n_r, 0.0);
    for (size_t i = 0; i < n_r; ++i)
      f[i] = static_cast<double>(n_r) /
             (static_cast<double>(k_r) * static_cast<double>(T)) *
             static_cast<double>(call_counts[i]);
    Tensor f_t = Tensor::from_data(std::move(f), {1, n_r});
    out.aux_loss = scale(sum(mul(f_t, p)), cfg_.alpha);
  } else {
    out.aux_loss = Tensor::scalar(0.0);
  }
  return out;
}

std::vector<double> MoeLayer::forward_infer(std::span<const double> u_row) {
  const RouteResult r = route(u_row, router_, cfg_);
  std::vector<double> h(u_row.begin(), u_row.end());
  for (const ExpertFfn& e : shared_) {
    const std::vector<double> y = e.forward_plain(u_row);
    for (size_t j = 0; j < h.size(); ++j) h[j] += y[j];
  }
  for (const size_t i : r.selected) {
    const std::vector<double> y = routed_[i].forward_plain(u_row);
    for (size_t j = 0; j < h.size(); ++j) h[j] += r.gates[i] * y[j];
  }
  return h;
}

void MoeLayer::end_batch() {
  if (cfg_.routing == RoutingMode::loss_free)
    bias_update(router_, router_.load, cfg_.gamma);
  router_.reset_window();
}

std::vector<std::pair<std::string, Tensor>> MoeLayer::named(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back(prefix + "centroids", router_.centroids);
  for (size_t i = 0; i < shared_.size(); ++i) {
    out.emplace_back(prefix + "shared" + std::to_string(i) + ".w1",
                     shared_[i].w1);
    out.emplace_back(prefix + "shared" + std::to_string(i) + ".w2",
                     shared_[i].w2);
  }
  for (size_t i = 0; i < routed_.size(); ++i) {
    out.emplace_back(prefix + "routed" + std::to_string(i) + ".w1",
                     routed_[i].w1);
    out.emplace_back(prefix + "routed" + std::to_string(i) + ".w2",
                     routed_[i].w2);
  }
  return out;
}

}  // namespace toylm
