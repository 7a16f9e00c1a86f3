#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "oracles.hpp"
#include "toylm/model.hpp"
#include "toylm/mtp.hpp"

using namespace toylm;

namespace {

ModelConfig tiny_model_cfg(size_t D) {
  ModelConfig c;
  c.vocab = 5;
  c.attention = AttentionVariant::mla;
  c.ffn = FfnVariant::dense;
  c.ffn_inner = 4;
  c.attn.d = 4;
  c.attn.n_h = 1;
  c.attn.d_h = 2;
  c.attn.d_c = 1;
  c.attn.d_c_q = 1;
  c.attn.d_h_r = 2;
  c.attn.l = 1;
  c.mtp.D = D;
  c.mtp.lambda = 0.3;
  return c;
}

void randomize_params(ToyModel& m, uint64_t seed) {
  Rng rng(seed);
  for (auto& [name, t] : m.named_parameters()) {
    Rng r = rng.fork(name);
    Tensor tt = t;
    for (double& v : tt.mutable_values()) v = r.normal(0.0, 0.4);
  }
}

std::map<std::string, Tensor> param_map(const ToyModel& m) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : m.named_parameters()) out.emplace(name, t);
  return out;
}

}  // namespace

TEST_CASE("lambda 0 and D 0 give a zero loss") {
  MtpConfig cfg;
  cfg.D = 0;
  CHECK(mtp_loss({}, std::vector<int>{0, 1, 2}, cfg).total.scalar_value() ==
        0.0);
  cfg.D = 2;
  cfg.lambda = 0.0;
  CHECK(mtp_loss({}, std::vector<int>{0, 1, 2, 3, 4}, cfg)
            .total.scalar_value() == 0.0);
  cfg.lambda = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("uniform predictor: per-depth loss is (T-k)/T · ln V") {
  const size_t T = 8, V = 5, k = 1;
  MtpConfig cfg;
  cfg.D = 1;
  cfg.lambda = 1.0;
  std::vector<Tensor> logits = {Tensor::zeros({T, V})};  // uniform rows
  std::vector<int> tokens(T + cfg.D + 1, 2);
  const MtpLossOut out = mtp_loss(logits, tokens, cfg);
  const double expect =
      (static_cast<double>(T - k) / static_cast<double>(T)) *
      std::log(static_cast<double>(V));
  CHECK(out.per_depth[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(out.total.scalar_value() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("scripted tiny logits match the direct-summation oracle") {
  const size_t T = 6, V = 4, D = 2;
  MtpConfig cfg;
  cfg.D = D;
  cfg.lambda = 0.3;
  Rng rng(19);
  std::vector<Tensor> logits;
  for (size_t k = 0; k < D; ++k)
    logits.push_back(Tensor::randn({T, V}, rng, 1.5));
  std::vector<int> tokens(T + D + 1);
  for (int& t : tokens) t = static_cast<int>(rng.uniform_index(V));

  const MtpLossOut out = mtp_loss(logits, tokens, cfg);

  // independent direct summation with its own log-softmax
  double total = 0.0;
  for (size_t k = 1; k <= D; ++k) {
    const auto lv = logits[k - 1].values();
    double lk = 0.0;
    for (size_t j = 0; j + k + 1 <= T; ++j) {
      double mx = lv[j * V];
      for (size_t v = 1; v < V; ++v) mx = std::max(mx, lv[j * V + v]);
      double denom = 0.0;
      for (size_t v = 0; v < V; ++v) denom += std::exp(lv[j * V + v] - mx);
      const double logp =
          lv[j * V + tokens[j + k + 1]] - mx - std::log(denom);
      lk -= logp;
    }
    lk /= static_cast<double>(T);  // literal 1/T normalizer
    CHECK(out.per_depth[k - 1] == doctest::Approx(lk).epsilon(1e-12));
    total += lk;
  }
  total *= cfg.lambda / static_cast<double>(D);
  CHECK(out.total.scalar_value() == doctest::Approx(total).epsilon(1e-12));
}

TEST_CASE("doubling lambda exactly doubles the loss") {
  const size_t T = 5, V = 3;
  MtpConfig cfg;
  cfg.D = 1;
  cfg.lambda = 0.4;
  Rng rng(23);
  std::vector<Tensor> logits = {Tensor::randn({T, V}, rng, 1.0)};
  std::vector<int> tokens(T + 2, 1);
  const double once = mtp_loss(logits, tokens, cfg).total.scalar_value();
  cfg.lambda = 0.8;
  const double twice = mtp_loss(logits, tokens, cfg).total.scalar_value();
  CHECK(twice == doctest::Approx(2.0 * once).epsilon(1e-15));
  CHECK(once > 0.0);
}

TEST_CASE("D=0 produces no MTP outputs and leaves the main path intact") {
  ToyModel m(tiny_model_cfg(0), 7);
  const std::vector<int> tokens = {0, 1, 2, 3, 4, 0};
  CHECK(m.mtp_forward(m.body_forward(tokens).hidden, tokens).empty());
  const LmLossOut loss = m.sequence_loss(tokens);
  CHECK(loss.mtp_per_depth.empty());
  CHECK(loss.total.scalar_value() == doctest::Approx(loss.main));
}

TEST_CASE("single-depth pipeline matches a hand-rolled straight-line oracle") {
  const size_t T = 3, V = 5, d = 4;
  ModelConfig cfg = tiny_model_cfg(1);
  ToyModel m(cfg, 3);
  randomize_params(m, 99);
  const std::vector<int> tokens = {1, 4, 0, 2, 3};  // T + D + 1 = 5

  Tensor main_hidden = m.body_forward({tokens.data(), T}).hidden;
  const std::vector<Tensor> got = m.mtp_forward(main_hidden, tokens);
  REQUIRE(got.size() == 1);

  auto params = param_map(m);
  const auto rms = [](std::vector<double> x) {
    double ss = 0.0;
    for (const double v : x) ss += v * v;
    const double inv =
        1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
    for (double& v : x) v *= inv;
    return x;
  };
  const auto row = [](std::span<const double> m2, size_t cols, size_t r) {
    return std::vector<double>(m2.begin() + r * cols,
                               m2.begin() + (r + 1) * cols);
  };

  // concatenate → project, position by position
  const auto emb = params.at("embedding").values();
  const auto proj = params.at("mtp1.projection").values();  // [d × 2d]
  std::vector<double> inp(T * d);
  for (size_t j = 0; j < T; ++j) {
    const std::vector<double> h_prev =
        rms(row(main_hidden.values(), d, j));
    const std::vector<double> e = rms(row(emb, d, tokens[j + 1]));
    std::vector<double> cat = h_prev;
    cat.insert(cat.end(), e.begin(), e.end());
    const std::vector<double> p = oracle::matvec(proj, d, 2 * d, cat);
    std::copy(p.begin(), p.end(), inp.begin() + j * d);
  }

  // block: rms-gain → latent attention → residual → dense ffn → residual
  const auto gain = params.at("mtp1.block.attn_gain").values();
  std::vector<double> a_in(T * d);
  for (size_t j = 0; j < T; ++j) {
    std::vector<double> r = rms(row(inp, d, j));
    for (size_t c = 0; c < d; ++c) a_in[j * d + c] = r[c] * gain[c];
  }
  const oracle::MlaRefOut att = oracle::mla_reference(
      a_in, T, d, cfg.attn.n_h, cfg.attn.d_h, cfg.attn.d_c, cfg.attn.d_c_q,
      cfg.attn.d_h_r, params.at("mtp1.block.attn.w_dkv").values(),
      params.at("mtp1.block.attn.w_uk").values(),
      params.at("mtp1.block.attn.w_uv").values(),
      params.at("mtp1.block.attn.w_dq").values(),
      params.at("mtp1.block.attn.w_uq").values(),
      params.at("mtp1.block.attn.w_qr").values(),
      params.at("mtp1.block.attn.w_kr").values(),
      params.at("mtp1.block.attn.w_o").values(), cfg.attn.rope_base);
  const auto w1 = params.at("mtp1.block.ffn.w1").values();
  const auto w2 = params.at("mtp1.block.ffn.w2").values();
  const auto fgain = params.at("mtp1.final_gain").values();
  const auto head = params.at("head").values();
  for (size_t j = 0; j < T; ++j) {
    std::vector<double> u(d);
    for (size_t c = 0; c < d; ++c) u[c] = inp[j * d + c] + att.u[j * d + c];
    std::vector<double> hidden = oracle::matvec(w1, cfg.ffn_inner, d, u);
    for (double& x : hidden) x = x / (1.0 + std::exp(-x));
    const std::vector<double> y = oracle::matvec(w2, d, cfg.ffn_inner, hidden);
    std::vector<double> x2(d);
    for (size_t c = 0; c < d; ++c) x2[c] = u[c] + y[c];
    std::vector<double> normed = rms(x2);
    for (size_t c = 0; c < d; ++c) normed[c] *= fgain[c];
    const std::vector<double> logits = oracle::matvec(head, V, d, normed);
    for (size_t v = 0; v < V; ++v)
      CHECK(std::abs(got[0].at(j, v) - logits[v]) < 1e-10);
  }
}

TEST_CASE("causality within depths: early positions ignore later tokens") {
  ModelConfig cfg = tiny_model_cfg(2);
  ToyModel m(cfg, 11);
  randomize_params(m, 5);
  const size_t T = 5;
  std::vector<int> tokens = {0, 1, 2, 3, 4, 1, 0, 3};  // T + D + 1
  std::vector<int> tokens2 = tokens;
  const size_t p = 4;
  tokens2[p] = (tokens2[p] + 1) % 5;

  auto depth_logits = [&](const std::vector<int>& toks) {
    Tensor hidden = m.body_forward({toks.data(), T}).hidden;
    return m.mtp_forward(hidden, toks);
  };
  const std::vector<Tensor> a = depth_logits(tokens);
  const std::vector<Tensor> b = depth_logits(tokens2);
  for (size_t k = 1; k <= 2; ++k) {
    // source position j consumes tokens up to j+k, so rows j < p-k are
    // untouched by a perturbation at token index p
    for (size_t j = 0; j + k < p; ++j)
      for (size_t v = 0; v < 5; ++v)
        CHECK(a[k - 1].at(j, v) == b[k - 1].at(j, v));
    // and the first affected row does change
    bool changed = false;
    const size_t j0 = p - k;
    if (j0 < T)
      for (size_t v = 0; v < 5; ++v)
        changed = changed || a[k - 1].at(j0, v) != b[k - 1].at(j0, v);
    CHECK(changed);
  }
}

TEST_CASE("depth-k parameters do not reach earlier depths") {
  ModelConfig cfg = tiny_model_cfg(2);
  ToyModel m(cfg, 13);
  randomize_params(m, 8);
  const size_t T = 4;
  const std::vector<int> tokens = {0, 1, 2, 3, 4, 1, 2};

  Tensor hidden = m.body_forward({tokens.data(), T}).hidden;
  const std::vector<Tensor> before = m.mtp_forward(hidden, tokens);
  // perturb every depth-2 parameter
  for (auto& [name, t] : m.named_parameters()) {
    if (name.rfind("mtp2.", 0) != 0) continue;
    Tensor tt = t;
    for (double& v : tt.mutable_values()) v += 0.7;
  }
  Tensor hidden2 = m.body_forward({tokens.data(), T}).hidden;
  const std::vector<Tensor> after = m.mtp_forward(hidden2, tokens);
  for (size_t i = 0; i < before[0].size(); ++i)
    CHECK(before[0].values()[i] == after[0].values()[i]);
  // depth 2 did change
  bool changed = false;
  for (size_t i = 0; i < before[1].size(); ++i)
    changed = changed || before[1].values()[i] != after[1].values()[i];
  CHECK(changed);
}

TEST_CASE("embedding and output head are shared objects that receive MTP "
          "gradients") {
  ModelConfig cfg = tiny_model_cfg(1);
  cfg.tie_head = false;
  ToyModel m(cfg, 17);
  randomize_params(m, 21);
  const std::vector<int> tokens = {0, 1, 2, 3, 4};
  const size_t T = 3;

  // object identity: mtp depths reference the same tensors
  const Tensor& emb = m.embedding();
  const Tensor& head = m.output_head();

  for (auto& [name, t] : m.named_parameters()) {
    CHECK(name.find("mtp1.embedding") == std::string::npos);
    CHECK(name.find("mtp1.head") == std::string::npos);
  }

  Tensor e_copy = emb;
  Tensor h_copy = head;
  e_copy.zero_grad();
  h_copy.zero_grad();

  // only the MTP loss is active; the shared tensors still get gradients
  Tensor hidden = m.body_forward({tokens.data(), T}).hidden;
  const std::vector<Tensor> logits = m.mtp_forward(hidden, tokens);
  MtpConfig mcfg = cfg.mtp;
  const MtpLossOut out = mtp_loss(logits, tokens, mcfg);
  out.total.backward();

  double gsum = 0.0;
  for (const double g : head.grad()) gsum += std::abs(g);
  CHECK(gsum > 0.0);
  double esum = 0.0;
  for (const double g : emb.grad()) esum += std::abs(g);
  CHECK(esum > 0.0);
}

TEST_CASE("sequence_loss rejects windows too short for the depth chain") {
  ToyModel m(tiny_model_cfg(2), 1);
  const std::vector<int> tokens = {0, 1, 2};
  CHECK_THROWS_AS(m.sequence_loss(tokens), ContractError);
}
