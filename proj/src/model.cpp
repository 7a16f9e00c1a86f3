#include "toylm/model.hpp"

#include <cmath>

namespace toylm {

namespace {

void rms_gain_inplace(std::vector<double>& x, std::span<const double> gain,
                      double eps) {
  double ss = 0.0;
  for (const double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps);
  for (size_t i = 0; i < x.size(); ++i) x[i] *= inv * gain[i];
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab == 0) throw ContractError("model config: vocab must be positive");
  attn.validate(attention);
  if (ffn == FfnVariant::moe) {
    if (moe.d != attn.d)
      throw ContractError("model config: moe.d must equal attention d");
    moe.validate();
  } else if (ffn_inner == 0) {
    throw ContractError("model config: ffn_inner must be positive");
  }
  mtp.validate();
}

size_t ModelConfig::analytic_param_count() const {
  const size_t d = attn.d;
  const size_t dm = attn.d_h * attn.n_h;
  size_t attn_params = 0;
  if (attention == AttentionVariant::mha) {
    attn_params = 3 * dm * d + d * dm;
  } else {
    attn_params = attn.d_c * d + 2 * dm * attn.d_c + attn.d_c_q * d +
                  dm * attn.d_c_q + d * dm;
    if (attn.d_h_r > 0)
      attn_params += attn.d_h_r * attn.n_h * attn.d_c_q + attn.d_h_r * d;
  }
  size_t ffn_params = 0;
  if (ffn == FfnVariant::moe)
    ffn_params = moe.total_expert_params() + moe.routed_experts() * d;
  else
    ffn_params = 2 * d * ffn_inner;
  const size_t block_params = d + attn_params + ffn_params;  // + attn gain

  size_t count = vocab * d;  // embedding
  count += layers() * block_params;
  count += d;  // final gain
  if (!tie_head) count += vocab * d;
  if (mtp.D > 0)
    count += mtp.D * (d * 2 * d + block_params + d);  // projection+block+gain
  return count;
}

ToyModel::ToyModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  Rng root(seed);
  const size_t d = cfg_.attn.d;

  Rng er = root.fork("param/embedding");
  embedding_ = Tensor::randn({cfg_.vocab, d}, er, cfg_.init_std, cfg_.dtype)
                   .set_requires_grad(true);
  for (size_t b = 0; b < cfg_.layers(); ++b)
    blocks_.push_back(make_block("block" + std::to_string(b), root));
  final_gain_ =
      Tensor::full({d}, 1.0, cfg_.dtype).set_requires_grad(true);
  if (cfg_.tie_head) {
    head_ = embedding_;
  } else {
    Rng hr = root.fork("param/head");
    head_ = Tensor::randn({cfg_.vocab, d}, hr, cfg_.init_std, cfg_.dtype)
                .set_requires_grad(true);
  }
  for (size_t k = 1; k <= cfg_.mtp.D; ++k) {
    MtpDepthModule m;
    Rng pr = root.fork("param/mtp" + std::to_string(k) + "/projection");
    m.projection = Tensor::randn({d, 2 * d}, pr, cfg_.init_std, cfg_.dtype)
                       .set_requires_grad(true);
    m.block = make_block("mtp" + std::to_string(k) + "/block", root);
    m.final_gain = Tensor::full({d}, 1.0, cfg_.dtype).set_requires_grad(true);
    mtp_.push_back(std::move(m));
  }
}

ToyModel::Block ToyModel::make_block(const std::string& name, Rng root) {
  Block b;
  const size_t d = cfg_.attn.d;
  b.attn_gain = Tensor::full({d}, 1.0, cfg_.dtype).set_requires_grad(true);
  Rng ar = root.fork(name + "/attn");
  if (cfg_.attention == AttentionVariant::mha)
    b.mha = MhaWeights::init(cfg_.attn, ar, cfg_.dtype, cfg_.init_std,
                             /*zero_out_proj=*/true);
  else
    b.mla = MlaWeights::init(cfg_.attn, ar, cfg_.dtype, cfg_.init_std,
                             /*zero_out_proj=*/true);
  Rng fr = root.fork(name + "/ffn");
  if (cfg_.ffn == FfnVariant::moe)
    b.moe.emplace(cfg_.moe, fr, cfg_.dtype, cfg_.init_std, /*zero_w2=*/true);
  else
    b.dense = ExpertFfn::init(d, cfg_.ffn_inner, fr, cfg_.dtype, cfg_.init_std,
                              /*zero_w2=*/true);
  return b;
}

Tensor ToyModel::block_forward(Block& b, const Tensor& x, Tensor& aux_acc) {
  Tensor a_in = mul_rowvec(rms_norm_rows(x, cfg_.rms_eps), b.attn_gain);
  Tensor a_out = b.mha ? mha_forward(a_in, *b.mha, cfg_.attn, cfg_.mha_rope)
                       : mla_forward_train(a_in, *b.mla, cfg_.attn);
  Tensor u = add(x, a_out);
  if (b.moe) {
    MoeForwardOut mo = b.moe->forward(u);
    aux_acc = aux_acc.defined() ? add(aux_acc, mo.aux_loss) : mo.aux_loss;
    return mo.h;
  }
  return add(u, b.dense->forward(u));
}

ToyModel::BodyOut ToyModel::body_forward(std::span<const int> tokens) {
  if (tokens.empty()) throw ContractError("body_forward: empty token span");
  Tensor x = embedding_rows(embedding_, tokens);
  Tensor aux;
  for (Block& b : blocks_) x = block_forward(b, x, aux);
  BodyOut out;
  out.hidden = mul_rowvec(rms_norm_rows(x, cfg_.rms_eps), final_gain_);
  out.aux_loss = aux.defined() ? aux : Tensor::scalar(0.0);
  return out;
}

Tensor ToyModel::logits_from_hidden(const Tensor& hidden) const {
  return matmul_nt(hidden, head_);
}

std::vector<Tensor> ToyModel::mtp_forward(const Tensor& main_hidden,
                                          std::span<const int> tokens,
                                          Tensor* aux_out) {
  const size_t T = main_hidden.rows();
  const size_t D = cfg_.mtp.D;
  if (D == 0) return {};
  if (tokens.size() < T + D)
    throw ContractError("mtp_forward: token window of " +
                        std::to_string(tokens.size()) + " too short for T=" +
                        std::to_string(T) + ", D=" + std::to_string(D));
  std::vector<Tensor> depth_logits;
  Tensor prev = main_hidden;
  Tensor aux;  // balance losses of MTP blocks accumulate with the main ones
  for (size_t k = 1; k <= D; ++k) {
    MtpDepthModule& m = mtp_[k - 1];
    std::vector<int> ids(tokens.begin() + k, tokens.begin() + k + T);
    Tensor emb = embedding_rows(embedding_, ids);
    Tensor both = concat_cols(rms_norm_rows(prev, cfg_.rms_eps),
                              rms_norm_rows(emb, cfg_.rms_eps));
    Tensor inp = matmul_nt(both, m.projection);
    Tensor h_k = block_forward(m.block, inp, aux);
    Tensor normed =
        mul_rowvec(rms_norm_rows(h_k, cfg_.rms_eps), m.final_gain);
    depth_logits.push_back(matmul_nt(normed, head_));
    prev = h_k;
  }
  if (aux_out && aux.defined())
    *aux_out = aux_out->defined() ? add(*aux_out, aux) : aux;
  return depth_logits;
}

LmLossOut ToyModel::sequence_loss(std::span<const int> tokens) {
  const size_t D = cfg_.mtp.D;
  if (tokens.size() < 2 + D)
    throw ContractError("sequence_loss: need at least " +
                        std::to_string(2 + D) + " tokens");
  const size_t T = tokens.size() - 1 - D;

  BodyOut body = body_forward(tokens.subspan(0, T));
  Tensor logits = logits_from_hidden(body.hidden);
  std::vector<int> targets(tokens.begin() + 1, tokens.begin() + 1 + T);
  Tensor picked = gather_cols(log_softmax_rows(logits), targets);
  Tensor main_loss = scale(mean(picked), -1.0);

  LmLossOut out;
  out.main = main_loss.scalar_value();
  Tensor total = main_loss;

  if (D > 0 && cfg_.mtp.lambda > 0.0) {
    Tensor mtp_aux;
    std::vector<Tensor> depth_logits =
        mtp_forward(body.hidden, tokens, &mtp_aux);
    MtpConfig mcfg = cfg_.mtp;
    mcfg.vocab_size = cfg_.vocab;
    mcfg.d = cfg_.attn.d;
    MtpLossOut ml = mtp_loss(depth_logits, tokens, mcfg);
    out.mtp_per_depth = ml.per_depth;
    total = add(total, ml.total);
    if (mtp_aux.defined()) body.aux_loss = add(body.aux_loss, mtp_aux);
  }

  out.balance = body.aux_loss.scalar_value();
  if (out.balance != 0.0 || body.aux_loss.requires_grad())
    total = add(total, body.aux_loss);
  out.total = total;

  if (!std::isfinite(out.total.scalar_value()))
    throw NumericError("sequence_loss: non-finite loss");
  return out;
}

Tensor ToyModel::token_logprobs(std::span<const int> tokens, size_t from,
                                size_t to) {
  if (from == 0 || to <= from || to > tokens.size())
    throw ContractError("token_logprobs: bad range");
  BodyOut body = body_forward(tokens.subspan(0, tokens.size() - 1));
  Tensor logits = logits_from_hidden(body.hidden);
  // row p predicts tokens[p+1]
  Tensor rows = slice_rows(logits, from - 1, to - 1);
  std::vector<int> targets(tokens.begin() + from, tokens.begin() + to);
  return gather_cols(log_softmax_rows(rows), targets);
}

ToyModel::DecodeState ToyModel::new_decode_state() const {
  DecodeState st;
  st.layers.resize(blocks_.size());
  for (auto& lc : st.layers) {
    if (cfg_.attention == AttentionVariant::mla)
      lc.mla.emplace(cfg_.attn.d_c, cfg_.attn.d_h_r);
    else
      lc.mha.emplace();
  }
  return st;
}

std::vector<double> ToyModel::decode_step(DecodeState& state,
                                          int token) const {
  const size_t d = cfg_.attn.d;
  if (token < 0 || static_cast<size_t>(token) >= cfg_.vocab)
    throw ContractError("decode_step: token out of vocabulary");
  const auto emb = embedding_.values();
  std::vector<double> x(emb.begin() + token * d,
                        emb.begin() + (token + 1) * d);
  for (size_t b = 0; b < blocks_.size(); ++b)
    x = block_infer(blocks_[b], state.layers[b], x);
  rms_gain_inplace(x, final_gain_.values(), cfg_.rms_eps);
  const auto hv = head_.values();
  std::vector<double> logits(cfg_.vocab, 0.0);
  for (size_t v = 0; v < cfg_.vocab; ++v) {
    double s = 0.0;
    for (size_t j = 0; j < d; ++j) s += hv[v * d + j] * x[j];
    logits[v] = s;
  }
  ++state.tokens;
  return logits;
}

std::vector<double> ToyModel::block_infer(const Block& b, LayerCache& cache,
                                          std::span<const double> x) const {
  std::vector<double> a_in(x.begin(), x.end());
  rms_gain_inplace(a_in, b.attn_gain.values(), cfg_.rms_eps);
  std::vector<double> a_out =
      b.mha ? mha_forward_infer(a_in, *b.mha, cfg_.attn, *cache.mha,
                                cfg_.mha_rope)
            : mla_forward_infer(a_in, *b.mla, cfg_.attn, *cache.mla);
  std::vector<double> u(x.size());
  for (size_t i = 0; i < u.size(); ++i) u[i] = x[i] + a_out[i];
  if (b.moe) return const_cast<MoeLayer&>(*b.moe).forward_infer(u);
  std::vector<double> y = b.dense->forward_plain(u);
  for (size_t i = 0; i < u.size(); ++i) u[i] += y[i];
  return u;
}

ToyModel::Sampled ToyModel::sample_completion(std::span<const int> prompt,
                                              size_t max_new, int stop_token,
                                              Rng& rng) const {
  DecodeState st = new_decode_state();
  std::vector<double> logits;
  for (const int t : prompt) logits = decode_step(st, t);
  if (prompt.empty())
    throw ContractError("sample_completion: empty prompt");

  Sampled out;
  for (size_t i = 0; i < max_new; ++i) {
    // softmax over logits
    double mx = logits[0];
    for (const double v : logits) mx = std::max(mx, v);
    std::vector<double> probs(logits.size());
    double denom = 0.0;
    for (size_t v = 0; v < logits.size(); ++v) {
      probs[v] = std::exp(logits[v] - mx);
      denom += probs[v];
    }
    for (double& p : probs) p /= denom;
    const int tok = rng.categorical(probs);
    out.tokens.push_back(tok);
    out.logprobs.push_back(std::log(probs[tok]));
    if (tok == stop_token) break;
    logits = decode_step(st, tok);
  }
  return out;
}

std::vector<int> ToyModel::greedy_completion(std::span<const int> prompt,
                                             size_t max_new,
                                             int stop_token) const {
  DecodeState st = new_decode_state();
  std::vector<double> logits;
  for (const int t : prompt) logits = decode_step(st, t);
  std::vector<int> out;
  for (size_t i = 0; i < max_new; ++i) {
    int best = 0;
    for (size_t v = 1; v < logits.size(); ++v)
      if (logits[v] > logits[best]) best = static_cast<int>(v);
    out.push_back(best);
    if (best == stop_token) break;
    logits = decode_step(st, best);
  }
  return out;
}

std::vector<double> ToyModel::completion_logprobs_plain(
    std::span<const int> prompt, std::span<const int> output) const {
  DecodeState st = new_decode_state();
  std::vector<double> logits;
  for (const int t : prompt) logits = decode_step(st, t);
  std::vector<double> out;
  out.reserve(output.size());
  for (size_t i = 0; i < output.size(); ++i) {
    double mx = logits[0];
    for (const double v : logits) mx = std::max(mx, v);
    double denom = 0.0;
    for (const double v : logits) denom += std::exp(v - mx);
    out.push_back(logits[output[i]] - mx - std::log(denom));
    if (i + 1 < output.size()) logits = decode_step(st, output[i]);
  }
  return out;
}

void ToyModel::collect_block_params(
    const std::string& prefix, const Block& b,
    std::vector<std::pair<std::string, Tensor>>& out) const {
  out.emplace_back(prefix + "attn_gain", b.attn_gain);
  if (b.mha)
    for (auto& p : b.mha->named(prefix + "attn.")) out.push_back(p);
  if (b.mla)
    for (auto& p : b.mla->named(prefix + "attn.")) out.push_back(p);
  if (b.dense) {
    out.emplace_back(prefix + "ffn.w1", b.dense->w1);
    out.emplace_back(prefix + "ffn.w2", b.dense->w2);
  }
  if (b.moe)
    for (auto& p : b.moe->named(prefix + "moe.")) out.push_back(p);
}

std::vector<std::pair<std::string, Tensor>> ToyModel::named_parameters()
    const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding", embedding_);
  for (size_t i = 0; i < blocks_.size(); ++i)
    collect_block_params("block" + std::to_string(i) + ".", blocks_[i], out);
  out.emplace_back("final_gain", final_gain_);
  if (!cfg_.tie_head) out.emplace_back("head", head_);
  for (size_t k = 1; k <= mtp_.size(); ++k) {
    const std::string prefix = "mtp" + std::to_string(k) + ".";
    out.emplace_back(prefix + "projection", mtp_[k - 1].projection);
    collect_block_params(prefix + "block.", mtp_[k - 1].block, out);
    out.emplace_back(prefix + "final_gain", mtp_[k - 1].final_gain);
  }
  return out;
}

size_t ToyModel::param_count() const {
  size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.size();
  return n;
}

void ToyModel::copy_values_from(const ToyModel& other) {
  auto mine = named_parameters();
  auto theirs = other.named_parameters();
  if (mine.size() != theirs.size())
    throw ContractError("copy_values_from: parameter lists differ");
  for (size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].first != theirs[i].first ||
        mine[i].second.size() != theirs[i].second.size())
      throw ContractError("copy_values_from: mismatch at " + mine[i].first);
    auto dst = mine[i].second.mutable_values();
    const auto src = theirs[i].second.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

std::unique_ptr<ToyModel> ToyModel::clone() const {
  auto copy = std::make_unique<ToyModel>(cfg_, seed_);
  copy->copy_values_from(*this);
  return copy;
}

void ToyModel::end_batch() {
  for (Block& b : blocks_)
    if (b.moe) b.moe->end_batch();
  for (MtpDepthModule& m : mtp_)
    if (m.block.moe) m.block.moe->end_batch();
}

std::vector<MoeLayer*> ToyModel::moe_layers() {
  std::vector<MoeLayer*> out;
  for (Block& b : blocks_)
    if (b.moe) out.push_back(&*b.moe);
  for (MtpDepthModule& m : mtp_)
    if (m.block.moe) out.push_back(&*m.block.moe);
  return out;
}

}  // namespace toylm
