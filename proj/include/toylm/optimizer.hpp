#pragma once

#include <cmath>
#include <vector>

#include "toylm/tensor.hpp"

namespace toylm {

// Momentum-free adaptive update: per-element second-moment EMA with bias
// correction, fixed base step size, linear warmup.
class Optimizer {
 public:
  struct Config {
    double lr = 1e-3;
    size_t warmup = 0;
    double beta2 = 0.99;
    double eps = 1e-8;
  };

  Optimizer(Config cfg, std::vector<Tensor> params)
      : cfg_(cfg), params_(std::move(params)) {
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i)
      v_[i].assign(params_[i].size(), 0.0);
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

  double current_lr() const {
    if (cfg_.warmup == 0) return cfg_.lr;
    const double f = std::min(
        1.0, static_cast<double>(t_ + 1) / static_cast<double>(cfg_.warmup));
    return cfg_.lr * f;
  }

  void step() {
    const double lr = current_lr();
    ++t_;
    const double corr = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      const auto g = p.grad();
      auto x = p.mutable_values();
      const bool f32 = p.dtype() == DType::f32;
      for (size_t j = 0; j < x.size(); ++j) {
        v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double vhat = v_[i][j] / corr;
        x[j] -= lr * g[j] / (std::sqrt(vhat) + cfg_.eps);
        if (f32) x[j] = static_cast<double>(static_cast<float>(x[j]));
      }
    }
  }

  size_t steps_done() const { return t_; }
  std::vector<Tensor>& params() { return params_; }

 private:
  Config cfg_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> v_;
  size_t t_ = 0;
};

}  // namespace toylm
