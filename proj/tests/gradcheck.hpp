#pragma once

// Central finite-difference gradient oracle, independent of the reverse-mode
// path it checks: perturb one leaf element at a time and re-run the forward
// closure. Test-only.

#include <algorithm>
#include <cmath>
#include <vector>

#include "toylm/tensor.hpp"

template <class MakeLoss>
double gradcheck_max_rel_err(MakeLoss&& make_loss,
                             std::vector<toylm::Tensor> leaves,
                             double h = 1e-5) {
  using toylm::Tensor;
  for (Tensor& l : leaves) l.zero_grad();
  Tensor loss = make_loss();
  loss.backward();
  std::vector<std::vector<double>> autodiff;
  for (Tensor& l : leaves) {
    const auto g = l.grad();
    autodiff.emplace_back(g.begin(), g.end());
  }

  double max_rel = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto vals = leaves[li].mutable_values();
    for (size_t j = 0; j < vals.size(); ++j) {
      const double orig = vals[j];
      vals[j] = orig + h;
      const double lp = make_loss().scalar_value();
      vals[j] = orig - h;
      const double lm = make_loss().scalar_value();
      vals[j] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double ad = autodiff[li][j];
      const double rel = std::abs(ad - fd) /
                         std::max({std::abs(ad), std::abs(fd), 1e-5});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}
