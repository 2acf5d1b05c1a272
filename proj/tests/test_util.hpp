// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "weave/nn/tensor.hpp"

namespace weave::testutil {

inline void fill_normal(nn::Tensor& t, std::mt19937_64& rng, float s = 1.0f) {
  std::normal_distribution<float> d(0.0f, s);
  for (auto& v : t.data()) v = d(rng);
}

// Central finite differences against the analytic gradient of a scalar loss
// rebuilt by `loss_fn` (params are perturbed in place). Returns the max
// relative error over the checked coordinates.
inline double grad_check(const std::function<nn::Tensor()>& loss_fn,
                         nn::Tensor& param, const std::vector<size_t>& coords,
                         double eps = 1e-2) {
  std::fill(param.grad().begin(), param.grad().end(), 0.0f);
  nn::Tensor loss = loss_fn();
  nn::backward(loss);
  std::vector<float> analytic(coords.size());
  for (size_t i = 0; i < coords.size(); ++i)
    analytic[i] = param.grad()[coords[i]];
  double worst = 0.0;
  for (size_t i = 0; i < coords.size(); ++i) {
    float saved = param.data()[coords[i]];
    param.data()[coords[i]] = saved + static_cast<float>(eps);
    double up = loss_fn().item();
    param.data()[coords[i]] = saved - static_cast<float>(eps);
    double dn = loss_fn().item();
    param.data()[coords[i]] = saved;
    double numeric = (up - dn) / (2.0 * eps);
    // Float-valued losses give FD noise around 1e-5; floor the denominator so
    // near-zero gradient coordinates do not read as spurious failures.
    double denom = std::max({std::abs(numeric), std::abs((double)analytic[i]),
                             5e-2});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
  }
  return worst;
}

}  // namespace weave::testutil
