// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dmnn/tensor.hpp"

namespace dmnn {

/// Compares reverse-mode gradients of a scalar-valued closure against
/// central differences. The closure must rebuild its graph on every call
/// and read the listed inputs in place; inputs are perturbed one element
/// at a time. Relative error uses max(|analytic|, |numeric|, 1e-6) as the
/// denominator. Intended for f64 tensors.
inline double grad_check(const std::function<Tensor<double>()>& op_closure,
                         std::vector<Tensor<double>> inputs, double eps = 1e-3) {
  for (auto& in : inputs) {
    if (!in.requires_grad()) in.set_requires_grad(true);
    in.zero_grad();
  }

  Tensor<double> loss = op_closure();
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) analytic.push_back(in.grad());

  double max_rel = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& vals = inputs[t].values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + eps;
      const double up = op_closure()[0];
      vals[i] = keep - eps;
      const double down = op_closure()[0];
      vals[i] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace dmnn
