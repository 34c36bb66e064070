// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmnn/network.hpp"

namespace dmnn {

struct LrSchedule {
  enum class Kind { Step, Cosine };
  Kind kind = Kind::Step;
  double lr0 = 0.1;
  std::vector<int> milestones{100, 150};  // step: divide by 10 at each
  double gamma = 0.1;
  int total_epochs = 200;  // cosine horizon
};

/// Learning rate for a given epoch. Step: lr0 * gamma^(milestones passed);
/// cosine: 0.5 * lr0 * (1 + cos(pi * epoch/(total-1))), reaching ~0 at the
/// final epoch.
inline double lr_at(const LrSchedule& s, int epoch) {
  if (s.kind == LrSchedule::Kind::Step) {
    double lr = s.lr0;
    for (int m : s.milestones)
      if (epoch >= m) lr *= s.gamma;
    return lr;
  }
  if (s.total_epochs <= 1) return s.lr0;
  const int e = std::min(epoch, s.total_epochs - 1);
  const double t = static_cast<double>(e) / (s.total_epochs - 1);
  return 0.5 * s.lr0 * (1.0 + std::cos(3.14159265358979323846 * t));
}

/// Nesterov-momentum SGD:
///   g <- grad + wd * w      (decayed parameters only)
///   v <- momentum * v + g
///   w <- w - lr * (g + momentum * v)
/// Weight decay applies to conv/linear weights only (the ParamRef flag).
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<ParamRef> params, double momentum, double weight_decay,
               bool nesterov = true)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay),
        nesterov_(nesterov) {
    velocities_.reserve(params_.size());
    for (auto& p : params_) {
      if (!p.tensor->requires_grad()) p.tensor->set_requires_grad(true);
      velocities_.emplace_back(p.tensor->values().size(), 0.f);
    }
  }

  void step(double lr) {
    for (std::size_t t = 0; t < params_.size(); ++t) {
      auto& w = params_[t].tensor->values();
      const auto& g = params_[t].tensor->grad();
      auto& v = velocities_[t];
      const float wd = params_[t].weight_decay ? static_cast<float>(weight_decay_) : 0.f;
      const float mu = static_cast<float>(momentum_);
      const float eta = static_cast<float>(lr);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const float gi = g[i] + wd * w[i];
        v[i] = mu * v[i] + gi;
        w[i] -= eta * (nesterov_ ? gi + mu * v[i] : v[i]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor->zero_grad();
  }

 private:
  std::vector<ParamRef> params_;
  std::vector<std::vector<float>> velocities_;
  double momentum_;
  double weight_decay_;
  bool nesterov_;
};

}  // namespace dmnn
