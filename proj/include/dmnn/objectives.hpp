// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dmnn/controller.hpp"
#include "dmnn/flops.hpp"
#include "dmnn/ops.hpp"
#include "dmnn/tensor.hpp"
#include "dmnn/topology.hpp"

namespace dmnn {

/// Target rates for the resource losses; the execution-rate target e always
/// equals the FLOPs-rate target r.
struct ResourceConfig {
  double r = 1.0;
  double e = 1.0;
  explicit ResourceConfig(double rate) : r(rate), e(rate) {}
};

/// Total-loss weights plus the per-controller category-loss ladder
/// (stage s gets 1e-4 * 10^s).
struct LossWeights {
  double alpha1 = 1.0;  // category supervision
  double alpha2 = 1.0;  // resource constraint
  double alpha3 = 1.0;  // classification
  std::vector<double> alpha_per_block;

  static LossWeights staged(const NetworkSpec& spec) {
    LossWeights w;
    for (const auto* b : spec.blocks())
      w.alpha_per_block.push_back(1e-4 * std::pow(10.0, b->stage_index));
    return w;
  }
};

/// Hard per-block execution counts within one mini-batch.
struct BatchGateStats {
  int batch = 0;
  int n_sub = 0;
  std::vector<int> executed;  // b_i per sub-block

  static BatchGateStats from_decisions(const GateDecisions& dec) {
    BatchGateStats s;
    s.batch = dec.batch;
    s.n_sub = dec.n_sub;
    s.executed.assign(static_cast<std::size_t>(dec.n_sub), 0);
    for (int b = 0; b < dec.batch; ++b)
      for (int n = 0; n < dec.n_sub; ++n) s.executed[static_cast<std::size_t>(n)] += dec.on(b, n);
    return s;
  }
};

/// z_l = sum_i b_i / (B * N).
inline double execution_rate(const BatchGateStats& stats) {
  std::int64_t total = 0;
  for (int b : stats.executed) total += b;
  return static_cast<double>(total) / (static_cast<double>(stats.batch) * stats.n_sub);
}

/// L_exec = sum_l (e - z_l)^2.
inline double exec_loss(const std::vector<double>& z, double e) {
  double loss = 0.0;
  for (double zl : z) loss += (e - zl) * (e - zl);
  return loss;
}

/// Batch-averaged cost implied by the gate counts: the table's ungated cost
/// plus sum_l sum_i (b_i / B) * f_{l,i}.
inline double actual_flops(std::span<const BatchGateStats> stats, const FlopsTable& table) {
  double f = static_cast<double>(table.ungated_total());
  for (std::size_t l = 0; l < stats.size(); ++l)
    for (int i = 0; i < stats[l].n_sub; ++i)
      f += static_cast<double>(stats[l].executed[static_cast<std::size_t>(i)]) /
           static_cast<double>(stats[l].batch) * static_cast<double>(table.blocks[l].sub[static_cast<std::size_t>(i)]);
  return f;
}

/// L_flops = (f / f_total - r)^2.
inline double flops_loss(double f, double f_total, double r) {
  const double ratio = f / f_total;
  return (ratio - r) * (ratio - r);
}

// ---- differentiable versions over straight-through gate tensors ------------
// Forward values equal the hard-count formulas above because the gate
// tensors carry hard 0/1 values; gradients flow through the relaxed
// softmax of each gate.

template <typename T>
Tensor<T> exec_loss_t(std::span<const Tensor<T>> gates, double e) {
  Tensor<T> loss = Tensor<T>::zeros({1});
  for (const auto& s : gates) {
    const double denom = static_cast<double>(s.dim(0)) * s.dim(1);
    Tensor<T> z = affine(sum(s), static_cast<T>(1.0 / denom), T(0));
    Tensor<T> term = affine(z, T(-1), static_cast<T>(e));
    loss = add(loss, mul(term, term));
  }
  return loss;
}

template <typename T>
Tensor<T> flops_ratio_t(std::span<const Tensor<T>> gates, const FlopsTable& table) {
  Tensor<T> f = Tensor<T>::filled({1}, static_cast<T>(table.ungated_total()));
  for (std::size_t l = 0; l < gates.size(); ++l) {
    const auto& s = gates[l];
    std::vector<T> weights;
    weights.reserve(table.blocks[l].sub.size());
    for (u64 fi : table.blocks[l].sub) weights.push_back(static_cast<T>(fi));
    Tensor<T> block_f = sum_weighted(s, std::move(weights));
    f = add(f, affine(block_f, static_cast<T>(1.0 / s.dim(0)), T(0)));
  }
  return affine(f, static_cast<T>(1.0 / static_cast<double>(table.total())), T(0));
}

template <typename T>
Tensor<T> flops_loss_t(std::span<const Tensor<T>> gates, const FlopsTable& table, double r) {
  Tensor<T> term = affine(flops_ratio_t(gates, table), T(1), static_cast<T>(-r));
  return mul(term, term);
}

/// L_ctg = sum_l alpha_l * CE(p_l, coarse labels).
template <typename T>
Tensor<T> category_loss_t(std::span<const Tensor<T>> probs_per_block,
                          const std::vector<int>& coarse_labels,
                          const std::vector<double>& alpha_per_block) {
  Tensor<T> loss = Tensor<T>::zeros({1});
  for (std::size_t l = 0; l < probs_per_block.size(); ++l) {
    Tensor<T> ce = cross_entropy(probs_per_block[l], coarse_labels);
    loss = add(loss, affine(ce, static_cast<T>(alpha_per_block[l]), T(0)));
  }
  return loss;
}

/// L_total = a1 * L_ctg + a2 * (L_exec + L_flops) + a3 * L_cls.
template <typename T>
Tensor<T> total_loss_t(const Tensor<T>& cls, const Tensor<T>& ctg, const Tensor<T>& exec,
                       const Tensor<T>& flops, const LossWeights& w) {
  Tensor<T> res = add(exec, flops);
  Tensor<T> out = affine(res, static_cast<T>(w.alpha2), T(0));
  out = add(out, affine(ctg, static_cast<T>(w.alpha1), T(0)));
  out = add(out, affine(cls, static_cast<T>(w.alpha3), T(0)));
  return out;
}

}  // namespace dmnn
