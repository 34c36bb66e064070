// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dmnn/ops.hpp"
#include "dmnn/rng.hpp"
#include "dmnn/tensor.hpp"

namespace dmnn {

enum class GateMode { Train, Eval };

/// Hard per-sample, per-sub-block gate states plus the relaxed
/// probabilities they were drawn from.
struct GateDecisions {
  int batch = 0;
  int n_sub = 0;
  std::vector<std::uint8_t> s;   // batch x n_sub, entries 0/1
  std::vector<double> relaxed;   // softmax "on" probabilities
  bool train_mode = false;

  std::uint8_t on(int b, int n) const { return s[static_cast<std::size_t>(b) * n_sub + n]; }
};

/// V = ReLU(W1 * gap(x) + b1): global spatial statistics embedded into the
/// controller's hidden space.
template <typename T>
Tensor<T> spatial_embed(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1) {
  return relu(linear(global_avg_pool(x), w1, b1));
}

/// h = V + ReLU(W2 * h_prev + b2); the first controller has no predecessor
/// and uses h = V.
template <typename T>
Tensor<T> state_update(const Tensor<T>& V, const std::optional<Tensor<T>>& h_prev,
                       const Tensor<T>& w2, const Tensor<T>& b2) {
  if (!h_prev.has_value()) return V;
  return add(V, relu(linear(*h_prev, w2, b2)));
}

/// Gumbel(0,1) noise tensor.
template <typename T>
Tensor<T> gumbel_sample(Shape shape, Rng& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.gumbel());
  return t;
}

/// Softmax over K supervision categories read from the hidden state.
template <typename T>
Tensor<T> category_head(const Tensor<T>& h, const Tensor<T>& wc, const Tensor<T>& bc) {
  return softmax_lastdim(linear(h, wc, bc));
}

template <typename T>
struct GateOutcome {
  GateDecisions decisions;
  Tensor<T> gates;    // [B,N]; forward values are the hard states, the
                      // backward path is the relaxed softmax (train mode)
  Tensor<T> relaxed;  // [B,N] softmax "on" probabilities
};

/// Turns gate logits g: [B,N,2] (last dim = {off,on}) into hard on/off
/// states. Train mode adds independent Gumbel noise to both logits and
/// takes the noisy argmax, with gradients flowing through the relaxed
/// softmax at temperature 1 (straight-through). Eval mode is the noiseless
/// argmax. Ties execute. Entries listed in always_on, or any forced
/// pattern, become constants outside the gradient path.
template <typename T>
GateOutcome<T> decide(const Tensor<T>& g, GateMode mode, Rng& rng,
                      const std::vector<std::uint8_t>* always_on = nullptr,
                      const std::vector<std::uint8_t>* forced = nullptr) {
  detail::require_rank(g, 3, "decide", "g");
  if (g.dim(2) != 2) {
    throw ShapeError("decide: last dimension of g must be 2 (off/on), got " +
                     std::to_string(g.dim(2)));
  }
  const int B = g.dim(0), N = g.dim(1);

  GateOutcome<T> out;
  out.decisions.batch = B;
  out.decisions.n_sub = N;
  out.decisions.train_mode = (mode == GateMode::Train);
  out.decisions.s.resize(static_cast<std::size_t>(B) * N);
  out.decisions.relaxed.resize(static_cast<std::size_t>(B) * N);

  Tensor<T> noisy = g;
  if (mode == GateMode::Train) {
    noisy = add(g, gumbel_sample<T>(g.shape(), rng));
  }

  Tensor<T> p_on;
  if (mode == GateMode::Train) {
    p_on = select_lastdim(softmax_lastdim(noisy), 1);
  } else {
    NoGradGuard ng;
    p_on = select_lastdim(softmax_lastdim(g), 1);
  }

  std::vector<std::uint8_t> hard(static_cast<std::size_t>(B) * N);
  for (int b = 0; b < B; ++b) {
    for (int n = 0; n < N; ++n) {
      const std::size_t base = (static_cast<std::size_t>(b) * N + n) * 2;
      std::uint8_t on = noisy[static_cast<i64>(base) + 1] >= noisy[static_cast<i64>(base)] ? 1 : 0;
      if (always_on && (*always_on)[static_cast<std::size_t>(n)]) on = 1;
      if (forced) on = (*forced)[static_cast<std::size_t>(n)];
      hard[static_cast<std::size_t>(b) * N + n] = on;
    }
  }

  out.decisions.s = hard;
  for (std::size_t i = 0; i < out.decisions.relaxed.size(); ++i)
    out.decisions.relaxed[i] = static_cast<double>(p_on[static_cast<i64>(i)]);
  out.relaxed = p_on;

  // Straight-through assembly: learnable entries are p_on + (hard - p_on)
  // with the parenthesised part constant; overridden entries are constants.
  const bool learnable = (mode == GateMode::Train) && p_on.requires_grad();
  if (learnable) {
    Tensor<T> mask = Tensor<T>::zeros({B, N});
    Tensor<T> offset = Tensor<T>::zeros({B, N});
    for (int b = 0; b < B; ++b) {
      for (int n = 0; n < N; ++n) {
        const std::size_t i = static_cast<std::size_t>(b) * N + n;
        bool overridden = (always_on && (*always_on)[static_cast<std::size_t>(n)]) || forced;
        if (overridden) {
          offset.values()[i] = static_cast<T>(hard[i]);
        } else {
          mask.values()[i] = T(1);
          offset.values()[i] = static_cast<T>(hard[i]) - p_on[static_cast<i64>(i)];
        }
      }
    }
    out.gates = add(mul(p_on, mask), offset);
  } else {
    Tensor<T> s = Tensor<T>::zeros({B, N});
    for (std::size_t i = 0; i < hard.size(); ++i) s.values()[i] = static_cast<T>(hard[i]);
    out.gates = s;
  }
  return out;
}

}  // namespace dmnn
