// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <variant>
#include <vector>

#include "dmnn/topology.hpp"

namespace dmnn {

// One FLOPs unit = one multiply-add pair. Only multiplications that touch
// real data count: taps falling into zero padding are skipped, exactly as a
// bounds-checked direct convolution executes them. Normalisation,
// activations, and pooling contribute no units.

/// Sum over output positions of the in-bounds kernel taps (one dimension).
inline u64 conv_tap_sum(int in, int k, int stride, int pad) {
  const int out = (in + 2 * pad - k) / stride + 1;
  u64 taps = 0;
  for (int o = 0; o < out; ++o) {
    const int lo = o * stride - pad;
    int valid = 0;
    for (int t = 0; t < k; ++t) {
      const int i = lo + t;
      if (i >= 0 && i < in) ++valid;
    }
    taps += static_cast<u64>(valid);
  }
  return taps;
}

inline u64 conv2d_macs(int c_in, int c_out, int k, int stride, int pad, int H, int W) {
  return static_cast<u64>(c_in) * c_out * conv_tap_sum(H, k, stride, pad) *
         conv_tap_sum(W, k, stride, pad);
}

inline u64 depthwise_macs(int c, int k, int stride, int pad, int H, int W) {
  return static_cast<u64>(c) * conv_tap_sum(H, k, stride, pad) * conv_tap_sum(W, k, stride, pad);
}

inline u64 linear_macs(int in_features, int out_features) {
  return static_cast<u64>(in_features) * out_features;
}

/// Per-sub-block, per-controller and ungated multiply-add costs for one
/// sample at a fixed input resolution.
struct FlopsTable {
  struct BlockCost {
    std::vector<u64> sub;  // f_{l,i}
    u64 downsample = 0;    // projection shortcut, always executed
    u64 controller = 0;    // gate path (category head excluded)
  };
  std::vector<BlockCost> blocks;
  u64 stem = 0;
  u64 transitions = 0;
  u64 head = 0;

  u64 gated_total() const {
    u64 t = 0;
    for (const auto& b : blocks)
      for (u64 f : b.sub) t += f;
    return t;
  }
  u64 controllers_total() const {
    u64 t = 0;
    for (const auto& b : blocks) t += b.controller;
    return t;
  }
  u64 downsamples_total() const {
    u64 t = 0;
    for (const auto& b : blocks) t += b.downsample;
    return t;
  }
  /// Cost paid regardless of the gate pattern.
  u64 ungated_total() const {
    return stem + transitions + head + downsamples_total() + controllers_total();
  }
  u64 total() const { return ungated_total() + gated_total(); }

  /// Per-sample cost implied by one gate pattern (on[l][i] in {0,1}).
  u64 sample_flops(const std::vector<std::vector<std::uint8_t>>& on) const {
    u64 f = ungated_total();
    for (std::size_t l = 0; l < blocks.size(); ++l)
      for (std::size_t i = 0; i < blocks[l].sub.size(); ++i)
        if (on[l][i]) f += blocks[l].sub[i];
    return f;
  }
};

/// Walks the spec tracking spatial extents and prices every layer.
inline FlopsTable build_flops_table(const NetworkSpec& spec, int input_resolution) {
  FlopsTable table;
  int H = input_resolution, W = input_resolution;
  const int d = spec.controller_dim;

  auto advance = [](int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; };

  for (const auto& item : spec.stem) {
    if (const auto* c = std::get_if<ConvSpec>(&item)) {
      table.stem += conv2d_macs(c->c_in, c->c_out, c->k, c->stride, c->pad, H, W);
      H = advance(H, c->k, c->stride, c->pad);
      W = advance(W, c->k, c->stride, c->pad);
    } else {
      const auto& p = std::get<PoolSpec>(item);
      H = advance(H, p.k, p.stride, p.pad);
      W = advance(W, p.k, p.stride, p.pad);
    }
  }

  bool first_block = true;
  for (const auto& item : spec.body) {
    if (const auto* c = std::get_if<ConvSpec>(&item)) {
      table.transitions += conv2d_macs(c->c_in, c->c_out, c->k, c->stride, c->pad, H, W);
      H = advance(H, c->k, c->stride, c->pad);
      W = advance(W, c->k, c->stride, c->pad);
      continue;
    }
    const auto& b = std::get<BlockSpec>(item);
    const int OH = advance(H, 3, b.stride, 1);
    const int OW = advance(W, 3, b.stride, 1);
    FlopsTable::BlockCost cost;
    for (const auto& s : b.subs) {
      u64 f = 0;
      if (b.kind == BlockKind::ResnetBottleneck) {
        f += conv2d_macs(b.c_in, s.c1, 1, 1, 0, H, W);
        f += conv2d_macs(s.c1, s.c2, 3, b.stride, 1, H, W);
        f += conv2d_macs(s.c2, b.c_out, 1, 1, 0, OH, OW);
      } else {
        f += conv2d_macs(b.c_in, s.hidden, 1, 1, 0, H, W);
        f += depthwise_macs(s.hidden, 3, b.stride, 1, H, W);
        f += conv2d_macs(s.hidden, b.c_out, 1, 1, 0, OH, OW);
      }
      if (f == 0) throw std::runtime_error("build_flops_table: zero-cost sub-block");
      cost.sub.push_back(f);
    }
    if (!b.has_identity) {
      cost.downsample = conv2d_macs(b.c_in, b.c_out, 1, b.stride, 0, H, W);
    }
    cost.controller = linear_macs(b.c_in, d) + (first_block ? 0 : linear_macs(d, d)) +
                      linear_macs(d, 2 * b.n_sub);
    table.blocks.push_back(std::move(cost));
    H = OH;
    W = OW;
    first_block = false;
  }

  table.head = linear_macs(spec.head_features(), spec.num_classes);
  return table;
}

}  // namespace dmnn
