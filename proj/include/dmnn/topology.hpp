// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

namespace dmnn {

using u64 = std::uint64_t;

/// Ties round upward.
inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

enum class BlockKind { ResnetBottleneck, Mbv2InvertedResidual };

inline const char* to_string(BlockKind k) {
  return k == BlockKind::ResnetBottleneck ? "resnet-bottleneck" : "mbv2-inverted-residual";
}

/// One independently gated fragment of a block.
struct SubBlockSpec {
  int c1 = 0;       // resnet: width of the 1x1 reduction
  int c2 = 0;       // resnet: width of the 3x3 stage
  int hidden = 0;   // mbv2: expanded width
  bool always_on = false;
};

/// Static description of one gated block.
struct BlockSpec {
  BlockKind kind = BlockKind::ResnetBottleneck;
  int c_in = 0;
  int c1 = 0;        // resnet only
  int c2 = 0;        // resnet only
  int c_out = 0;
  double expansion = 0.0;  // mbv2 only
  int stride = 1;
  bool has_identity = false;
  int n_sub = 1;
  int stage_index = 0;
  std::vector<SubBlockSpec> subs;
};

/// Ungated conv + norm (+ ReLU) used for stems and stage transitions.
struct ConvSpec {
  int c_in = 0;
  int c_out = 0;
  int k = 3;
  int stride = 1;
  int pad = 1;
};

struct PoolSpec {
  int k = 3;
  int stride = 2;
  int pad = 1;
};

using StemItem = std::variant<ConvSpec, PoolSpec>;
using BodyItem = std::variant<ConvSpec, BlockSpec>;  // ConvSpec = ungated transition

struct NetworkSpec {
  std::string name;
  int input_channels = 3;
  int input_size = 32;
  int num_classes = 10;
  int num_categories = 10;  // controller supervision classes (K)
  int controller_dim = 32;  // hidden size d
  double default_target_rate = 1.0;
  std::vector<StemItem> stem;
  std::vector<BodyItem> body;

  int num_blocks() const {
    int n = 0;
    for (const auto& item : body)
      if (std::holds_alternative<BlockSpec>(item)) ++n;
    return n;
  }

  std::vector<const BlockSpec*> blocks() const {
    std::vector<const BlockSpec*> out;
    for (const auto& item : body)
      if (const auto* b = std::get_if<BlockSpec>(&item)) out.push_back(b);
    return out;
  }

  int num_stages() const {
    int s = 0;
    for (const auto* b : blocks()) s = std::max(s, b->stage_index + 1);
    return s;
  }

  /// Channel width entering the classifier.
  int head_features() const {
    const auto bs = blocks();
    if (!bs.empty()) return bs.back()->c_out;
    for (auto it = body.rbegin(); it != body.rend(); ++it)
      if (const auto* c = std::get_if<ConvSpec>(&*it)) return c->c_out;
    for (auto it = stem.rbegin(); it != stem.rend(); ++it)
      if (const auto* c = std::get_if<ConvSpec>(&*it)) return c->c_out;
    throw std::runtime_error("network spec has no feature-producing layer");
  }
};

// ---- block subdivision ------------------------------------------------------

/// Splits a bottleneck into n_sub identical fragments. The 3x3 width is
/// C2/N; the 1x1 width solves sub-block parameter parity with the original
/// block in closed form:
///   c1_hat = C1 * (C_in + 9*C2) / (N*C_in + 9*C2)
/// Both widths round half-up.
inline std::vector<SubBlockSpec> split_resnet_block(const BlockSpec& spec) {
  if (spec.kind != BlockKind::ResnetBottleneck) {
    throw std::invalid_argument("split_resnet_block: block kind is " + std::string(to_string(spec.kind)));
  }
  const int n = spec.n_sub;
  const int c2_hat = round_half_up(static_cast<double>(spec.c2) / n);
  const double c1_exact = static_cast<double>(spec.c1) * (spec.c_in + 9.0 * spec.c2) /
                          (static_cast<double>(n) * spec.c_in + 9.0 * spec.c2);
  const int c1_hat = round_half_up(c1_exact);
  if (c1_hat < 1 || c2_hat < 1) {
    throw std::invalid_argument(
        "split_resnet_block: computed sub-block width below 1 (c1_hat=" + std::to_string(c1_hat) +
        ", c2_hat=" + std::to_string(c2_hat) + "); use a smaller N for this block");
  }
  std::vector<SubBlockSpec> subs(static_cast<std::size_t>(n));
  for (auto& s : subs) {
    s.c1 = c1_hat;
    s.c2 = c2_hat;
  }
  if (!spec.has_identity) subs.front().always_on = true;
  return subs;
}

/// Splits an inverted residual into n_sub fragments of expansion E/N.
inline std::vector<SubBlockSpec> split_mbv2_block(const BlockSpec& spec) {
  if (spec.kind != BlockKind::Mbv2InvertedResidual) {
    throw std::invalid_argument("split_mbv2_block: block kind is " + std::string(to_string(spec.kind)));
  }
  const int n = spec.n_sub;
  const int hidden = round_half_up(spec.c_in * spec.expansion / n);
  if (hidden < 1) {
    throw std::invalid_argument("split_mbv2_block: expanded width below 1; use a smaller N");
  }
  std::vector<SubBlockSpec> subs(static_cast<std::size_t>(n));
  for (auto& s : subs) s.hidden = hidden;
  if (!spec.has_identity) subs.front().always_on = true;
  return subs;
}

inline void resolve_block(BlockSpec& b) {
  b.has_identity = (b.stride == 1 && b.c_in == b.c_out);
  b.subs = b.kind == BlockKind::ResnetBottleneck ? split_resnet_block(b) : split_mbv2_block(b);
}

// ---- parameter accounting ---------------------------------------------------

inline u64 conv_weight_params(int c_in, int c_out, int k) {
  return static_cast<u64>(c_in) * static_cast<u64>(c_out) * static_cast<u64>(k) * static_cast<u64>(k);
}
inline u64 norm_affine_params(int c) { return 2ull * static_cast<u64>(c); }

/// Conv weights of the ungated main path (1x1 -> 3x3 -> 1x1).
inline u64 resnet_block_main_params(const BlockSpec& b) {
  return static_cast<u64>(b.c_in) * b.c1 + 9ull * b.c1 * b.c2 + static_cast<u64>(b.c2) * b.c_out;
}

/// Conv weights summed over the sub-block fragments.
inline u64 resnet_subblocks_params(const BlockSpec& b) {
  u64 total = 0;
  for (const auto& s : b.subs)
    total += static_cast<u64>(b.c_in) * s.c1 + 9ull * s.c1 * s.c2 + static_cast<u64>(s.c2) * b.c_out;
  return total;
}

inline u64 mbv2_block_main_params(const BlockSpec& b) {
  const u64 h = static_cast<u64>(std::llround(b.c_in * b.expansion));
  return static_cast<u64>(b.c_in) * h + 9ull * h + h * static_cast<u64>(b.c_out);
}

inline u64 mbv2_subblocks_params(const BlockSpec& b) {
  u64 total = 0;
  for (const auto& s : b.subs)
    total += static_cast<u64>(b.c_in) * s.hidden + 9ull * s.hidden +
             static_cast<u64>(s.hidden) * b.c_out;
  return total;
}

inline double block_parity_gap(const BlockSpec& b) {
  const double orig = static_cast<double>(b.kind == BlockKind::ResnetBottleneck
                                              ? resnet_block_main_params(b)
                                              : mbv2_block_main_params(b));
  const double split = static_cast<double>(b.kind == BlockKind::ResnetBottleneck
                                               ? resnet_subblocks_params(b)
                                               : mbv2_subblocks_params(b));
  return std::fabs(split - orig) / orig;
}

struct ParamCounts {
  struct PerBlock {
    u64 backbone = 0;    // sub-block convs + norms + projection shortcut
    u64 controller = 0;  // gate-path weights and biases
  };
  std::vector<PerBlock> blocks;
  u64 stem = 0;
  u64 transitions = 0;
  u64 head = 0;
  u64 backbone_total = 0;      // deployed network body (headline count)
  u64 controller_total = 0;    // gate controllers, kept at inference
  u64 category_head_total = 0; // controller supervision heads, dropped after training

  u64 with_controllers() const { return backbone_total + controller_total; }
};

/// Counts conv/linear weights, biases, and normalisation affine parameters.
/// The headline backbone_total covers the deployed body; controller and
/// category-head parameters are reported separately.
inline ParamCounts count_params(const NetworkSpec& spec) {
  ParamCounts out;
  const int d = spec.controller_dim;

  for (const auto& item : spec.stem) {
    if (const auto* c = std::get_if<ConvSpec>(&item))
      out.stem += conv_weight_params(c->c_in, c->c_out, c->k) + norm_affine_params(c->c_out);
  }

  bool first_block = true;
  for (const auto& item : spec.body) {
    if (const auto* c = std::get_if<ConvSpec>(&item)) {
      out.transitions += conv_weight_params(c->c_in, c->c_out, c->k) + norm_affine_params(c->c_out);
      continue;
    }
    const auto& b = std::get<BlockSpec>(item);
    ParamCounts::PerBlock pb;
    for (const auto& s : b.subs) {
      if (b.kind == BlockKind::ResnetBottleneck) {
        pb.backbone += conv_weight_params(b.c_in, s.c1, 1) + norm_affine_params(s.c1);
        pb.backbone += conv_weight_params(s.c1, s.c2, 3) + norm_affine_params(s.c2);
        pb.backbone += conv_weight_params(s.c2, b.c_out, 1) + norm_affine_params(b.c_out);
      } else {
        pb.backbone += conv_weight_params(b.c_in, s.hidden, 1) + norm_affine_params(s.hidden);
        pb.backbone += 9ull * s.hidden + norm_affine_params(s.hidden);  // depthwise
        pb.backbone += conv_weight_params(s.hidden, b.c_out, 1) + norm_affine_params(b.c_out);
      }
    }
    if (!b.has_identity) {
      pb.backbone += conv_weight_params(b.c_in, b.c_out, 1) + norm_affine_params(b.c_out);
    }
    pb.controller = static_cast<u64>(d) * b.c_in + d;  // W1, b1
    if (!first_block) pb.controller += static_cast<u64>(d) * d + d;  // W2, b2
    pb.controller += 2ull * b.n_sub * d + 2ull * b.n_sub;  // W3, b3
    out.category_head_total += static_cast<u64>(spec.num_categories) * d + spec.num_categories;
    out.blocks.push_back(pb);
    first_block = false;
  }

  out.head = static_cast<u64>(spec.head_features()) * spec.num_classes + spec.num_classes;
  out.backbone_total = out.stem + out.transitions + out.head;
  for (const auto& pb : out.blocks) {
    out.backbone_total += pb.backbone;
    out.controller_total += pb.controller;
  }
  return out;
}

// ---- presets ----------------------------------------------------------------

namespace detail_topology {

inline BlockSpec bottleneck(int c_in, int width, int c_out, int stride, int n_sub, int stage) {
  BlockSpec b;
  b.kind = BlockKind::ResnetBottleneck;
  b.c_in = c_in;
  b.c1 = width;
  b.c2 = width;
  b.c_out = c_out;
  b.stride = stride;
  b.n_sub = n_sub;
  b.stage_index = stage;
  resolve_block(b);
  return b;
}

/// ImageNet-style bottleneck body: stage s has counts[s] blocks of width
/// 64*2^s producing 256*2^s channels, downsampling via the 3x3 stride.
inline void add_bottleneck_stages(NetworkSpec& spec, const std::vector<int>& counts, int c_in,
                                  int n_sub, bool downsample_first_stage) {
  int in = c_in;
  for (std::size_t s = 0; s < counts.size(); ++s) {
    const int width = 64 << s;
    const int out = 256 << s;
    for (int i = 0; i < counts[s]; ++i) {
      const int stride = (i == 0 && (s > 0 || downsample_first_stage)) ? 2 : 1;
      spec.body.emplace_back(bottleneck(in, width, out, stride, n_sub, static_cast<int>(s)));
      in = out;
    }
  }
}

}  // namespace detail_topology

/// Builds a fully resolved network description.
///   dmnn50-imagenet / dmnn101-imagenet : accounting-scale presets (224x224)
///   dmnn50-cifar                       : the 32x32 variant used for full runs
///   dmnn20-cifar                       : small bottleneck net for desk runs
///   dmnn8-synthetic                    : 3-stage toy, one gated block per stage
/// n_sub = 1 yields the ungated baseline of the same preset.
inline NetworkSpec make_preset(const std::string& name, int n_sub, double target_rate = 1.0) {
  NetworkSpec spec;
  spec.name = name;
  spec.default_target_rate = target_rate;
  using detail_topology::add_bottleneck_stages;
  using detail_topology::bottleneck;

  if (name == "dmnn50-imagenet" || name == "dmnn101-imagenet") {
    spec.input_size = 224;
    spec.num_classes = 1000;
    spec.num_categories = 58;
    spec.stem.emplace_back(ConvSpec{3, 64, 7, 2, 3});
    spec.stem.emplace_back(PoolSpec{3, 2, 1});
    const std::vector<int> counts =
        name == "dmnn50-imagenet" ? std::vector<int>{3, 4, 6, 3} : std::vector<int>{3, 4, 23, 3};
    add_bottleneck_stages(spec, counts, 64, n_sub, false);
  } else if (name == "dmnn50-cifar") {
    spec.input_size = 32;
    spec.num_classes = 100;
    spec.num_categories = 20;
    spec.stem.emplace_back(ConvSpec{3, 64, 3, 1, 1});
    spec.stem.emplace_back(PoolSpec{3, 2, 1});
    add_bottleneck_stages(spec, {3, 4, 6, 3}, 64, n_sub, false);
  } else if (name == "dmnn20-cifar") {
    spec.input_size = 32;
    spec.num_classes = 100;
    spec.num_categories = 20;
    spec.stem.emplace_back(ConvSpec{3, 16, 3, 1, 1});
    int in = 16;
    for (int s = 0; s < 3; ++s) {
      const int width = 16 << s;
      const int out = 64 << s;
      for (int i = 0; i < 2; ++i) {
        const int stride = (i == 0 && s > 0) ? 2 : 1;
        spec.body.emplace_back(bottleneck(in, width, out, stride, n_sub, s));
        in = out;
      }
    }
  } else if (name == "dmnn8-synthetic") {
    spec.input_size = 32;
    spec.num_classes = 10;
    spec.num_categories = 10;
    spec.stem.emplace_back(ConvSpec{3, 16, 3, 2, 1});
    spec.body.emplace_back(bottleneck(16, 12, 16, 1, n_sub, 0));
    spec.body.emplace_back(ConvSpec{16, 32, 1, 2, 0});
    spec.body.emplace_back(bottleneck(32, 24, 32, 1, n_sub, 1));
    spec.body.emplace_back(ConvSpec{32, 64, 1, 2, 0});
    spec.body.emplace_back(bottleneck(64, 48, 64, 1, n_sub, 2));
  } else {
    throw std::invalid_argument("make_preset: unknown preset '" + name + "'");
  }
  return spec;
}

// ---- serialization ----------------------------------------------------------

inline nlohmann::json to_json(const BlockSpec& b) {
  nlohmann::json j{{"kind", to_string(b.kind)},
                   {"c_in", b.c_in},
                   {"c_out", b.c_out},
                   {"stride", b.stride},
                   {"n_sub", b.n_sub},
                   {"stage", b.stage_index}};
  if (b.kind == BlockKind::ResnetBottleneck) {
    j["c1"] = b.c1;
    j["c2"] = b.c2;
  } else {
    j["expansion"] = b.expansion;
  }
  return j;
}

inline BlockSpec block_from_json(const nlohmann::json& j) {
  BlockSpec b;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "resnet-bottleneck") {
    b.kind = BlockKind::ResnetBottleneck;
    b.c1 = j.at("c1").get<int>();
    b.c2 = j.at("c2").get<int>();
  } else if (kind == "mbv2-inverted-residual") {
    b.kind = BlockKind::Mbv2InvertedResidual;
    b.expansion = j.at("expansion").get<double>();
  } else {
    throw std::invalid_argument("network spec: unknown block kind '" + kind + "'");
  }
  b.c_in = j.at("c_in").get<int>();
  b.c_out = j.at("c_out").get<int>();
  b.stride = j.at("stride").get<int>();
  b.n_sub = j.at("n_sub").get<int>();
  b.stage_index = j.at("stage").get<int>();
  resolve_block(b);
  return b;
}

inline nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["name"] = spec.name;
  j["input_channels"] = spec.input_channels;
  j["input_size"] = spec.input_size;
  j["num_classes"] = spec.num_classes;
  j["num_categories"] = spec.num_categories;
  j["controller_dim"] = spec.controller_dim;
  j["target_rate"] = spec.default_target_rate;
  j["stem"] = nlohmann::json::array();
  for (const auto& item : spec.stem) {
    if (const auto* c = std::get_if<ConvSpec>(&item)) {
      j["stem"].push_back({{"type", "conv"},
                           {"c_in", c->c_in},
                           {"c_out", c->c_out},
                           {"k", c->k},
                           {"stride", c->stride},
                           {"pad", c->pad}});
    } else {
      const auto& p = std::get<PoolSpec>(item);
      j["stem"].push_back(
          {{"type", "maxpool"}, {"k", p.k}, {"stride", p.stride}, {"pad", p.pad}});
    }
  }
  j["body"] = nlohmann::json::array();
  for (const auto& item : spec.body) {
    if (const auto* c = std::get_if<ConvSpec>(&item)) {
      j["body"].push_back({{"type", "transition"},
                           {"c_in", c->c_in},
                           {"c_out", c->c_out},
                           {"k", c->k},
                           {"stride", c->stride},
                           {"pad", c->pad}});
    } else {
      auto bj = to_json(std::get<BlockSpec>(item));
      bj["type"] = "block";
      j["body"].push_back(bj);
    }
  }
  return j;
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.input_channels = j.at("input_channels").get<int>();
  spec.input_size = j.at("input_size").get<int>();
  spec.num_classes = j.at("num_classes").get<int>();
  spec.num_categories = j.at("num_categories").get<int>();
  spec.controller_dim = j.at("controller_dim").get<int>();
  spec.default_target_rate = j.value("target_rate", 1.0);
  for (const auto& item : j.at("stem")) {
    const std::string type = item.at("type").get<std::string>();
    if (type == "conv") {
      spec.stem.emplace_back(ConvSpec{item.at("c_in").get<int>(), item.at("c_out").get<int>(),
                                      item.at("k").get<int>(), item.at("stride").get<int>(),
                                      item.at("pad").get<int>()});
    } else if (type == "maxpool") {
      spec.stem.emplace_back(
          PoolSpec{item.at("k").get<int>(), item.at("stride").get<int>(), item.at("pad").get<int>()});
    } else {
      throw std::invalid_argument("network spec: unknown stem item type '" + type + "'");
    }
  }
  for (const auto& item : j.at("body")) {
    const std::string type = item.at("type").get<std::string>();
    if (type == "transition") {
      spec.body.emplace_back(ConvSpec{item.at("c_in").get<int>(), item.at("c_out").get<int>(),
                                      item.at("k").get<int>(), item.at("stride").get<int>(),
                                      item.at("pad").get<int>()});
    } else if (type == "block") {
      spec.body.emplace_back(block_from_json(item));
    } else {
      throw std::invalid_argument("network spec: unknown body item type '" + type + "'");
    }
  }
  return spec;
}

}  // namespace dmnn
