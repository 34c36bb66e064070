// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dmnn/controller.hpp"
#include "dmnn/flops.hpp"
#include "dmnn/ops.hpp"
#include "dmnn/rng.hpp"
#include "dmnn/tensor.hpp"
#include "dmnn/topology.hpp"

namespace dmnn {

enum class ExecMode { Train, EvalMasked, EvalSkip };

struct NamedTensor {
  std::string name;
  TensorF* tensor;
};

struct ParamRef {
  std::string name;
  TensorF* tensor;
  bool weight_decay;
};

/// Everything one forward pass produced: logits, per-block decisions with
/// their gradient-carrying gate tensors, optional controller category
/// probabilities, and the per-sample cost implied by the decisions.
struct ForwardRecord {
  TensorF logits;
  std::vector<GateDecisions> decisions;
  std::vector<TensorF> gates;           // straight-through [B,N] per block
  std::vector<TensorF> category_probs;  // [B,K] per block (train + supervision)
  std::vector<u64> per_sample_flops;
  int batch = 0;
  // filled only when block-IO recording is on (detached value copies)
  std::vector<TensorF> block_inputs;
  std::vector<TensorF> block_outputs;
};

namespace netdetail {

struct ConvBn {
  TensorF w;
  int stride = 1, pad = 0;
  bool depthwise = false;
  bool act = true;  // ReLU after the norm
  TensorF gamma, beta, run_mean, run_var;
};

struct SubBlockLayers {
  ConvBn reduce, spatial, expand;  // 1x1 / 3x3(dw) / 1x1
};

struct BlockLayers {
  const BlockSpec* spec = nullptr;
  std::vector<SubBlockLayers> subs;
  std::optional<ConvBn> shortcut;  // projection when the identity is unavailable
};

struct ControllerLayers {
  TensorF w1, b1, w2, b2, w3, b3, wcat, bcat;
  bool first = false;
};

}  // namespace netdetail

/// Gated multi-path network: stem, gated blocks with per-block controllers,
/// ungated transitions, and a pooled linear classifier.
class DmnnNetwork {
 public:
  explicit DmnnNetwork(NetworkSpec spec, std::uint64_t init_seed = 1)
      : spec_(std::move(spec)), flops_(build_flops_table(spec_, spec_.input_size)) {
    Rng rng(mix_seed(init_seed, 0x716e6e6d64ull));
    build(rng);
  }

  // blocks_ holds pointers into spec_.body; moving keeps the heap buffers,
  // copying would not.
  DmnnNetwork(const DmnnNetwork&) = delete;
  DmnnNetwork& operator=(const DmnnNetwork&) = delete;
  DmnnNetwork(DmnnNetwork&&) = default;
  DmnnNetwork& operator=(DmnnNetwork&&) = default;

  const NetworkSpec& spec() const { return spec_; }
  const FlopsTable& flops() const { return flops_; }

  /// Overrides every controller with a fixed per-block pattern (test hook).
  void force_gates(std::vector<std::vector<std::uint8_t>> pattern) {
    if (static_cast<int>(pattern.size()) != spec_.num_blocks()) {
      throw std::invalid_argument("force_gates: pattern must cover every block");
    }
    forced_ = std::move(pattern);
  }
  void clear_forced() { forced_.reset(); }

  /// Convenience: force every gate to the same state.
  void force_all_gates(bool on) {
    std::vector<std::vector<std::uint8_t>> pattern;
    for (const auto* b : spec_.blocks())
      pattern.emplace_back(static_cast<std::size_t>(b->n_sub), on ? 1 : 0);
    force_gates(std::move(pattern));
  }

  /// Captures per-block input/output value copies in the next records.
  void set_record_block_io(bool on) { record_block_io_ = on; }

  void set_normalization(std::array<float, 3> mean, std::array<float, 3> stddev) {
    for (int c = 0; c < 3; ++c) {
      data_mean_[c] = mean[static_cast<std::size_t>(c)];
      data_std_[c] = stddev[static_cast<std::size_t>(c)];
    }
  }
  std::array<float, 3> normalization_mean() const {
    return {data_mean_[0], data_mean_[1], data_mean_[2]};
  }
  std::array<float, 3> normalization_std() const {
    return {data_std_[0], data_std_[1], data_std_[2]};
  }

  /// Runs the network. Train mode executes every sub-block and masks each
  /// output by its per-sample gate; masked eval does the same with running
  /// statistics and noiseless gates; skipping eval (batch 1 only) physically
  /// skips sub-blocks that are off.
  ForwardRecord forward(const TensorF& x, ExecMode mode, Rng& gate_rng,
                        bool with_categories = false) {
    if (mode == ExecMode::EvalSkip && x.dim(0) != 1) {
      throw std::invalid_argument(
          "forward: skipping eval supports batch size 1 only; use masked eval for batches");
    }
    if (mode == ExecMode::Train) return run(x, mode, gate_rng, with_categories);
    NoGradGuard ng;
    return run(x, mode, gate_rng, with_categories);
  }

  /// All parameters and buffers under stable names (checkpoint order).
  std::vector<NamedTensor> named_tensors() {
    std::vector<NamedTensor> out;
    auto add_convbn = [&out](const std::string& prefix, netdetail::ConvBn& cb) {
      out.push_back({prefix + ".conv.weight", &cb.w});
      out.push_back({prefix + ".norm.gamma", &cb.gamma});
      out.push_back({prefix + ".norm.beta", &cb.beta});
      out.push_back({prefix + ".norm.mean", &cb.run_mean});
      out.push_back({prefix + ".norm.var", &cb.run_var});
    };
    for (std::size_t i = 0; i < stem_.size(); ++i) {
      if (auto* cb = std::get_if<netdetail::ConvBn>(&stem_[i]))
        add_convbn("stem" + std::to_string(i), *cb);
    }
    int t = 0;
    for (auto& tr : transitions_) add_convbn("trans" + std::to_string(t++), tr);
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const std::string bp = "block" + std::to_string(l);
      auto& blk = blocks_[l];
      for (std::size_t n = 0; n < blk.subs.size(); ++n) {
        const std::string sp = bp + ".sub" + std::to_string(n);
        add_convbn(sp + ".reduce", blk.subs[n].reduce);
        add_convbn(sp + ".spatial", blk.subs[n].spatial);
        add_convbn(sp + ".expand", blk.subs[n].expand);
      }
      if (blk.shortcut) add_convbn(bp + ".shortcut", *blk.shortcut);
      auto& c = controllers_[l];
      out.push_back({bp + ".ctrl.w1", &c.w1});
      out.push_back({bp + ".ctrl.b1", &c.b1});
      if (!c.first) {
        out.push_back({bp + ".ctrl.w2", &c.w2});
        out.push_back({bp + ".ctrl.b2", &c.b2});
      }
      out.push_back({bp + ".ctrl.w3", &c.w3});
      out.push_back({bp + ".ctrl.b3", &c.b3});
      out.push_back({bp + ".ctrl.cat_w", &c.wcat});
      out.push_back({bp + ".ctrl.cat_b", &c.bcat});
    }
    out.push_back({"head.fc.weight", &fc_w_});
    out.push_back({"head.fc.bias", &fc_b_});
    out.push_back({"data.mean", &data_mean_});
    out.push_back({"data.std", &data_std_});
    return out;
  }

  /// Trainable parameters; weight_decay marks conv/linear weights.
  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    for (auto& nt : named_tensors()) {
      const std::string& n = nt.name;
      const bool buffer = n.ends_with(".mean") || n.ends_with(".var") || n == "data.mean" ||
                          n == "data.std";
      if (buffer) continue;
      const bool weight = n.ends_with("conv.weight") || n.ends_with("fc.weight") ||
                          n.ends_with(".w1") || n.ends_with(".w2") || n.ends_with(".w3") ||
                          n.ends_with(".cat_w");
      out.push_back({n, nt.tensor, weight});
    }
    return out;
  }

  void ensure_grad_tracking() {
    for (auto& p : parameters())
      if (!p.tensor->requires_grad()) p.tensor->set_requires_grad(true);
  }
  void zero_grad() {
    for (auto& p : parameters()) p.tensor->zero_grad();
  }

 private:
  NetworkSpec spec_;
  FlopsTable flops_;
  std::vector<std::variant<netdetail::ConvBn, PoolSpec>> stem_;
  std::vector<netdetail::ConvBn> transitions_;  // in body order
  std::vector<int> body_layout_;                // >=0: block index, -1-k: transition k
  std::vector<netdetail::BlockLayers> blocks_;
  std::vector<netdetail::ControllerLayers> controllers_;
  TensorF fc_w_, fc_b_;
  TensorF data_mean_, data_std_;
  std::optional<std::vector<std::vector<std::uint8_t>>> forced_;
  bool record_block_io_ = false;

  static TensorF he_normal(Shape shape, int fan_in, Rng& rng) {
    return TensorF::randn(std::move(shape), rng, std::sqrt(2.0 / fan_in));
  }

  netdetail::ConvBn make_convbn(int c_in, int c_out, int k, int stride, int pad, bool depthwise,
                                bool act, bool zero_gamma, Rng& rng) {
    netdetail::ConvBn cb;
    const int fan_in = depthwise ? k * k : c_in * k * k;
    cb.w = depthwise ? he_normal({c_out, 1, k, k}, fan_in, rng)
                     : he_normal({c_out, c_in, k, k}, fan_in, rng);
    cb.stride = stride;
    cb.pad = pad;
    cb.depthwise = depthwise;
    cb.act = act;
    cb.gamma = TensorF::filled({c_out}, zero_gamma ? 0.f : 1.f);
    cb.beta = TensorF::zeros({c_out});
    cb.run_mean = TensorF::zeros({c_out});
    cb.run_var = TensorF::filled({c_out}, 1.f);
    return cb;
  }

  void build(Rng& rng) {
    for (const auto& item : spec_.stem) {
      if (const auto* c = std::get_if<ConvSpec>(&item)) {
        stem_.emplace_back(make_convbn(c->c_in, c->c_out, c->k, c->stride, c->pad, false, true,
                                       false, rng));
      } else {
        stem_.emplace_back(std::get<PoolSpec>(item));
      }
    }

    const int d = spec_.controller_dim;
    const int K = spec_.num_categories;
    bool first_block = true;
    for (const auto& item : spec_.body) {
      if (const auto* c = std::get_if<ConvSpec>(&item)) {
        body_layout_.push_back(-1 - static_cast<int>(transitions_.size()));
        transitions_.push_back(make_convbn(c->c_in, c->c_out, c->k, c->stride, c->pad, false,
                                           true, false, rng));
        continue;
      }
      const auto& bs = std::get<BlockSpec>(item);
      body_layout_.push_back(static_cast<int>(blocks_.size()));
      netdetail::BlockLayers blk;
      blk.spec = &std::get<BlockSpec>(item);
      for (const auto& sub : bs.subs) {
        netdetail::SubBlockLayers sl;
        if (bs.kind == BlockKind::ResnetBottleneck) {
          sl.reduce = make_convbn(bs.c_in, sub.c1, 1, 1, 0, false, true, false, rng);
          sl.spatial = make_convbn(sub.c1, sub.c2, 3, bs.stride, 1, false, true, false, rng);
          sl.expand = make_convbn(sub.c2, bs.c_out, 1, 1, 0, false, false, true, rng);
        } else {
          sl.reduce = make_convbn(bs.c_in, sub.hidden, 1, 1, 0, false, true, false, rng);
          sl.spatial = make_convbn(sub.hidden, sub.hidden, 3, bs.stride, 1, true, true, false, rng);
          sl.expand = make_convbn(sub.hidden, bs.c_out, 1, 1, 0, false, false, true, rng);
        }
        blk.subs.push_back(std::move(sl));
      }
      if (!bs.has_identity) {
        blk.shortcut = make_convbn(bs.c_in, bs.c_out, 1, bs.stride, 0, false, false, false, rng);
      }
      blocks_.push_back(std::move(blk));

      netdetail::ControllerLayers ctrl;
      ctrl.first = first_block;
      ctrl.w1 = TensorF::randn({d, bs.c_in}, rng, std::sqrt(1.0 / bs.c_in));
      ctrl.b1 = TensorF::zeros({d});
      if (!first_block) {
        ctrl.w2 = TensorF::randn({d, d}, rng, std::sqrt(1.0 / d));
        ctrl.b2 = TensorF::zeros({d});
      }
      ctrl.w3 = TensorF::randn({2 * bs.n_sub, d}, rng, std::sqrt(1.0 / d));
      // off-logit bias -1.7, on-logit 0: initial P(on) ~= 0.85
      ctrl.b3 = TensorF::zeros({2 * bs.n_sub});
      for (int n = 0; n < bs.n_sub; ++n) ctrl.b3[2 * n] = -1.7f;
      ctrl.wcat = TensorF::randn({K, d}, rng, std::sqrt(1.0 / d));
      ctrl.bcat = TensorF::zeros({K});
      controllers_.push_back(std::move(ctrl));
      first_block = false;
    }

    const int feat = spec_.head_features();
    fc_w_ = TensorF::randn({spec_.num_classes, feat}, rng, std::sqrt(1.0 / feat));
    fc_b_ = TensorF::zeros({spec_.num_classes});
    data_mean_ = TensorF::zeros({3});
    data_std_ = TensorF::filled({3}, 1.f);
  }

  TensorF apply_convbn(netdetail::ConvBn& cb, const TensorF& x, bool training) {
    TensorF y = cb.depthwise ? depthwise_conv2d(x, cb.w, cb.stride, cb.pad)
                             : conv2d(x, cb.w, cb.stride, cb.pad);
    y = batch_norm(y, cb.gamma, cb.beta, cb.run_mean, cb.run_var, training);
    return cb.act ? relu(y) : y;
  }

  TensorF sub_forward(netdetail::SubBlockLayers& sl, const TensorF& x, bool training) {
    TensorF y = apply_convbn(sl.reduce, x, training);
    y = apply_convbn(sl.spatial, y, training);
    return apply_convbn(sl.expand, y, training);
  }

  ForwardRecord run(const TensorF& input, ExecMode mode, Rng& gate_rng, bool with_categories) {
    const bool training = (mode == ExecMode::Train);
    const int B = input.dim(0);
    ForwardRecord rec;
    rec.batch = B;

    TensorF x = input;
    for (auto& item : stem_) {
      if (auto* cb = std::get_if<netdetail::ConvBn>(&item)) {
        x = apply_convbn(*cb, x, training);
      } else {
        const auto& p = std::get<PoolSpec>(item);
        x = max_pool2d(x, p.k, p.stride, p.pad);
      }
    }

    std::optional<TensorF> h_state;
    for (int slot : body_layout_) {
      if (slot < 0) {
        x = apply_convbn(transitions_[static_cast<std::size_t>(-1 - slot)], x, training);
        continue;
      }
      auto& blk = blocks_[static_cast<std::size_t>(slot)];
      auto& ctrl = controllers_[static_cast<std::size_t>(slot)];
      const BlockSpec& bs = *blk.spec;

      TensorF V = spatial_embed(x, ctrl.w1, ctrl.b1);
      TensorF h = ctrl.first ? V : state_update(V, h_state, ctrl.w2, ctrl.b2);
      TensorF g = reshape(linear(h, ctrl.w3, ctrl.b3), {B, bs.n_sub, 2});

      std::vector<std::uint8_t> always(static_cast<std::size_t>(bs.n_sub), 0);
      for (int n = 0; n < bs.n_sub; ++n) always[static_cast<std::size_t>(n)] = bs.subs[static_cast<std::size_t>(n)].always_on;
      const std::vector<std::uint8_t>* forced_pattern =
          forced_ ? &(*forced_)[static_cast<std::size_t>(slot)] : nullptr;
      GateOutcome<float> outcome =
          decide(g, training ? GateMode::Train : GateMode::Eval, gate_rng, &always, forced_pattern);

      if (training && with_categories) {
        rec.category_probs.push_back(category_head(h, ctrl.wcat, ctrl.bcat));
      }

      TensorF acc = blk.shortcut ? apply_convbn(*blk.shortcut, x, training) : x;
      if (mode == ExecMode::EvalSkip) {
        for (std::size_t n = 0; n < blk.subs.size(); ++n) {
          if (!outcome.decisions.on(0, static_cast<int>(n))) continue;
          acc = add(acc, sub_forward(blk.subs[n], x, training));
        }
      } else {
        for (std::size_t n = 0; n < blk.subs.size(); ++n) {
          TensorF y = sub_forward(blk.subs[n], x, training);
          TensorF s_col = select_lastdim(outcome.gates, static_cast<int>(n));
          acc = add(acc, scale_per_sample(y, s_col));
        }
      }
      if (record_block_io_) rec.block_inputs.push_back(x.detach());
      x = bs.kind == BlockKind::ResnetBottleneck ? relu(acc) : acc;
      if (record_block_io_) rec.block_outputs.push_back(x.detach());

      rec.decisions.push_back(std::move(outcome.decisions));
      rec.gates.push_back(std::move(outcome.gates));
      h_state = h;
    }

    rec.logits = linear(global_avg_pool(x), fc_w_, fc_b_);

    rec.per_sample_flops.assign(static_cast<std::size_t>(B), flops_.ungated_total());
    for (std::size_t l = 0; l < rec.decisions.size(); ++l) {
      const auto& dec = rec.decisions[l];
      for (int b = 0; b < B; ++b)
        for (int n = 0; n < dec.n_sub; ++n)
          if (dec.on(b, n)) rec.per_sample_flops[static_cast<std::size_t>(b)] += flops_.blocks[l].sub[static_cast<std::size_t>(n)];
    }
    return rec;
  }
};

}  // namespace dmnn
