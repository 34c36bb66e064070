// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: runs every gate criterion end to end and prints one
// pass/fail line per criterion. Exits non-zero if any gated criterion
// fails. The long full-dataset run (criterion 10) is optional and reported
// as skipped; see README for how to launch it.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <algorithm>
#include <sstream>
#include <string>
#include <vector>

#include "dmnn/checkpoint.hpp"
#include "dmnn/controller.hpp"
#include "dmnn/flops.hpp"
#include "dmnn/grad_check.hpp"
#include "dmnn/network.hpp"
#include "dmnn/objectives.hpp"
#include "dmnn/ops.hpp"
#include "dmnn/report.hpp"
#include "dmnn/rng.hpp"
#include "dmnn/topology.hpp"
#include "dmnn/trainer.hpp"
#include "oracles.hpp"
#include "spec_walker.hpp"

namespace {

using dmnn::DmnnNetwork;
using dmnn::ExecMode;
using dmnn::Rng;
using dmnn::TensorD;
using dmnn::TensorF;

struct CriterionFailure : std::runtime_error {
  explicit CriterionFailure(const std::string& msg) : std::runtime_error(msg) {}
};

void require(bool cond, const std::string& msg) {
  if (!cond) throw CriterionFailure(msg);
}

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), pattern, args...);
  return std::string(buf);
}

// 1. Parameter parity of the split imagenet-scale preset.
std::string criterion_parameter_parity() {
  auto spec = dmnn::make_preset("dmnn50-imagenet", 2);
  const auto counts = dmnn::count_params(spec);
  require(counts.backbone_total >= 24000000ull && counts.backbone_total <= 25700000ull,
          fmt("total params %llu outside [24.0e6, 25.7e6]",
              static_cast<unsigned long long>(counts.backbone_total)));
  double max_gap = 0.0;
  for (const auto* b : spec.blocks()) {
    const double gap = dmnn::block_parity_gap(*b);
    require(gap <= 0.01, fmt("block parity gap %.4f exceeds 1%%", gap));
    max_gap = std::max(max_gap, gap);
  }
  return fmt("params %llu in [24.0e6, 25.7e6], worst block gap %.3f%%",
             static_cast<unsigned long long>(counts.backbone_total), 100.0 * max_gap);
}

// 2. Analytic controller cost against the base network.
std::string criterion_controller_overhead() {
  auto spec = dmnn::make_preset("dmnn50-imagenet", 2);
  auto table = dmnn::build_flops_table(spec, 224);
  const double base = static_cast<double>(table.total() - table.controllers_total());
  const double ratio = static_cast<double>(table.controllers_total()) / base;
  require(ratio > 0.0 && ratio <= 4e-4, fmt("controller overhead %.6g outside (0, 4e-4]", ratio));
  return fmt("controller/base = %.3g (limit 4e-4; base %.4g multiply-adds)", ratio, base);
}

// 3. Gradient integrity across every differentiable piece.
std::string criterion_gradient_integrity() {
  double worst = 0.0;
  auto track = [&worst](const char* what, double err, double limit = 1e-4) {
    require(err < limit, fmt("%s grad error %.3g exceeds %.1g", what, err, limit));
    worst = std::max(worst, err);
  };

  {
    Rng rng(5);
    TensorD x = TensorD::randn({2, 2, 5, 5}, rng);
    TensorD w = TensorD::randn({3, 2, 3, 3}, rng);
    track("conv2d", dmnn::grad_check([&] {
      auto y = dmnn::conv2d(x, w, 1, 1);
      return dmnn::sum(dmnn::mul(y, y));
    }, {x, w}));
  }
  {
    Rng rng(8);
    TensorD x = TensorD::randn({2, 3, 5, 5}, rng);
    TensorD w = TensorD::randn({3, 1, 3, 3}, rng);
    track("depthwise_conv2d", dmnn::grad_check([&] {
      auto y = dmnn::depthwise_conv2d(x, w, 2, 1);
      return dmnn::sum(dmnn::mul(y, y));
    }, {x, w}));
  }
  {
    Rng rng(3);
    TensorD x = TensorD::randn({3, 4}, rng);
    TensorD w = TensorD::randn({5, 4}, rng);
    TensorD b = TensorD::randn({5}, rng);
    track("linear", dmnn::grad_check([&] {
      auto y = dmnn::linear(x, w, b);
      return dmnn::sum(dmnn::mul(y, y));
    }, {x, w, b}));
  }
  {
    Rng rng(10);
    TensorD x = TensorD::randn({4, 2, 3, 3}, rng);
    TensorD gamma = TensorD::randn({2}, rng, 0.5, 1.0);
    TensorD beta = TensorD::randn({2}, rng, 0.5);
    track("batch_norm(train)", dmnn::grad_check([&] {
      TensorD rm = TensorD::zeros({2});
      TensorD rv = TensorD::filled({2}, 1.0);
      auto y = dmnn::batch_norm(x, gamma, beta, rm, rv, true);
      return dmnn::sum(dmnn::mul(y, y));
    }, {x, gamma, beta}));
  }
  {
    Rng rng(13);
    TensorD x = TensorD::randn({2, 3, 4, 4}, rng);
    track("global_avg_pool", dmnn::grad_check([&] {
      auto y = dmnn::global_avg_pool(x);
      return dmnn::sum(dmnn::mul(y, y));
    }, {x}));
  }
  {
    Rng rng(14);
    TensorD logits = TensorD::randn({3, 6}, rng);
    std::vector<int> labels{0, 5, 2};
    track("softmax+cross_entropy", dmnn::grad_check([&] {
      return dmnn::cross_entropy(dmnn::softmax_lastdim(logits), labels);
    }, {logits}));
  }
  {
    Rng rng(31);
    TensorD g = TensorD::randn({2, 2, 2}, rng);
    Rng noise(77);
    TensorD delta = dmnn::gumbel_sample<double>(g.shape(), noise);
    track("controller relaxed gate path", dmnn::grad_check([&] {
      TensorD p = dmnn::select_lastdim(dmnn::softmax_lastdim(dmnn::add(g, delta)), 1);
      return dmnn::sum_weighted(p, {1.0, 0.5});
    }, {g}));
  }
  {
    Rng rng(12);
    TensorD s1 = TensorD::randn({4, 2}, rng, 0.1, 0.5);
    TensorD s2 = TensorD::randn({4, 3}, rng, 0.1, 0.5);
    dmnn::FlopsTable t;
    t.stem = 500;
    dmnn::FlopsTable::BlockCost c1, c2;
    c1.sub = {100, 200};
    c2.sub = {50, 60, 70};
    t.blocks = {c1, c2};
    track("exec loss vs relaxed probabilities", dmnn::grad_check([&] {
      std::vector<TensorD> gates{s1, s2};
      return dmnn::exec_loss_t<double>(gates, 0.7);
    }, {s1, s2}));
    track("flops loss vs relaxed probabilities", dmnn::grad_check([&] {
      std::vector<TensorD> gates{s1, s2};
      return dmnn::flops_loss_t<double>(gates, t, 0.5);
    }, {s1, s2}));
  }
  return fmt("worst relative error %.3g (limit 1e-4, f64, eps 1e-3)", worst);
}

// 4. Gumbel-max fidelity and noise moments.
std::string criterion_gumbel_fidelity() {
  const int trials = 100000;
  TensorF g = TensorF::zeros({trials, 1, 2});
  for (int b = 0; b < trials; ++b)
    g.values()[static_cast<std::size_t>(b) * 2 + 1] = std::log(2.f);  // on logit ln2, off ln1
  Rng rng(20240);
  auto out = dmnn::decide(g, dmnn::GateMode::Train, rng);
  long on = 0;
  for (auto s : out.decisions.s) on += s;
  const double p_on = static_cast<double>(on) / trials;
  require(std::fabs(p_on - 2.0 / 3.0) <= 0.010, fmt("P(on) %.4f outside 0.667 +- 0.010", p_on));

  Rng grng(777);
  const int n = 1000000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    const double v = grng.gumbel();
    sum += v;
    sumsq += v * v;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  require(std::fabs(mean - 0.5772156649) <= 0.01, fmt("gumbel mean %.4f outside 0.577 +- 0.01", mean));
  require(std::fabs(var - 1.6449340668) <= 0.02, fmt("gumbel variance %.4f outside 1.645 +- 0.02", var));
  return fmt("P(on) %.4f (target 0.667 +- 0.010); mean %.4f, variance %.4f", p_on, mean, var);
}

// 5. FLOPs accounting equals instrumented execution exactly.
std::string criterion_flops_oracle() {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto spec = testutil::random_small_spec(seed);
    auto table = dmnn::build_flops_table(spec, spec.input_size);
    auto ref = testutil::instrumented_macs(spec, spec.input_size);
    require(table.total() == ref.total,
            fmt("table total %llu != instrumented %llu (spec seed %llu)",
                static_cast<unsigned long long>(table.total()),
                static_cast<unsigned long long>(ref.total),
                static_cast<unsigned long long>(seed)));
    for (std::size_t l = 0; l < table.blocks.size(); ++l)
      for (std::size_t i = 0; i < table.blocks[l].sub.size(); ++i)
        require(table.blocks[l].sub[i] == ref.per_sub[l][i],
                fmt("sub-block cost mismatch at block %zu sub %zu (spec seed %llu)", l, i,
                    static_cast<unsigned long long>(seed)));
  }

  auto spec = dmnn::make_preset("dmnn8-synthetic", 2);
  DmnnNetwork net(spec, 21);
  auto instrumented = testutil::instrumented_macs(spec, spec.input_size);
  Rng pat_rng(4242), in_rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::vector<std::uint8_t>> pattern;
    for (const auto* b : net.spec().blocks()) {
      std::vector<std::uint8_t> row(static_cast<std::size_t>(b->n_sub));
      for (auto& v : row) v = pat_rng.uniform() < 0.5 ? 1 : 0;
      pattern.push_back(row);
    }
    net.force_gates(pattern);
    TensorF x = TensorF::randn({1, 3, 32, 32}, in_rng, 0.5);
    Rng gate_rng(1);
    auto rec = net.forward(x, ExecMode::EvalSkip, gate_rng);
    const auto expect = testutil::instrumented_pattern_macs(instrumented, pattern);
    require(rec.per_sample_flops[0] == expect,
            fmt("recorded flops %llu != instrumented %llu (pattern %d)",
                static_cast<unsigned long long>(rec.per_sample_flops[0]),
                static_cast<unsigned long long>(expect), trial));
  }
  return "20 random specs and 10 gate patterns match the instrumented counter exactly";
}

// 6. Gating degeneracy: all-off identity blocks are a bit-exact identity;
// masked and skipping eval agree.
std::string criterion_gate_degeneracy() {
  DmnnNetwork net(dmnn::make_preset("dmnn8-synthetic", 2), 3);
  net.force_all_gates(false);
  net.set_record_block_io(true);
  Rng in_rng(31), gate_rng(1);
  TensorF x = TensorF::randn({2, 3, 32, 32}, in_rng, 0.5);
  auto rec = net.forward(x, ExecMode::EvalMasked, gate_rng);
  for (std::size_t l = 0; l < rec.block_inputs.size(); ++l) {
    const auto& a = rec.block_inputs[l].values();
    const auto& b = rec.block_outputs[l].values();
    require(a.size() == b.size() && 0 == std::memcmp(a.data(), b.data(), a.size() * sizeof(float)),
            fmt("identity block %zu output differs from its input with all gates off", l));
  }

  DmnnNetwork net2(dmnn::make_preset("dmnn8-synthetic", 3), 51);
  TensorF x1 = TensorF::randn({1, 3, 32, 32}, in_rng, 0.5);
  auto masked = net2.forward(x1, ExecMode::EvalMasked, gate_rng);
  auto skip = net2.forward(x1, ExecMode::EvalSkip, gate_rng);
  double md = 0;
  for (std::size_t i = 0; i < masked.logits.values().size(); ++i)
    md = std::max(md, std::fabs(static_cast<double>(masked.logits.values()[i]) -
                                skip.logits.values()[i]));
  require(md <= 1e-5, fmt("masked vs skipping eval differ by %.3g (> 1e-5)", md));
  return fmt("all-off identity blocks bit-exact; masked vs skipping max-abs %.3g", md);
}

dmnn::TrainConfig synthetic_config(double rate, int epochs, std::uint64_t seed) {
  dmnn::TrainConfig cfg;
  cfg.preset = "dmnn8-synthetic";
  cfg.n_sub = 2;
  cfg.target_rate = rate;
  cfg.batch_size = 64;
  cfg.epochs = epochs;  // 20 steps per epoch at 1280 samples
  cfg.synthetic_per_class = 128;
  cfg.lr = 0.05;
  cfg.lr_schedule = "cosine";
  cfg.seed = seed;
  cfg.category_supervision = true;
  cfg.augment = false;
  cfg.threads = 2;
  return cfg;
}

// 7. Resource targeting at r=0.5 and r=0.8 after 2,000 steps. The r=0.5
// model also feeds the execution-rate export property: per-category rate
// columns stay in a sane band and are not category-independent.
std::string criterion_resource_targeting() {
  std::ostringstream detail;
  for (double rate : {0.5, 0.8}) {
    auto cfg = synthetic_config(rate, 100, 11);
    auto result = dmnn::train(cfg);
    require(result.total_steps == 2000, fmt("expected 2000 steps, ran %d", result.total_steps));
    const auto& last = result.history.back();
    const double lo = rate - 0.05, hi = rate + 0.05;
    require(last.mean_exec_rate >= lo && last.mean_exec_rate <= hi,
            fmt("r=%.1f: mean execution rate %.4f outside [%.2f, %.2f]", rate,
                last.mean_exec_rate, lo, hi));
    require(std::fabs(last.flops_ratio - rate) <= 0.07,
            fmt("r=%.1f: flops ratio %.4f not within +-0.07 of target", rate, last.flops_ratio));
    detail << fmt("r=%.1f: exec %.3f, flops ratio %.3f; ", rate, last.mean_exec_rate,
                  last.flops_ratio);

    if (rate == 0.5) {
      dmnn::Dataset eval_ds = dmnn::synth_dataset(404, 10, 24);
      auto ev = dmnn::evaluate(result.network, eval_ds, 64);
      const std::string path = "acceptance_rates.csv";
      dmnn::write_rates_csv(ev, path);
      std::filesystem::remove(path);
      double spread = 0.0;
      for (int k = 0; k < ev.num_categories; ++k) {
        double mean = 0.0;
        int rows = 0;
        for (const auto& block : ev.rates_by_category)
          for (const auto& sub : block) {
            mean += sub[static_cast<std::size_t>(k)];
            ++rows;
          }
        mean /= rows;
        require(mean >= 0.3 && mean <= 0.9,
                fmt("rate-export column mean %.3f for category %d outside [0.3, 0.9]", mean, k));
      }
      for (const auto& block : ev.rates_by_category)
        for (const auto& sub : block) {
          const auto [mn, mx] = std::minmax_element(sub.begin(), sub.end());
          spread = std::max(spread, *mx - *mn);
        }
      require(spread > 1e-6, "execution rates are identical for every category");
    }
  }
  return detail.str() + "2000 steps each";
}

// 8. Learnability under budget: 95% train accuracy within 3,000 steps while
// staying within 1.1x the FLOPs target. 60 epochs = 1,200 steps, well
// inside the 3,000-step allowance.
std::string criterion_learnability() {
  const double rate = 0.7;
  auto cfg = synthetic_config(rate, 60, 7);
  auto result = dmnn::train(cfg);
  for (const auto& em : result.history) {
    const int steps_done = (em.epoch + 1) * 20;
    if (steps_done > 3000) break;
    if (em.top1_err <= 0.05 && em.flops_ratio <= 1.1 * rate) {
      return fmt("train accuracy %.1f%% at step %d with flops ratio %.3f <= %.3f",
                 100.0 * (1.0 - em.top1_err), steps_done, em.flops_ratio, 1.1 * rate);
    }
  }
  const auto& last = result.history.back();
  throw CriterionFailure(fmt(
      "no epoch within 3000 steps reached 95%% accuracy under budget (final err %.3f, ratio %.3f)",
      last.top1_err, last.flops_ratio));
}

// 9. Determinism of the loss trace and checkpoint persistence.
std::string criterion_determinism_persistence() {
  dmnn::TrainConfig cfg;
  cfg.preset = "dmnn8-synthetic";
  cfg.n_sub = 2;
  cfg.target_rate = 0.6;
  cfg.batch_size = 32;
  cfg.epochs = 5;  // 20 steps per epoch at 640 samples
  cfg.synthetic_per_class = 64;
  cfg.lr = 0.05;
  cfg.seed = 33;
  cfg.threads = 1;  // DMNN_THREADS=1 contract
  cfg.record_step_losses = 100;

  auto r1 = dmnn::train(cfg);
  auto r2 = dmnn::train(cfg);
  require(r1.step_losses.size() == 100 && r2.step_losses.size() == 100,
          "expected 100 recorded steps");
  require(0 == std::memcmp(r1.step_losses.data(), r2.step_losses.data(), 100 * sizeof(float)),
          "loss traces of two identical runs differ bitwise");

  const std::string path = "acceptance_ckpt.dmnn";
  dmnn::save_checkpoint(r1.network, path);
  auto loaded = dmnn::load_checkpoint(path);
  Rng in_rng(123), gate_rng(1);
  TensorF x = TensorF::randn({4, 3, 32, 32}, in_rng, 0.5);
  auto a = r1.network.forward(x, ExecMode::EvalMasked, gate_rng);
  auto b = loaded.forward(x, ExecMode::EvalMasked, gate_rng);
  require(0 == std::memcmp(a.logits.data(), b.logits.data(),
                           a.logits.values().size() * sizeof(float)),
          "checkpoint round-trip changed eval logits");
  std::filesystem::remove(path);
  return "100-step loss trace bitwise stable; checkpoint round-trip reproduces logits";
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<std::string()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "parameter parity", criterion_parameter_parity},
      {2, "controller overhead", criterion_controller_overhead},
      {3, "gradient integrity", criterion_gradient_integrity},
      {4, "gumbel-max fidelity", criterion_gumbel_fidelity},
      {5, "flops oracle equivalence", criterion_flops_oracle},
      {6, "gating degeneracy", criterion_gate_degeneracy},
      {7, "resource targeting", criterion_resource_targeting},
      {8, "learnability under budget", criterion_learnability},
      {9, "determinism and persistence", criterion_determinism_persistence},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    try {
      const std::string detail = c.run();
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::printf("[PASS] criterion %d: %s — %s (%.1fs)\n", c.id, c.name, detail.c_str(), secs);
    } catch (const std::exception& e) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::printf("[FAIL] criterion %d: %s — %s (%.1fs)\n", c.id, c.name, e.what(), secs);
      ++failures;
    }
    std::fflush(stdout);
  }
  std::printf(
      "[SKIP] criterion 10: full CIFAR-100 comparison run (optional, hours of compute; "
      "see README \"Extended run\")\n");
  return failures == 0 ? 0 : 1;
}
