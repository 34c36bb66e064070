// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmnn/checkpoint.hpp"
#include "dmnn/data.hpp"
#include "dmnn/network.hpp"
#include "dmnn/objectives.hpp"
#include "dmnn/optim.hpp"
#include "dmnn/threading.hpp"

namespace dmnn {

struct TrainConfig {
  std::string preset = "dmnn8-synthetic";
  int n_sub = 2;
  double target_rate = 0.5;
  int batch_size = 64;
  int epochs = 100;
  double lr = 0.05;
  std::string lr_schedule = "cosine";  // "cosine" | "step"
  std::vector<int> step_milestones{100, 150};
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  bool category_supervision = true;
  bool augment = true;
  std::string gating = "learned";  // "learned" | "all_on"
  std::string dataset = "synthetic";  // "synthetic" | "cifar100"
  std::string data_dir;
  int synthetic_classes = 10;
  int synthetic_per_class = 128;
  std::string out_dir;  // when set, checkpoints are written here
  int max_steps = 0;    // 0 = run every epoch to completion
  int eval_batch = 128;
  int threads = 0;  // 0 = DMNN_THREADS env (default 1)
  int record_step_losses = 200;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double loss_total = 0, loss_cls = 0, loss_ctg = 0, loss_exec = 0, loss_flops = 0;
  double top1_err = 0;        // training split, this epoch's forward passes
  double flops_ratio = 0;     // mean over steps of f / f_total
  double mean_exec_rate = 0;  // mean over steps and blocks of z_l
  std::vector<double> exec_rate_per_block;  // mean over steps of each z_l
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::vector<float> step_losses;
  std::string best_checkpoint_path;
  std::string final_checkpoint_path;
  double best_top1_err = 1.0;
  int total_steps = 0;
  DmnnNetwork network;
  NormStats norm;
};

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("DMNN_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 1;
}

inline Dataset load_train_split(const TrainConfig& cfg) {
  if (cfg.dataset == "synthetic") {
    return synth_dataset(cfg.seed, cfg.synthetic_classes, cfg.synthetic_per_class);
  }
  if (cfg.dataset == "cifar100") {
    return parse_cifar_file((std::filesystem::path(cfg.data_dir) / "train.bin").string(),
                            kCifarTrainRecords, "train");
  }
  throw std::invalid_argument("train: unknown dataset '" + cfg.dataset + "'");
}

/// Mini-batch training loop. Deterministic for a fixed (config, seed,
/// thread count): batch order, augmentation, and gate noise each derive
/// from dedicated per-epoch streams.
inline TrainResult train(const TrainConfig& cfg, const Dataset& train_ds) {
  set_max_threads(resolve_threads(cfg.threads));
  if (static_cast<int>(train_ds.size()) < cfg.batch_size) {
    throw std::invalid_argument("train: dataset smaller than one batch");
  }

  NetworkSpec spec = make_preset(cfg.preset, cfg.n_sub, cfg.target_rate);
  if (cfg.dataset == "synthetic") spec.num_categories = cfg.synthetic_classes;

  TrainResult result{.history = {},
                     .step_losses = {},
                     .best_checkpoint_path = {},
                     .final_checkpoint_path = {},
                     .best_top1_err = 1.0,
                     .total_steps = 0,
                     .network = DmnnNetwork(std::move(spec), cfg.seed),
                     .norm = compute_norm_stats(train_ds)};
  DmnnNetwork& net = result.network;
  net.set_normalization(result.norm.mean, result.norm.stddev);
  net.ensure_grad_tracking();
  if (cfg.gating == "all_on") net.force_all_gates(true);

  const LossWeights weights = LossWeights::staged(net.spec());
  const ResourceConfig resource(cfg.target_rate);
  const FlopsTable& table = net.flops();
  SgdOptimizer opt(net.parameters(), cfg.momentum, cfg.weight_decay);

  LrSchedule schedule;
  schedule.kind = cfg.lr_schedule == "step" ? LrSchedule::Kind::Step : LrSchedule::Kind::Cosine;
  schedule.lr0 = cfg.lr;
  schedule.milestones = cfg.step_milestones;
  schedule.total_epochs = cfg.epochs;

  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

  const int steps_per_epoch = static_cast<int>(train_ds.size()) / cfg.batch_size;
  std::vector<int> order(train_ds.size());
  std::iota(order.begin(), order.end(), 0);

  bool done = false;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const double lr = lr_at(schedule, epoch);

    Rng shuffle_rng(mix_seed(cfg.seed ^ 0x736875666cull, static_cast<std::uint64_t>(epoch)));
    Rng augment_rng(mix_seed(cfg.seed ^ 0x6175676dull, static_cast<std::uint64_t>(epoch)));
    Rng gate_rng(mix_seed(cfg.seed ^ 0x67617465ull, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    long correct = 0, seen = 0;
    int steps_done = 0;

    for (int step = 0; step < steps_per_epoch; ++step) {
      std::span<const int> batch_idx(order.data() + static_cast<std::size_t>(step) * cfg.batch_size,
                                     static_cast<std::size_t>(cfg.batch_size));
      TensorF x = make_batch(train_ds, batch_idx, result.norm, cfg.augment, augment_rng);
      const std::vector<int> fine = gather_labels(train_ds, batch_idx, false);
      const std::vector<int> coarse = gather_labels(train_ds, batch_idx, true);

      ForwardRecord rec = net.forward(x, ExecMode::Train, gate_rng, cfg.category_supervision);

      TensorF cls = cross_entropy(softmax_lastdim(rec.logits), fine);
      TensorF ctg = cfg.category_supervision
                        ? category_loss_t<float>(rec.category_probs, coarse, weights.alpha_per_block)
                        : TensorF::zeros({1});
      TensorF exec = exec_loss_t<float>(std::span<const TensorF>(rec.gates), resource.e);
      TensorF flops = flops_loss_t<float>(std::span<const TensorF>(rec.gates), table, resource.r);
      TensorF total = total_loss_t(cls, ctg, exec, flops, weights);

      opt.zero_grad();
      total.backward();
      opt.step(lr);

      em.loss_total += total[0];
      em.loss_cls += cls[0];
      em.loss_ctg += ctg[0];
      em.loss_exec += exec[0];
      em.loss_flops += flops[0];
      if (static_cast<int>(result.step_losses.size()) < cfg.record_step_losses)
        result.step_losses.push_back(total[0]);

      // hard-count statistics for reporting
      std::vector<BatchGateStats> st;
      st.reserve(rec.decisions.size());
      if (em.exec_rate_per_block.empty()) em.exec_rate_per_block.assign(rec.decisions.size(), 0.0);
      double z_mean = 0;
      for (std::size_t l = 0; l < rec.decisions.size(); ++l) {
        st.push_back(BatchGateStats::from_decisions(rec.decisions[l]));
        const double z = execution_rate(st.back());
        em.exec_rate_per_block[l] += z;
        z_mean += z;
      }
      em.mean_exec_rate += z_mean / static_cast<double>(st.size());
      em.flops_ratio += actual_flops(st, table) / static_cast<double>(table.total());

      for (int b = 0; b < cfg.batch_size; ++b) {
        const float* row = rec.logits.data() + static_cast<std::size_t>(b) * net.spec().num_classes;
        int arg = 0;
        for (int k = 1; k < net.spec().num_classes; ++k)
          if (row[k] > row[arg]) arg = k;
        correct += (arg == fine[static_cast<std::size_t>(b)]) ? 1 : 0;
        ++seen;
      }

      ++steps_done;
      ++result.total_steps;
      if (cfg.max_steps > 0 && result.total_steps >= cfg.max_steps) {
        done = true;
        break;
      }
    }

    const double inv = 1.0 / std::max(steps_done, 1);
    em.loss_total *= inv;
    em.loss_cls *= inv;
    em.loss_ctg *= inv;
    em.loss_exec *= inv;
    em.loss_flops *= inv;
    em.mean_exec_rate *= inv;
    em.flops_ratio *= inv;
    for (double& z : em.exec_rate_per_block) z *= inv;
    em.top1_err = seen > 0 ? 1.0 - static_cast<double>(correct) / static_cast<double>(seen) : 1.0;
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    result.history.push_back(em);

    if (!cfg.out_dir.empty() && em.top1_err <= result.best_top1_err) {
      result.best_checkpoint_path =
          (std::filesystem::path(cfg.out_dir) / "best.dmnn").string();
      save_checkpoint(net, result.best_checkpoint_path);
    }
    result.best_top1_err = std::min(result.best_top1_err, em.top1_err);
  }

  if (!cfg.out_dir.empty()) {
    result.final_checkpoint_path = (std::filesystem::path(cfg.out_dir) / "final.dmnn").string();
    save_checkpoint(net, result.final_checkpoint_path);
  }
  return result;
}

inline TrainResult train(const TrainConfig& cfg) { return train(cfg, load_train_split(cfg)); }

// ---- evaluation -------------------------------------------------------------

struct EvalResult {
  double top1_err = 1.0;
  double mean_flops = 0.0;   // mean per-sample multiply-adds
  double flops_ratio = 0.0;  // mean_flops / f_total
  std::vector<std::vector<double>> block_rates;                    // [block][sub]
  std::vector<std::vector<std::vector<double>>> rates_by_category; // [block][sub][category]
  std::vector<u64> per_sample_flops;
  std::vector<int> coarse;
  std::vector<int> fine;
  int num_categories = 0;
};

/// Batched masked evaluation: noiseless gates, running statistics, no
/// graph. Per-sample costs come from the recorded decisions and the
/// FLOPs table; execution rates are grouped by coarse category.
inline EvalResult evaluate(DmnnNetwork& net, const Dataset& ds, int batch = 128) {
  EvalResult res;
  const int K = net.spec().num_categories;
  res.num_categories = K;
  const auto blocks = net.spec().blocks();
  res.block_rates.resize(blocks.size());
  res.rates_by_category.resize(blocks.size());
  std::vector<std::vector<std::vector<long>>> on_count(blocks.size());
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    res.block_rates[l].assign(static_cast<std::size_t>(blocks[l]->n_sub), 0.0);
    res.rates_by_category[l].assign(static_cast<std::size_t>(blocks[l]->n_sub),
                                    std::vector<double>(static_cast<std::size_t>(K), 0.0));
    on_count[l].assign(static_cast<std::size_t>(blocks[l]->n_sub),
                       std::vector<long>(static_cast<std::size_t>(K), 0));
  }
  std::vector<long> category_count(static_cast<std::size_t>(K), 0);

  const NormStats norm{net.normalization_mean(), net.normalization_std()};
  Rng dummy(0);
  long correct = 0;
  double flops_sum = 0.0;

  std::vector<int> indices(ds.size());
  std::iota(indices.begin(), indices.end(), 0);
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(batch), indices.size() - start);
    std::span<const int> batch_idx(indices.data() + start, count);
    TensorF x = make_batch(ds, batch_idx, norm, false, dummy);
    ForwardRecord rec = net.forward(x, ExecMode::EvalMasked, dummy);

    const std::vector<int> fine = gather_labels(ds, batch_idx, false);
    const std::vector<int> coarse = gather_labels(ds, batch_idx, true);
    for (std::size_t b = 0; b < count; ++b) {
      const float* row = rec.logits.data() + b * static_cast<std::size_t>(net.spec().num_classes);
      int arg = 0;
      for (int k = 1; k < net.spec().num_classes; ++k)
        if (row[static_cast<std::size_t>(k)] > row[static_cast<std::size_t>(arg)]) arg = k;
      correct += (arg == fine[b]) ? 1 : 0;
      res.per_sample_flops.push_back(rec.per_sample_flops[b]);
      flops_sum += static_cast<double>(rec.per_sample_flops[b]);
      res.fine.push_back(fine[b]);
      res.coarse.push_back(coarse[b]);
      const int cat = std::min(coarse[b], K - 1);
      ++category_count[static_cast<std::size_t>(cat)];
      for (std::size_t l = 0; l < rec.decisions.size(); ++l)
        for (int n = 0; n < rec.decisions[l].n_sub; ++n)
          if (rec.decisions[l].on(static_cast<int>(b), n))
            ++on_count[l][static_cast<std::size_t>(n)][static_cast<std::size_t>(cat)];
    }
  }

  const double n = static_cast<double>(ds.size());
  res.top1_err = 1.0 - static_cast<double>(correct) / n;
  res.mean_flops = flops_sum / n;
  res.flops_ratio = res.mean_flops / static_cast<double>(net.flops().total());
  for (std::size_t l = 0; l < on_count.size(); ++l) {
    for (std::size_t s = 0; s < on_count[l].size(); ++s) {
      long total_on = 0;
      for (std::size_t k = 0; k < on_count[l][s].size(); ++k) {
        total_on += on_count[l][s][k];
        res.rates_by_category[l][s][k] =
            category_count[k] > 0 ? static_cast<double>(on_count[l][s][k]) / static_cast<double>(category_count[k])
                                  : 0.0;
      }
      res.block_rates[l][s] = static_cast<double>(total_on) / n;
    }
  }
  return res;
}

}  // namespace dmnn
