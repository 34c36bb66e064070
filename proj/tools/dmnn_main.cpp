// SPDX-License-Identifier: Apache-2.0
//
// dmnn: train and analyse dynamic multi-path networks.
//
//   dmnn train            --config cfg.json [--seed N --out DIR ...]
//   dmnn eval             --checkpoint ckpt --data DIR|synthetic
//   dmnn flops            --preset NAME --n-subblocks N
//   dmnn export-rates     --checkpoint ckpt --data ... --out rates.csv
//   dmnn export-flops-hist --checkpoint ckpt --data ... --out hist.csv
//
// DMNN_THREADS caps worker threads (default 1, keeps runs reproducible).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "dmnn/checkpoint.hpp"
#include "dmnn/config.hpp"
#include "dmnn/csv.hpp"
#include "dmnn/report.hpp"
#include "dmnn/trainer.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string data;
  std::string preset;
  std::optional<int> n_subblocks;
  std::optional<double> target_rate;
  std::optional<int> batch;
};

dmnn::Dataset eval_dataset(const dmnn::NetworkSpec& spec, const std::string& data,
                           std::uint64_t seed) {
  if (data.empty() || data == "synthetic") {
    return dmnn::synth_dataset(dmnn::mix_seed(seed, 0x65766131ull), spec.num_classes, 32);
  }
  return dmnn::parse_cifar_file((std::filesystem::path(data) / "test.bin").string(),
                                dmnn::kCifarTestRecords, "test");
}

int cmd_train(const CommonFlags& flags) {
  dmnn::ExperimentConfig cfg;
  if (!flags.config_path.empty()) cfg = dmnn::load_experiment_config(flags.config_path);
  if (flags.seed) cfg.train.seed = *flags.seed;
  if (!flags.out.empty()) cfg.train.out_dir = flags.out;
  if (!flags.data.empty()) cfg.train.data_dir = flags.data;
  if (!flags.preset.empty()) cfg.train.preset = flags.preset;
  if (flags.n_subblocks) cfg.train.n_sub = *flags.n_subblocks;
  if (flags.target_rate) cfg.train.target_rate = *flags.target_rate;
  if (flags.batch) cfg.train.batch_size = *flags.batch;
  if (cfg.train.out_dir.empty()) cfg.train.out_dir = "runs/" + cfg.train.preset;

  std::filesystem::create_directories(cfg.train.out_dir);
  {
    std::ofstream os(std::filesystem::path(cfg.train.out_dir) / "config.json");
    os << dmnn::to_json(cfg).dump(2) << "\n";
  }

  dmnn::TrainResult result = dmnn::train(cfg.train);
  for (const auto& em : result.history) {
    std::printf("epoch %3d  lr %.5f  loss %.4f  top1_err %.4f  flops_ratio %.3f  exec %.3f  %.1fs\n",
                em.epoch, em.lr, em.loss_total, em.top1_err, em.flops_ratio, em.mean_exec_rate,
                em.seconds);
  }
  dmnn::write_metrics_csv(result.history,
                          (std::filesystem::path(cfg.train.out_dir) / "metrics.csv").string());

  if (cfg.export_rates || cfg.export_flops_hist) {
    dmnn::Dataset ds = eval_dataset(result.network.spec(), cfg.train.data_dir, cfg.train.seed);
    dmnn::EvalResult ev = dmnn::evaluate(result.network, ds, cfg.train.eval_batch);
    if (cfg.export_rates) {
      dmnn::write_rates_csv(ev, (std::filesystem::path(cfg.train.out_dir) / "rates.csv").string());
    }
    if (cfg.export_flops_hist) {
      dmnn::write_flops_hist_csv(
          ev, (std::filesystem::path(cfg.train.out_dir) / "flops_hist.csv").string());
    }
  }
  std::printf("metrics: %s\n", (std::filesystem::path(cfg.train.out_dir) / "metrics.csv").c_str());
  if (!result.best_checkpoint_path.empty())
    std::printf("best checkpoint: %s (top1_err %.4f)\n", result.best_checkpoint_path.c_str(),
                result.best_top1_err);
  return 0;
}

int cmd_eval(const CommonFlags& flags) {
  dmnn::DmnnNetwork net = dmnn::load_checkpoint(flags.checkpoint);
  dmnn::set_max_threads(dmnn::resolve_threads(0));
  dmnn::Dataset ds = eval_dataset(net.spec(), flags.data, flags.seed.value_or(1));
  dmnn::EvalResult ev = dmnn::evaluate(net, ds, flags.batch.value_or(128));
  const auto params = dmnn::count_params(net.spec());
  std::printf("top1_err     %.4f\n", ev.top1_err);
  std::printf("params       %llu (controllers %llu)\n",
              static_cast<unsigned long long>(params.backbone_total),
              static_cast<unsigned long long>(params.controller_total));
  std::printf("mean_flops   %.0f\n", ev.mean_flops);
  std::printf("flops_ratio  %.4f\n", ev.flops_ratio);
  return 0;
}

int cmd_flops(const CommonFlags& flags) {
  const std::string preset = flags.preset.empty() ? "dmnn50-imagenet" : flags.preset;
  const int n = flags.n_subblocks.value_or(2);
  // target-rate is accepted for interface symmetry; the table does not
  // depend on it
  std::fputs(dmnn::flops_report(preset, n).c_str(), stdout);
  if (!flags.out.empty()) {
    // resolved network description as a standalone file
    std::ofstream os(flags.out);
    os << dmnn::to_json(dmnn::make_preset(preset, n)).dump(2) << "\n";
    std::printf("wrote network spec: %s\n", flags.out.c_str());
  }
  return 0;
}

int cmd_export_rates(const CommonFlags& flags) {
  dmnn::DmnnNetwork net = dmnn::load_checkpoint(flags.checkpoint);
  dmnn::set_max_threads(dmnn::resolve_threads(0));
  dmnn::Dataset ds = eval_dataset(net.spec(), flags.data, flags.seed.value_or(1));
  dmnn::EvalResult ev = dmnn::evaluate(net, ds, flags.batch.value_or(128));
  dmnn::write_rates_csv(ev, flags.out);
  std::printf("wrote %s (%zu rows x %d categories)\n", flags.out.c_str(),
              ev.rates_by_category.size() ? ev.rates_by_category.size() * ev.rates_by_category[0].size() : 0,
              ev.num_categories);
  return 0;
}

int cmd_export_flops_hist(const CommonFlags& flags) {
  dmnn::DmnnNetwork net = dmnn::load_checkpoint(flags.checkpoint);
  dmnn::set_max_threads(dmnn::resolve_threads(0));
  dmnn::Dataset ds = eval_dataset(net.spec(), flags.data, flags.seed.value_or(1));
  dmnn::EvalResult ev = dmnn::evaluate(net, ds, flags.batch.value_or(128));
  dmnn::FlopsQuantiles q = dmnn::write_flops_hist_csv(ev, flags.out);
  std::printf("wrote %s (%zu samples)\n", flags.out.c_str(), ev.per_sample_flops.size());
  for (auto& [p, f] : q.q) std::printf("q%02.0f  %.0f\n", p * 100.0, f);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic multi-path network trainer and analyser"};
  app.require_subcommand(1);

  CommonFlags flags;
  auto add_common = [&flags](CLI::App* cmd) {
    cmd->add_option("--config", flags.config_path, "experiment config (json)");
    cmd->add_option("--seed", flags.seed, "random seed");
    cmd->add_option("--out", flags.out, "output directory or file");
    cmd->add_option("--checkpoint", flags.checkpoint, "checkpoint path");
    cmd->add_option("--data", flags.data, "dataset directory, or 'synthetic'");
    cmd->add_option("--preset", flags.preset, "network preset name");
    cmd->add_option("--n-subblocks", flags.n_subblocks, "sub-blocks per block");
    cmd->add_option("--target-rate", flags.target_rate, "target execution/flops rate");
    cmd->add_option("--batch", flags.batch, "batch size");
  };

  auto* train = app.add_subcommand("train", "train a network from a config");
  add_common(train);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->callback([&] {
    if (flags.checkpoint.empty()) throw CLI::ValidationError("eval requires --checkpoint");
  });
  auto* flops = app.add_subcommand("flops", "print per-block flops and params");
  add_common(flops);
  auto* rates = app.add_subcommand("export-rates", "per-category execution rates csv");
  add_common(rates);
  auto* hist = app.add_subcommand("export-flops-hist", "per-sample flops csv");
  add_common(hist);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(flags);
    if (eval->parsed()) return cmd_eval(flags);
    if (flops->parsed()) return cmd_flops(flags);
    if (rates->parsed()) return cmd_export_rates(flags);
    if (hist->parsed()) return cmd_export_flops_hist(flags);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
