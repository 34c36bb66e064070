// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "dmnn/trainer.hpp"

namespace dmnn {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Experiment description: the training setup plus export toggles.
struct ExperimentConfig {
  TrainConfig train;
  bool export_rates = false;
  bool export_flops_hist = false;
};

/// Strict parser: every key must be known, unknown keys fail by name.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  static const std::set<std::string> known{
      "preset",         "n_subblocks",       "target_rate",   "batch_size",
      "epochs",         "lr",                "lr_schedule",   "step_milestones",
      "momentum",       "weight_decay",      "seed",          "category_supervision",
      "augment",        "gating",            "dataset",       "data_dir",
      "synthetic_classes", "synthetic_per_class", "out_dir",  "max_steps",
      "eval_batch",     "threads",           "export_rates",  "export_flops_hist"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!known.count(key)) {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }

  ExperimentConfig cfg;
  TrainConfig& t = cfg.train;
  t.preset = j.value("preset", t.preset);
  t.n_sub = j.value("n_subblocks", t.n_sub);
  t.target_rate = j.value("target_rate", t.target_rate);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.epochs = j.value("epochs", t.epochs);
  t.lr = j.value("lr", t.lr);
  t.lr_schedule = j.value("lr_schedule", t.lr_schedule);
  if (j.contains("step_milestones")) t.step_milestones = j.at("step_milestones").get<std::vector<int>>();
  t.momentum = j.value("momentum", t.momentum);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.seed = j.value("seed", t.seed);
  t.category_supervision = j.value("category_supervision", t.category_supervision);
  t.augment = j.value("augment", t.augment);
  t.gating = j.value("gating", t.gating);
  t.dataset = j.value("dataset", t.dataset);
  t.data_dir = j.value("data_dir", t.data_dir);
  t.synthetic_classes = j.value("synthetic_classes", t.synthetic_classes);
  t.synthetic_per_class = j.value("synthetic_per_class", t.synthetic_per_class);
  t.out_dir = j.value("out_dir", t.out_dir);
  t.max_steps = j.value("max_steps", t.max_steps);
  t.eval_batch = j.value("eval_batch", t.eval_batch);
  t.threads = j.value("threads", t.threads);
  cfg.export_rates = j.value("export_rates", cfg.export_rates);
  cfg.export_flops_hist = j.value("export_flops_hist", cfg.export_flops_hist);

  if (t.lr_schedule != "cosine" && t.lr_schedule != "step") {
    throw ConfigError("config: lr_schedule must be 'cosine' or 'step', got '" + t.lr_schedule + "'");
  }
  if (t.gating != "learned" && t.gating != "all_on") {
    throw ConfigError("config: gating must be 'learned' or 'all_on', got '" + t.gating + "'");
  }
  if (t.dataset != "synthetic" && t.dataset != "cifar100") {
    throw ConfigError("config: dataset must be 'synthetic' or 'cifar100', got '" + t.dataset + "'");
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

/// Fully resolved copy, suitable for reproducing a run.
inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  const TrainConfig& t = cfg.train;
  return nlohmann::json{{"preset", t.preset},
                        {"n_subblocks", t.n_sub},
                        {"target_rate", t.target_rate},
                        {"batch_size", t.batch_size},
                        {"epochs", t.epochs},
                        {"lr", t.lr},
                        {"lr_schedule", t.lr_schedule},
                        {"step_milestones", t.step_milestones},
                        {"momentum", t.momentum},
                        {"weight_decay", t.weight_decay},
                        {"seed", t.seed},
                        {"category_supervision", t.category_supervision},
                        {"augment", t.augment},
                        {"gating", t.gating},
                        {"dataset", t.dataset},
                        {"data_dir", t.data_dir},
                        {"synthetic_classes", t.synthetic_classes},
                        {"synthetic_per_class", t.synthetic_per_class},
                        {"out_dir", t.out_dir},
                        {"max_steps", t.max_steps},
                        {"eval_batch", t.eval_batch},
                        {"threads", t.threads},
                        {"export_rates", cfg.export_rates},
                        {"export_flops_hist", cfg.export_flops_hist}};
}

}  // namespace dmnn
