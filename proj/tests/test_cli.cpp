// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dmnn/config.hpp"
#include "dmnn/report.hpp"
#include "dmnn/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using dmnn::ExperimentConfig;

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

TEST(Config, UnknownKeyIsNamedInError) {
  nlohmann::json j{{"preset", "dmnn8-synthetic"}, {"learning_rate_typo", 0.1}};
  try {
    (void)dmnn::parse_experiment_config(j);
    FAIL() << "expected ConfigError";
  } catch (const dmnn::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate_typo"), std::string::npos);
  }
}

TEST(Config, RoundTripAndValidation) {
  nlohmann::json j{{"preset", "dmnn20-cifar"}, {"n_subblocks", 4}, {"target_rate", 0.7},
                   {"batch_size", 128},        {"lr_schedule", "step"}};
  ExperimentConfig cfg = dmnn::parse_experiment_config(j);
  EXPECT_EQ(cfg.train.preset, "dmnn20-cifar");
  EXPECT_EQ(cfg.train.n_sub, 4);
  EXPECT_EQ(cfg.train.batch_size, 128);

  // resolved copy parses back identically
  ExperimentConfig back = dmnn::parse_experiment_config(dmnn::to_json(cfg));
  EXPECT_EQ(dmnn::to_json(back).dump(), dmnn::to_json(cfg).dump());

  nlohmann::json bad{{"lr_schedule", "linear"}};
  EXPECT_THROW((void)dmnn::parse_experiment_config(bad), dmnn::ConfigError);
}

TEST(Report, MetricsCsvSchemaAndStability) {
  std::vector<dmnn::EpochMetrics> hist(2);
  hist[0].epoch = 0;
  hist[0].lr = 0.1;
  hist[0].loss_total = 1.5;
  hist[1].epoch = 1;
  hist[1].lr = 0.05;
  hist[1].top1_err = 0.25;

  const std::string path = "metrics_test.csv";
  dmnn::write_metrics_csv(hist, path);
  std::string a = slurp(path);
  dmnn::write_metrics_csv(hist, path);  // idempotent overwrite
  EXPECT_EQ(a, slurp(path));
  EXPECT_EQ(a.substr(0, a.find('\n')),
            "epoch,lr,loss_total,loss_cls,loss_ctg,loss_exec,loss_flops,top1_err,flops_ratio,"
            "mean_exec_rate,seconds");
  EXPECT_EQ(a.find('\r'), std::string::npos);  // LF endings only
  fs::remove(path);
}

TEST(Report, ForcedAllOnRatesAreAllOnes) {
  dmnn::TrainConfig cfg;
  cfg.preset = "dmnn8-synthetic";
  cfg.batch_size = 8;
  cfg.epochs = 1;
  cfg.synthetic_per_class = 8;
  cfg.seed = 2;
  auto r = dmnn::train(cfg);
  r.network.force_all_gates(true);

  dmnn::Dataset ds = dmnn::synth_dataset(21, 10, 3);
  auto ev = dmnn::evaluate(r.network, ds, 10);
  const std::string path = "rates_test.csv";
  dmnn::write_rates_csv(ev, path);

  std::string text = slurp(path);
  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);  // header
  int rows = 0;
  while (std::getline(lines, line)) {
    ++rows;
    std::size_t pos = 0;
    int col = 0;
    while (pos != std::string::npos) {
      const std::size_t next = line.find(',', pos);
      const std::string cell = line.substr(pos, next == std::string::npos ? next : next - pos);
      if (col >= 2) {
        EXPECT_EQ(cell, "1") << line;
      }
      pos = next == std::string::npos ? next : next + 1;
      ++col;
    }
    EXPECT_EQ(col, 2 + ev.num_categories);
  }
  int expected_rows = 0;
  for (const auto* b : r.network.spec().blocks()) expected_rows += b->n_sub;
  EXPECT_EQ(rows, expected_rows);
  fs::remove(path);
}

TEST(Report, EvalMeanMatchesHistogramMean) {
  dmnn::TrainConfig cfg;
  cfg.preset = "dmnn8-synthetic";
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.synthetic_per_class = 8;
  cfg.seed = 5;
  auto r = dmnn::train(cfg);

  dmnn::Dataset ds = dmnn::synth_dataset(22, 10, 6);
  auto ev = dmnn::evaluate(r.network, ds, 16);
  const std::string path = "hist_test.csv";
  auto q = dmnn::write_flops_hist_csv(ev, path);
  EXPECT_FALSE(q.q.empty());
  EXPECT_TRUE(fs::exists(path + ".quantiles.csv"));

  // parse the per-sample column and compare its mean to the eval mean
  std::string text = slurp(path);
  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "sample_id,coarse_label,fine_label,actual_flops");
  double sum = 0;
  long n = 0;
  while (std::getline(lines, line)) {
    const std::size_t last = line.rfind(',');
    sum += std::stod(line.substr(last + 1));
    ++n;
  }
  ASSERT_EQ(n, static_cast<long>(ds.size()));
  EXPECT_NEAR(sum / static_cast<double>(n), ev.mean_flops, 1e-6 * ev.mean_flops);
  fs::remove(path);
  fs::remove(path + ".quantiles.csv");
}

TEST(Report, FlopsReportMentionsTotalsAndBaseline) {
  const std::string text = dmnn::flops_report("dmnn8-synthetic", 2);
  EXPECT_NE(text.find("controller overhead"), std::string::npos);
  EXPECT_NE(text.find("ungated baseline"), std::string::npos);
  EXPECT_NE(text.find("totals"), std::string::npos);
}

// End-to-end run of the installed binary (path via DMNN_BIN).
TEST(CliBinary, TrainEvalExportRoundTrip) {
  const char* bin = std::getenv("DMNN_BIN");
  ASSERT_NE(bin, nullptr) << "DMNN_BIN not set";
  const fs::path dir = "cli_e2e_out";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "cfg.json");
    os << R"({"preset":"dmnn8-synthetic","n_subblocks":2,"target_rate":0.6,
              "batch_size":8,"epochs":2,"synthetic_per_class":8,"seed":3,
              "lr":0.05,"export_rates":true,"export_flops_hist":true})";
  }
  const std::string base = std::string(bin);
  auto run = [&](const std::string& args) {
    const std::string cmd = base + " " + args + " >> " + (dir / "log.txt").string() + " 2>&1";
    return std::system(cmd.c_str());
  };

  ASSERT_EQ(0, run("train --config " + (dir / "cfg.json").string() + " --out " + (dir / "run").string()));
  EXPECT_TRUE(fs::exists(dir / "run" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "run" / "config.json"));
  EXPECT_TRUE(fs::exists(dir / "run" / "final.dmnn"));
  EXPECT_TRUE(fs::exists(dir / "run" / "rates.csv"));
  EXPECT_TRUE(fs::exists(dir / "run" / "flops_hist.csv"));

  // idempotence: retraining with the same config reproduces metrics.csv
  // except the wall-clock column
  auto strip_seconds = [](const std::string& text) {
    std::istringstream lines(text);
    std::string line, out;
    while (std::getline(lines, line)) out += line.substr(0, line.rfind(',')) + "\n";
    return out;
  };
  const std::string metrics_a = slurp(dir / "run" / "metrics.csv");
  ASSERT_EQ(0, run("train --config " + (dir / "cfg.json").string() + " --out " + (dir / "run").string()));
  EXPECT_EQ(strip_seconds(metrics_a), strip_seconds(slurp(dir / "run" / "metrics.csv")));

  ASSERT_EQ(0, run("eval --checkpoint " + (dir / "run" / "final.dmnn").string() + " --data synthetic --seed 4"));
  ASSERT_EQ(0, run("flops --preset dmnn8-synthetic --n-subblocks 2 --out " + (dir / "spec.json").string()));
  {
    // the emitted network description file parses back to the same spec
    std::ifstream is(dir / "spec.json");
    nlohmann::json j;
    is >> j;
    dmnn::NetworkSpec spec = dmnn::spec_from_json(j);
    EXPECT_EQ(spec.name, "dmnn8-synthetic");
    EXPECT_EQ(spec.num_blocks(), 3);
  }
  ASSERT_EQ(0, run("export-rates --checkpoint " + (dir / "run" / "final.dmnn").string() +
                   " --data synthetic --out " + (dir / "rates2.csv").string()));
  EXPECT_TRUE(fs::exists(dir / "rates2.csv"));
  ASSERT_EQ(0, run("export-flops-hist --checkpoint " + (dir / "run" / "final.dmnn").string() +
                   " --data synthetic --out " + (dir / "hist2.csv").string()));
  EXPECT_TRUE(fs::exists(dir / "hist2.csv"));

  // bad config key fails loudly
  {
    std::ofstream os(dir / "bad.json");
    os << R"({"presett":"dmnn8-synthetic"})";
  }
  EXPECT_NE(0, run("train --config " + (dir / "bad.json").string()));
  fs::remove_all(dir);
}

}  // namespace
