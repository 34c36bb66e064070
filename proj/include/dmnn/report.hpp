// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "dmnn/csv.hpp"
#include "dmnn/flops.hpp"
#include "dmnn/topology.hpp"
#include "dmnn/trainer.hpp"

namespace dmnn {

inline const std::vector<std::string>& metrics_csv_header() {
  static const std::vector<std::string> header{
      "epoch",    "lr",          "loss_total", "loss_cls",       "loss_ctg", "loss_exec",
      "loss_flops", "top1_err", "flops_ratio", "mean_exec_rate", "seconds"};
  return header;
}

inline void write_metrics_csv(const std::vector<EpochMetrics>& history, const std::string& path) {
  CsvWriter csv(path, metrics_csv_header());
  for (const auto& em : history) {
    csv.row({csv_num(em.epoch), csv_num(em.lr), csv_num(em.loss_total), csv_num(em.loss_cls),
             csv_num(em.loss_ctg), csv_num(em.loss_exec), csv_num(em.loss_flops),
             csv_num(em.top1_err), csv_num(em.flops_ratio), csv_num(em.mean_exec_rate),
             csv_num(em.seconds)});
  }
}

/// Execution-rate matrix: one row per (block, sub_block), one column per
/// coarse category, cells in [0,1].
inline void write_rates_csv(const EvalResult& ev, const std::string& path) {
  std::vector<std::string> header{"block", "sub_block"};
  for (int k = 0; k < ev.num_categories; ++k) header.push_back("cat_" + std::to_string(k));
  CsvWriter csv(path, header);
  for (std::size_t l = 0; l < ev.rates_by_category.size(); ++l) {
    for (std::size_t s = 0; s < ev.rates_by_category[l].size(); ++s) {
      std::vector<std::string> row{csv_num(static_cast<int>(l)), csv_num(static_cast<int>(s))};
      for (double v : ev.rates_by_category[l][s]) row.push_back(csv_num(v));
      csv.row(row);
    }
  }
}

struct FlopsQuantiles {
  std::vector<std::pair<double, double>> q;  // (quantile, flops)
};

inline FlopsQuantiles flops_quantiles(const std::vector<u64>& per_sample) {
  FlopsQuantiles out;
  if (per_sample.empty()) return out;
  std::vector<u64> sorted = per_sample;
  std::sort(sorted.begin(), sorted.end());
  for (double q : {0.0, 0.05, 0.25, 0.5, 0.75, 0.95, 1.0}) {
    const auto idx = static_cast<std::size_t>(std::llround(q * static_cast<double>(sorted.size() - 1)));
    out.q.emplace_back(q, static_cast<double>(sorted[idx]));
  }
  return out;
}

/// Per-sample cost export: sample_id, coarse_label, fine_label,
/// actual_flops. Summary quantiles go to a sidecar csv next to the main
/// file and to the returned struct.
inline FlopsQuantiles write_flops_hist_csv(const EvalResult& ev, const std::string& path) {
  CsvWriter csv(path, {"sample_id", "coarse_label", "fine_label", "actual_flops"});
  for (std::size_t i = 0; i < ev.per_sample_flops.size(); ++i) {
    csv.row({csv_num(static_cast<int>(i)), csv_num(ev.coarse[i]), csv_num(ev.fine[i]),
             csv_num(ev.per_sample_flops[i])});
  }
  FlopsQuantiles q = flops_quantiles(ev.per_sample_flops);
  CsvWriter side(path + ".quantiles.csv", {"quantile", "actual_flops"});
  for (auto& [p, f] : q.q) side.row({csv_num(p), csv_num(f)});
  return q;
}

/// Human-readable per-block cost/parameter table with the ungated (N=1)
/// baseline as reference.
inline std::string flops_report(const std::string& preset, int n_sub, int resolution_override = 0) {
  NetworkSpec spec = make_preset(preset, n_sub);
  NetworkSpec base = make_preset(preset, 1);
  const int res = resolution_override > 0 ? resolution_override : spec.input_size;
  FlopsTable table = build_flops_table(spec, res);
  FlopsTable base_table = build_flops_table(base, res);
  ParamCounts params = count_params(spec);
  ParamCounts base_params = count_params(base);

  std::ostringstream os;
  os << "preset " << preset << "  N=" << n_sub << "  input " << res << "x" << res << "\n";
  os << "block  kind                 sub-block flops                    params     controller\n";
  const auto blocks = spec.blocks();
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    os << "  " << l << "    " << to_string(blocks[l]->kind) << "  ";
    os << "[";
    for (std::size_t i = 0; i < table.blocks[l].sub.size(); ++i) {
      if (i) os << " ";
      os << table.blocks[l].sub[i];
    }
    os << "]";
    if (table.blocks[l].downsample) os << " +shortcut " << table.blocks[l].downsample;
    os << "  " << params.blocks[l].backbone << "  " << table.blocks[l].controller << "\n";
  }
  const double ctrl_ratio = static_cast<double>(table.controllers_total()) /
                            static_cast<double>(table.total() - table.controllers_total());
  os << "totals: flops " << table.total() << " (gated " << table.gated_total() << ", ungated "
     << table.ungated_total() << ")\n";
  os << "params: backbone " << params.backbone_total << ", controllers " << params.controller_total
     << ", category heads " << params.category_head_total << " (dropped after training)\n";
  os << "controller overhead: " << csv_num(ctrl_ratio) << " of the base network flops\n";
  os << "ungated baseline (N=1): flops " << base_table.total() - base_table.controllers_total()
     << ", params " << base_params.backbone_total << "\n";
  os << "diff vs baseline: flops "
     << static_cast<long long>(table.total()) -
            static_cast<long long>(base_table.total() - base_table.controllers_total())
     << ", params "
     << static_cast<long long>(params.backbone_total) -
            static_cast<long long>(base_params.backbone_total) << "\n";
  return os.str();
}

}  // namespace dmnn
