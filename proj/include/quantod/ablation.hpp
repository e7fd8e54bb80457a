#pragma once

// Loss ablation: the same data and seeds trained once per loss setting
// (mean, or a quantile level), each run scored on held-out inliers and
// outliers.

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "quantod/config.hpp"
#include "quantod/metrics.hpp"
#include "quantod/quantile.hpp"
#include "quantod/synthetic.hpp"
#include "quantod/trainer.hpp"

namespace quantod {

/// std::nullopt is the mean-loss baseline.
using LossSetting = std::optional<double>;

inline std::string to_string(const LossSetting& s) { return s ? format_double(*s) : "mean"; }

/// "mean,0.05,0.5" -> {nullopt, 0.05, 0.5}.
inline std::vector<LossSetting> parse_loss_settings(const std::string& text) {
  std::vector<LossSetting> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    cell = KeyValueConfig::trim(cell);
    if (cell == "mean") {
      out.emplace_back(std::nullopt);
    } else {
      const double q = KeyValueConfig::to_double("q_list", cell);
      check_quantile_level(q);
      out.emplace_back(q);
    }
  }
  if (out.empty()) throw ShapeError("q_list is empty");
  return out;
}

struct AblationData {
  FeatureSet train;
  FeatureSet inlier_val;
  FeatureSet outlier;
};

/// Heavy-tail synthetic task drawn from `seed`.
inline AblationData heavy_tail_data(std::uint32_t dim, std::uint64_t seed, std::size_t n_train, std::size_t n_val,
                                    std::size_t n_out) {
  HeavyTailTask task = heavy_tail_task(dim, seed);
  AblationData d;
  d.train = sample(task.inliers, n_train);
  DistSpec held = task.inliers;
  held.seed = derive_stream(seed, 0x56414cULL)();
  d.inlier_val = sample(held, n_val);
  d.outlier = sample(task.outliers, n_out);
  return d;
}

struct AblationRecord {
  LossSetting setting;
  std::uint64_t seed = 0;
  EvalReport report;
  double p05_ll = 0.0;   // 5th percentile of held-out inlier log-likelihood
  double mean_ll = 0.0;  // mean held-out inlier log-likelihood

  void write(std::ostream& out) const {
    out.precision(17);
    out << "loss=" << to_string(setting) << " seed=" << seed << " fpr95=" << report.fpr95
        << " auroc=" << report.auroc << " aupr=" << report.aupr << " p05_ll=" << p05_ll << " mean_ll=" << mean_ll
        << '\n';
  }
};

inline AblationRecord run_ablation_cell(const AblationData& data, TrainConfig cfg, const LossSetting& setting,
                                        std::uint64_t seed) {
  cfg.seed = seed;
  if (setting) {
    cfg.loss_kind = LossKind::kQuantile;
    cfg.q = *setting;
  } else {
    cfg.loss_kind = LossKind::kMean;
  }
  const TrainResult trained = train(data.train, cfg);
  const Evaluation e = evaluate_detailed(trained.model, data.inlier_val, data.outlier);
  AblationRecord rec;
  rec.setting = setting;
  rec.seed = seed;
  rec.report = e.report;
  const auto& ll = e.inlier_scores.scores;
  rec.p05_ll = quantile(ll, 0.05).value;
  double sum = 0.0;
  for (double v : ll) sum += v;
  rec.mean_ll = sum / static_cast<double>(ll.size());
  return rec;
}

/// One record per (seed, setting), seeds outermost. `data_for_seed` supplies
/// the data of each seed.
inline std::vector<AblationRecord> run_ablation(const std::function<AblationData(std::uint64_t)>& data_for_seed,
                                                const TrainConfig& cfg, const std::vector<LossSetting>& settings,
                                                const std::vector<std::uint64_t>& seeds,
                                                const std::function<void(const AblationRecord&)>& on_record = {}) {
  std::vector<AblationRecord> out;
  for (std::uint64_t seed : seeds) {
    const AblationData data = data_for_seed(seed);
    for (const auto& s : settings) {
      out.push_back(run_ablation_cell(data, cfg, s, seed));
      if (on_record) on_record(out.back());
    }
  }
  return out;
}

}  // namespace quantod
