#pragma once

// Outlier-detection metrics with inliers as the positive class.

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "quantod/detector.hpp"
#include "quantod/error.hpp"
#include "quantod/flow.hpp"

namespace quantod {

namespace detail {
inline void require_both(std::span<const double> in, std::span<const double> out) {
  if (in.empty() || out.empty()) throw ShapeError("metrics need at least one inlier and one outlier score");
}

/// Distinct score levels in descending order with the number of inliers and
/// outliers at each level.
struct ScoreBlock {
  double score;
  std::size_t in;
  std::size_t out;
};

inline std::vector<ScoreBlock> descending_blocks(std::span<const double> in, std::span<const double> out) {
  std::vector<std::pair<double, bool>> all;
  all.reserve(in.size() + out.size());
  for (double s : in) all.emplace_back(s, true);
  for (double s : out) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<ScoreBlock> blocks;
  for (const auto& [s, positive] : all) {
    if (blocks.empty() || blocks.back().score != s) blocks.push_back({s, 0, 0});
    (positive ? blocks.back().in : blocks.back().out) += 1;
  }
  return blocks;
}
}  // namespace detail

/// P(in > out) + 0.5 P(in = out), from the Mann-Whitney rank sum with
/// average ranks for ties.
inline double auroc(std::span<const double> in, std::span<const double> out) {
  detail::require_both(in, out);
  const auto blocks = detail::descending_blocks(in, out);
  // Ranks ascend from the lowest score, so walk the blocks from the back.
  double rank_sum = 0.0;
  double next_rank = 1.0;
  for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
    const double size = static_cast<double>(it->in + it->out);
    const double avg_rank = next_rank + (size - 1.0) / 2.0;
    rank_sum += avg_rank * static_cast<double>(it->in);
    next_rank += size;
  }
  const auto n_in = static_cast<double>(in.size());
  const auto n_out = static_cast<double>(out.size());
  return (rank_sum - n_in * (n_in + 1.0) / 2.0) / (n_in * n_out);
}

/// Fraction of outliers scoring >= tau, with tau the TPR-beta threshold of
/// the inlier scores.
inline double fpr_at_tpr(std::span<const double> in, std::span<const double> out, double beta = 0.95) {
  detail::require_both(in, out);
  const double tau = select_threshold(in, beta).tau;
  const auto accepted = std::count_if(out.begin(), out.end(), [&](double s) { return s >= tau; });
  return static_cast<double>(accepted) / static_cast<double>(out.size());
}

/// Average precision: sum over score blocks (descending, ties grouped) of
/// (R_k - R_{k-1}) * P_k.
inline double aupr(std::span<const double> in, std::span<const double> out) {
  detail::require_both(in, out);
  const auto n_in = static_cast<double>(in.size());
  double tp = 0.0;
  double fp = 0.0;
  double ap = 0.0;
  for (const auto& b : detail::descending_blocks(in, out)) {
    tp += static_cast<double>(b.in);
    fp += static_cast<double>(b.out);
    if (b.in > 0) ap += (static_cast<double>(b.in) / n_in) * (tp / (tp + fp));
  }
  return ap;
}

struct CurvePoint {
  double threshold;
  double fpr;
  double tpr;
  double precision;
};

/// ROC / PR operating points, one per distinct score (score >= threshold is
/// predicted inlier).
inline std::vector<CurvePoint> operating_points(std::span<const double> in, std::span<const double> out) {
  detail::require_both(in, out);
  std::vector<CurvePoint> pts;
  double tp = 0.0;
  double fp = 0.0;
  for (const auto& b : detail::descending_blocks(in, out)) {
    tp += static_cast<double>(b.in);
    fp += static_cast<double>(b.out);
    pts.push_back({b.score, fp / static_cast<double>(out.size()), tp / static_cast<double>(in.size()), tp / (tp + fp)});
  }
  return pts;
}

struct EvalReport {
  double fpr95 = 0.0;
  double auroc = 0.0;
  double aupr = 0.0;
  double tau = 0.0;
  double beta = 0.95;
  std::size_t n_in = 0;
  std::size_t n_out = 0;
  /// Scoring of both sets plus metric computation.
  double runtime_seconds = 0.0;

  void write_machine(std::ostream& out, bool with_time = true) const {
    out << std::setprecision(17) << "fpr95=" << fpr95 << "\nauroc=" << auroc << "\naupr=" << aupr << "\ntau=" << tau
        << "\nbeta=" << beta << "\nn_in=" << n_in << "\nn_out=" << n_out << '\n';
    if (with_time) out << "runtime_seconds=" << runtime_seconds << '\n';
  }

  void write_table(std::ostream& out) const {
    out << std::fixed << std::setprecision(2);
    out << "+-----------+-----------+----------+\n"
        << "| FPR95 (%) | AUROC (%) | AUPR (%) |\n"
        << "+-----------+-----------+----------+\n"
        << "| " << std::setw(9) << 100.0 * fpr95 << " | " << std::setw(9) << 100.0 * auroc << " | " << std::setw(8)
        << 100.0 * aupr << " |\n"
        << "+-----------+-----------+----------+\n";
    out << std::setprecision(6) << "tau = " << tau << " (beta = " << beta << "), inliers = " << n_in
        << ", outliers = " << n_out << ", scoring + metrics: " << std::setprecision(3) << runtime_seconds << " s\n";
    out.unsetf(std::ios::fixed);
  }
};

inline EvalReport evaluate_scores(std::span<const double> in, std::span<const double> out, double beta = 0.95) {
  EvalReport r;
  r.beta = beta;
  r.n_in = in.size();
  r.n_out = out.size();
  r.tau = select_threshold(in, beta).tau;
  r.fpr95 = fpr_at_tpr(in, out, beta);
  r.auroc = auroc(in, out);
  r.aupr = aupr(in, out);
  return r;
}

struct Evaluation {
  EvalReport report;
  ScoreSet inlier_scores;
  ScoreSet outlier_scores;
};

inline Evaluation evaluate_detailed(const FlowModel& model, const FeatureSet& inlier_val, const FeatureSet& outlier,
                                    double beta = 0.95) {
  const auto started = std::chrono::steady_clock::now();
  Evaluation e;
  e.inlier_scores = score(model, inlier_val);
  e.outlier_scores = score(model, outlier);
  e.report = evaluate_scores(e.inlier_scores.scores, e.outlier_scores.scores, beta);
  e.report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return e;
}

inline EvalReport evaluate(const FlowModel& model, const FeatureSet& inlier_val, const FeatureSet& outlier,
                           double beta = 0.95) {
  return evaluate_detailed(model, inlier_val, outlier, beta).report;
}

}  // namespace quantod
