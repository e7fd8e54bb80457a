#pragma once

// Scoring features under a trained flow, TPR-beta threshold selection and
// inlier/outlier decisions, plus the score and threshold file formats.
//
// QODS layout mirrors QODF with one value per sample:
//   "QODS" | u32 version=1 | u32 count N | u32 dim=1 | u8 has_labels | 3 pad
//   | N float32 scores | (has_labels) N u32 labels

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "quantod/binary_io.hpp"
#include "quantod/config.hpp"
#include "quantod/error.hpp"
#include "quantod/feature_store.hpp"
#include "quantod/flow.hpp"
#include "quantod/parallel.hpp"
#include "quantod/quantile.hpp"

namespace quantod {

struct ScoreSet {
  std::vector<double> scores;
  std::string source;
  std::string model_id;
  std::optional<std::vector<std::uint32_t>> labels;

  std::size_t size() const { return scores.size(); }
};

/// log p(r) for every row of `features`, in order.
inline ScoreSet score(const FlowModel& model, const FeatureSet& features, std::string model_id = {}) {
  if (model.mode != Mode::kInference) throw ShapeError("scoring requires an inference-mode model");
  if (features.dim() != model.dim()) {
    throw ShapeError("feature dimension " + std::to_string(features.dim()) + " does not match model dimension " +
                     std::to_string(model.dim()));
  }
  ScoreSet out;
  out.source = features.name;
  out.model_id = std::move(model_id);
  out.labels = features.labels;
  out.scores.resize(features.count());
  // Fixed-size slabs so the scores are identical for any thread count.
  constexpr std::size_t kSlab = 1024;
  const std::size_t n = features.count();
  const std::size_t slabs = (n + kSlab - 1) / kSlab;
  parallel_for(slabs, [&](std::size_t s) {
    const std::size_t begin = s * kSlab;
    const std::size_t end = std::min(n, begin + kSlab);
    const Eigen::MatrixXd x =
        features.data.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin))
            .transpose();
    const Eigen::VectorXd lp = log_prob(model, x);
    std::copy(lp.data(), lp.data() + lp.size(), out.scores.begin() + static_cast<std::ptrdiff_t>(begin));
  });
  return out;
}

struct Threshold {
  double tau = 0.0;
  double beta = 0.95;
  std::string calibration_id;
};

/// tau from inlier calibration scores: the interpolated (1 - beta)-quantile,
/// capped at the order statistic v_(N - ceil(beta N)) so that at least
/// ceil(beta N) calibration scores satisfy score >= tau.
inline Threshold select_threshold(std::span<const double> inlier_scores, double beta,
                                  std::string calibration_id = {}) {
  if (inlier_scores.empty()) throw ShapeError("threshold selection needs calibration scores");
  if (!(beta > 0.0 && beta < 1.0)) throw ShapeError("beta must be in (0, 1)");
  for (double s : inlier_scores) {
    if (!std::isfinite(s)) throw NumericError("non-finite calibration score");
  }
  // 1 - beta carried at 15 significant digits so that decimal levels such as
  // 0.95 give the decimal complement.
  char level_text[32];
  std::snprintf(level_text, sizeof level_text, "%.15g", 1.0 - beta);
  const double level = std::strtod(level_text, nullptr);
  const double interpolated =
      quantile_at(inlier_scores, level * static_cast<double>(inlier_scores.size() - 1)).value;

  std::vector<double> sorted(inlier_scores.begin(), inlier_scores.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const auto required = static_cast<std::size_t>(std::ceil(beta * static_cast<double>(n) - 1e-9));
  const double cap = sorted[n - std::max<std::size_t>(required, 1)];
  return Threshold{std::min(interpolated, cap), beta, std::move(calibration_id)};
}

inline Threshold select_threshold(const ScoreSet& inliers, double beta) {
  return select_threshold(inliers.scores, beta, inliers.source);
}

enum class Decision : std::uint8_t { kOutlier = 0, kInlier = 1 };

/// Inlier iff score >= tau.
inline Decision decide(double score, double tau) { return score >= tau ? Decision::kInlier : Decision::kOutlier; }

inline std::vector<Decision> decide(std::span<const double> scores, const Threshold& t) {
  std::vector<Decision> out;
  out.reserve(scores.size());
  for (double s : scores) out.push_back(decide(s, t.tau));
  return out;
}

inline std::vector<Decision> decide(const ScoreSet& scores, const Threshold& t) { return decide(scores.scores, t); }

// --- score files ---

inline void write_scores_text(const ScoreSet& s, std::ostream& out) {
  out << std::setprecision(17);
  for (std::size_t i = 0; i < s.scores.size(); ++i) out << i << ' ' << s.scores[i] << '\n';
}

inline void write_scores_text(const ScoreSet& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open for writing: " + path);
  write_scores_text(s, out);
}

inline ScoreSet read_scores_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open: " + path);
  ScoreSet s;
  s.source = path;
  std::string line;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::size_t idx = 0;
    std::string value;
    if (!(ls >> idx >> value) || idx != expected) throw InputError(path + ": malformed score line '" + line + "'");
    try {
      s.scores.push_back(std::stod(value));
    } catch (const std::exception&) {
      throw InputError(path + ": bad score '" + value + "'");
    }
    ++expected;
  }
  return s;
}

inline constexpr std::uint32_t kScoreFormatVersion = 1;

inline void save_scores(const ScoreSet& s, const std::string& path) {
  detail::ByteWriter out;
  out.magic("QODS");
  out.u32(kScoreFormatVersion);
  out.u32(static_cast<std::uint32_t>(s.scores.size()));
  out.u32(1);
  out.u8(s.labels ? 1 : 0);
  out.pad(3);
  for (double v : s.scores) out.f32(static_cast<float>(v));
  if (s.labels) {
    for (auto l : *s.labels) out.u32(l);
  }
  out.write_file(path);
}

inline ScoreSet load_scores(const std::string& path) {
  auto in = detail::ByteReader::from_file(path);
  if (!in.magic("QODS")) throw FormatError(FormatErrc::kBadMagic, path);
  if (const auto v = in.u32(); v != kScoreFormatVersion) {
    throw FormatError(FormatErrc::kVersionMismatch, path + " has version " + std::to_string(v));
  }
  const std::uint32_t n = in.u32();
  if (in.u32() != 1) throw ShapeError(path + ": score files have dim 1");
  const bool has_labels = in.u8() != 0;
  in.skip(3);
  const std::size_t payload = std::size_t{n} * 4 * (has_labels ? 2 : 1);
  in.need(payload);
  if (in.remaining() != payload) throw FormatError(FormatErrc::kTrailingBytes, path);
  ScoreSet s;
  s.source = path;
  s.scores.resize(n);
  for (auto& v : s.scores) {
    v = in.f32();
    if (!std::isfinite(v)) throw FormatError(FormatErrc::kNonFinite, path);
  }
  if (has_labels) {
    s.labels.emplace(n);
    for (auto& l : *s.labels) l = in.u32();
  }
  return s;
}

// --- threshold files: "key = value" lines ---

inline void write_threshold(const Threshold& t, std::ostream& out) {
  out << "tau = " << format_double(t.tau) << "\nbeta = " << format_double(t.beta)
      << "\ncalibration = " << t.calibration_id << '\n';
}

inline void save_threshold(const Threshold& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open for writing: " + path);
  write_threshold(t, out);
}

inline Threshold load_threshold(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  if (!kv.contains("tau") || !kv.contains("beta")) throw InputError(path + ": threshold file needs tau and beta");
  Threshold t;
  try {
    t.tau = std::stod(kv["tau"]);
    t.beta = std::stod(kv["beta"]);
  } catch (const std::exception&) {
    throw InputError(path + ": bad number in threshold file");
  }
  t.calibration_id = kv["calibration"];
  return t;
}

}  // namespace quantod
