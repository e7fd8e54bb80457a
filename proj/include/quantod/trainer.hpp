#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "quantod/error.hpp"
#include "quantod/feature_store.hpp"
#include "quantod/flow.hpp"
#include "quantod/quantile.hpp"
#include "quantod/rng.hpp"
#include "quantod/standardize.hpp"

namespace quantod {

enum class LossKind { kQuantile, kMean };

inline const char* to_string(LossKind k) { return k == LossKind::kQuantile ? "quantile" : "mean"; }

/// Flow-stage hyperparameters. Defaults are the published flow-stage
/// settings: Adam at 9e-5 with 1e-6 weight decay, dropout 0.3, batch 128,
/// 50 epochs, 8 blocks of 2 x 512 hidden units, clamp 3.0, q = 0.05.
struct TrainConfig {
  double q = 0.05;
  std::uint32_t epochs = 50;
  std::uint32_t batch_size = 128;
  double learning_rate = 9e-5;
  double weight_decay = 1e-6;
  double dropout = 0.3;
  std::uint32_t blocks = 8;
  std::uint32_t fc_layers = 2;
  std::uint32_t fc_neurons = 512;
  double clamp = 3.0;
  std::uint64_t seed = 0;
  bool standardize = false;
  LossKind loss_kind = LossKind::kQuantile;

  FlowShape shape(std::uint32_t dim) const {
    return FlowShape{dim, blocks, fc_layers, fc_neurons, clamp};
  }

  void validate() const {
    check_quantile_level(q);
    if (epochs < 1) throw ShapeError("epochs must be >= 1");
    if (batch_size < 1) throw ShapeError("batch_size must be >= 1");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw ShapeError("learning_rate must be positive");
    if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) throw ShapeError("weight_decay must be >= 0");
    if (!(dropout >= 0 && dropout < 1)) throw ShapeError("dropout must be in [0, 1)");
    if (blocks < 1) throw ShapeError("blocks must be >= 1");
    if (fc_neurons < 1) throw ShapeError("fc_neurons must be >= 1");
    if (!(clamp > 0) || !std::isfinite(clamp)) throw ShapeError("clamp must be positive");
  }
};

struct AdamState {
  std::vector<double> first;
  std::vector<double> second;
  std::uint64_t step = 0;

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  explicit AdamState(std::size_t n = 0) : first(n, 0.0), second(n, 0.0) {}
};

/// Bias-corrected Adam with coupled L2 weight decay (grad += wd * param
/// before the moment updates). A non-finite gradient leaves params and state
/// untouched and throws.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                      double weight_decay) {
  if (params.size() != grads.size() || state.first.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and state sizes differ");
  }
  const auto n = static_cast<Eigen::Index>(params.size());
  if (!Eigen::Map<const Eigen::ArrayXd>(grads.data(), n).allFinite()) {
    const auto bad = std::find_if(grads.begin(), grads.end(), [](double g) { return !std::isfinite(g); });
    throw NumericError("non-finite gradient at parameter " + std::to_string(bad - grads.begin()) +
                       "; step rejected");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(AdamState::kBeta1, t);
  const double c2 = 1.0 - std::pow(AdamState::kBeta2, t);
  constexpr Eigen::Index kSpan = 2048;
  for (Eigen::Index begin = 0; begin < n; begin += kSpan) {
    const Eigen::Index len = std::min(kSpan, n - begin);
    Eigen::Map<Eigen::ArrayXd> p(params.data() + begin, len);
    Eigen::Map<Eigen::ArrayXd> m1(state.first.data() + begin, len);
    Eigen::Map<Eigen::ArrayXd> m2(state.second.data() + begin, len);
    const Eigen::ArrayXd g = Eigen::Map<const Eigen::ArrayXd>(grads.data() + begin, len) + weight_decay * p;
    m1 = AdamState::kBeta1 * m1 + (1.0 - AdamState::kBeta1) * g;
    m2 = AdamState::kBeta2 * m2 + ((1.0 - AdamState::kBeta2) * g) * g;
    p -= lr * (m1 / c1) / ((m2 / c2).sqrt() + AdamState::kEpsilon);
  }
}

struct EpochRecord {
  std::uint32_t epoch = 0;     // 1-based
  double loss = 0.0;           // mean batch loss
  double min_ll = 0.0;         // smallest training log-likelihood seen in the epoch
  double median_ll = 0.0;      // median training log-likelihood over the epoch
  double seconds = 0.0;
  std::uint32_t rejected_steps = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<std::string> checkpoint_paths;

  /// One line per epoch: epoch loss min_ll median_ll seconds.
  void write(std::ostream& out, bool with_time = true) const {
    out.precision(17);
    for (const auto& e : epochs) {
      out << "epoch=" << e.epoch << " loss=" << e.loss << " min_ll=" << e.min_ll
          << " median_ll=" << e.median_ll;
      if (with_time) out << " seconds=" << e.seconds;
      out << '\n';
    }
  }
};

struct TrainOptions {
  /// When set, the model is written here after every epoch.
  std::string checkpoint_path;
  std::function<void(const FlowModel&, const EpochRecord&)> on_epoch;
};

struct TrainResult {
  FlowModel model;
  TrainLog log;
};

namespace detail {
inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}
}  // namespace detail

/// Fits a flow to `features`. The result is a function of (features, cfg)
/// only; the returned model is in inference mode.
inline TrainResult train(const FeatureSet& features, const TrainConfig& cfg, const TrainOptions& opts = {}) {
  cfg.validate();
  features.validate();
  if (features.count() == 0) throw ShapeError("cannot train on an empty feature set");
  if (cfg.batch_size > features.count()) {
    throw ShapeError("batch_size " + std::to_string(cfg.batch_size) + " exceeds sample count " +
                     std::to_string(features.count()));
  }

  TrainResult result{FlowModel::initialized(cfg.shape(static_cast<std::uint32_t>(features.dim())), cfg.seed), {}};
  FlowModel& model = result.model;
  if (cfg.standardize) model.input_transform = standardize_fit_apply(features).first;
  model.dropout = cfg.dropout;
  model.mode = Mode::kTraining;

  AdamState adam(model.parameter_count());
  std::vector<double> grad(model.parameter_count());
  auto dropout_rng = derive_stream(cfg.seed, 0x44524f50ULL);
  const BatchPlan plan{cfg.batch_size, cfg.seed, false};
  const QuantileSpec qspec{cfg.q};

  ForwardCache cache;
  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch + 1;
    std::vector<double> seen;
    seen.reserve(features.count());
    double loss_sum = 0.0;
    const auto batches = make_batches(features, plan, epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Eigen::MatrixXd x = features.gather(batches[bi]);
      Eigen::VectorXd lp;
      try {
        lp = log_prob(model, x, &cache, &dropout_rng);
      } catch (const NumericError& e) {
        throw NumericError("divergence at epoch " + std::to_string(epoch + 1) + " batch " +
                           std::to_string(bi) + ": " + e.what());
      }
      const std::span<const double> lps(lp.data(), static_cast<std::size_t>(lp.size()));
      const LossResult loss = cfg.loss_kind == LossKind::kQuantile ? qnll_loss(lps, qspec) : mean_nll_loss(lps);
      if (!std::isfinite(loss.value)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1) + " batch " +
                           std::to_string(bi));
      }
      loss_sum += loss.value;
      seen.insert(seen.end(), lps.begin(), lps.end());

      std::fill(grad.begin(), grad.end(), 0.0);
      backward(model, cache, loss.upstream, grad);

      std::vector<Eigen::MatrixXd> saved_mixing;
      for (std::size_t b = 0; b < model.block_count(); ++b) saved_mixing.emplace_back(model.mixing(b));
      try {
        adam_step(model.parameters(), grad, adam, cfg.learning_rate, cfg.weight_decay);
      } catch (const NumericError& e) {
        throw NumericError("divergence at epoch " + std::to_string(epoch + 1) + " batch " +
                           std::to_string(bi) + ": " + e.what());
      }
      // Keep every mixing matrix invertible: a step that makes one singular
      // is undone for that matrix.
      const MixingFactors factors(model);
      for (std::size_t b = 0; b < model.block_count(); ++b) {
        if (!std::isfinite(factors.log_abs_det[b]) || !(factors.lu[b].rcond() > 1e-12)) {
          model.mixing(b) = saved_mixing[b];
          ++rec.rejected_steps;
        }
      }
    }
    rec.loss = loss_sum / static_cast<double>(batches.size());
    rec.min_ll = *std::min_element(seen.begin(), seen.end());
    rec.median_ll = detail::median_of(std::move(seen));
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.epochs.push_back(rec);

    if (!opts.checkpoint_path.empty()) {
      save_model(model, opts.checkpoint_path);
      result.log.checkpoint_paths.push_back(opts.checkpoint_path);
    }
    if (opts.on_epoch) {
      model.mode = Mode::kInference;
      opts.on_epoch(model, rec);
      model.mode = Mode::kTraining;
    }
  }
  model.mode = Mode::kInference;
  return result;
}

}  // namespace quantod
