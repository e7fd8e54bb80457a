#pragma once

// Interpolated batch quantile and the quantile / mean negative log-likelihood
// losses built on it.
//
// Convention: sort ascending (stable, so ties keep batch order), position
// p = q (B - 1), k = floor(p), w = p - k, value = (1 - w) v_(k) + w v_(k+1).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "quantod/error.hpp"

namespace quantod {

struct QuantileResult {
  double value = 0.0;
  std::size_t lo_index = 0;  // batch position of v_(k)
  std::size_t hi_index = 0;  // batch position of v_(k+1); equals lo_index when weight == 0
  double weight = 0.0;       // w, the share of v_(k+1)
};

inline void check_quantile_level(double q) {
  if (!(q >= 0.0 && q < 1.0)) throw ShapeError("quantile level must satisfy 0 <= q < 1, got " + std::to_string(q));
}

/// Interpolated order statistic at fractional sorted position `pos` in
/// [0, B - 1]; ties keep batch order.
inline QuantileResult quantile_at(std::span<const double> values, double pos) {
  if (values.empty()) throw ShapeError("quantile of an empty batch");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });

  const auto k = static_cast<std::size_t>(std::floor(pos));
  const double w = pos - static_cast<double>(k);

  QuantileResult r;
  r.lo_index = order[k];
  if (w == 0.0 || k + 1 >= values.size()) {
    r.value = values[r.lo_index];
    r.hi_index = r.lo_index;
    return r;
  }
  r.hi_index = order[k + 1];
  r.weight = w;
  r.value = (1.0 - w) * values[r.lo_index] + w * values[r.hi_index];
  return r;
}

/// p = q (B - 1), k = floor(p), w = p - k: (1 - w) v_(k) + w v_(k+1).
inline QuantileResult quantile(std::span<const double> values, double q) {
  if (values.empty()) throw ShapeError("quantile of an empty batch");
  check_quantile_level(q);
  return quantile_at(values, q * static_cast<double>(values.size() - 1));
}

struct QuantileSpec {
  double q = 0.05;
};

/// A batch loss together with d loss / d log p_i for every batch element.
struct LossResult {
  double value = 0.0;
  std::vector<std::size_t> active_indices;
  std::vector<double> weights;     // interpolation weights of active_indices, summing to 1
  std::vector<double> upstream;    // d value / d log_probs[i]

  std::size_t batch_size() const { return upstream.size(); }
};

/// Negated interpolated q-quantile of the batch log-likelihoods. Only the one
/// or two order statistics it interpolates receive gradient.
inline LossResult qnll_loss(std::span<const double> log_probs, const QuantileSpec& spec) {
  const QuantileResult qr = quantile(log_probs, spec.q);
  LossResult out;
  out.value = -qr.value;
  out.upstream.assign(log_probs.size(), 0.0);
  if (qr.weight == 0.0) {
    out.active_indices = {qr.lo_index};
    out.weights = {1.0};
  } else {
    out.active_indices = {qr.lo_index, qr.hi_index};
    out.weights = {1.0 - qr.weight, qr.weight};
  }
  for (std::size_t i = 0; i < out.active_indices.size(); ++i) {
    out.upstream[out.active_indices[i]] -= out.weights[i];
  }
  return out;
}

/// Negated batch mean of the log-likelihoods; every element is active.
inline LossResult mean_nll_loss(std::span<const double> log_probs) {
  if (log_probs.empty()) throw ShapeError("mean loss of an empty batch");
  const auto b = static_cast<double>(log_probs.size());
  LossResult out;
  out.value = -std::accumulate(log_probs.begin(), log_probs.end(), 0.0) / b;
  out.active_indices.resize(log_probs.size());
  std::iota(out.active_indices.begin(), out.active_indices.end(), std::size_t{0});
  out.weights.assign(log_probs.size(), 1.0 / b);
  out.upstream.assign(log_probs.size(), -1.0 / b);
  return out;
}

}  // namespace quantod
