#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <utility>

#include "quantod/error.hpp"
#include "quantod/feature_store.hpp"

namespace quantod {

/// Per-dimension affine map x -> (x - shift) / scale.
struct Standardizer {
  Eigen::VectorXd shift;
  Eigen::VectorXd scale;

  std::size_t dim() const { return static_cast<std::size_t>(shift.size()); }

  /// Columns are samples.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    return (x.colwise() - shift).array().colwise() / scale.array();
  }
  Eigen::MatrixXd invert(const Eigen::MatrixXd& y) const {
    return (y.array().colwise() * scale.array()).matrix().colwise() + shift;
  }

  FeatureSet apply(const FeatureSet& set) const {
    FeatureSet out = set;
    out.data = apply(set.data.transpose()).transpose();
    return out;
  }

  /// log |d apply / dx|, identical for every sample.
  double log_jacobian() const { return -scale.array().log().sum(); }

  bool operator==(const Standardizer&) const = default;
};

/// Fits mean/std on `train` (population variance). Dimensions with zero
/// variance keep scale 1 and are only shifted.
inline std::pair<Standardizer, FeatureSet> standardize_fit_apply(const FeatureSet& train) {
  if (train.count() < 2) throw ShapeError("standardization needs at least 2 samples");
  const auto n = static_cast<double>(train.count());
  Standardizer t;
  t.shift = train.data.colwise().sum().transpose() / n;
  const RowMatrix centered = train.data.rowwise() - t.shift.transpose();
  const Eigen::VectorXd var = centered.array().square().colwise().sum().transpose() / n;
  t.scale.resize(var.size());
  for (Eigen::Index j = 0; j < var.size(); ++j) {
    const double floor = 1e-24 * (1.0 + t.shift[j] * t.shift[j]);
    t.scale[j] = var[j] > floor ? std::sqrt(var[j]) : 1.0;
  }
  return {t, t.apply(train)};
}

}  // namespace quantod
