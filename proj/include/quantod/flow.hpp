#pragma once

// Invertible flow R^m -> R^m built from n blocks. Each block is an affine
// coupling followed by a dense invertible mixing matrix:
//
//   (u1, u2) = split(x)
//   v1 = u1 * exp(s2(u2)) + t2(u2)
//   v2 = u2 * exp(s1(v1)) + t1(v1)
//   y  = W [v1; v2]
//
// s and t of one coupling half come from a single MLP whose output is the
// concatenation [raw_s; t]; raw_s is bounded by clamp_scale. Gradients are
// computed by hand-written reverse mode over cached activations.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "quantod/error.hpp"
#include "quantod/feature_store.hpp"
#include "quantod/parallel.hpp"
#include "quantod/rng.hpp"
#include "quantod/standardize.hpp"

namespace quantod {

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// Columns processed together. Fixed so results never depend on how work is
/// split across threads.
inline constexpr Eigen::Index kChunkColumns = 64;

/// Flat storage with a fixed base alignment. Eigen's vectorised kernels peel
/// unaligned heads, so the rounding of a sum can depend on where a buffer
/// happens to start; a fixed alignment keeps results bitwise reproducible.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

/// Architecture hyperparameters. `hidden_layers` counts hidden layers only,
/// so an MLP has hidden_layers + 1 linear maps.
struct FlowShape {
  std::uint32_t dim = 0;
  std::uint32_t blocks = 8;
  std::uint32_t hidden_layers = 2;
  std::uint32_t hidden_width = 512;
  double clamp = 3.0;

  std::size_t half() const { return dim / 2; }

  void validate() const {
    if (dim < 2 || dim % 2 != 0) throw ShapeError("flow dimension must be even and >= 2");
    if (blocks < 1) throw ShapeError("flow needs at least one block");
    if (hidden_width < 1) throw ShapeError("hidden width must be positive");
    if (!(clamp > 0) || !std::isfinite(clamp)) throw ShapeError("clamp must be positive");
  }

  bool operator==(const FlowShape&) const = default;
};

/// Soft clamp alpha * tanh(raw / alpha): odd, monotone, bounded by alpha,
/// unit slope at zero.
inline double clamp_scale(double raw, double alpha) { return alpha * std::tanh(raw / alpha); }

template <typename Derived>
Eigen::MatrixXd clamp_scale(const Eigen::MatrixBase<Derived>& raw, double alpha) {
  return (alpha * (raw.array() / alpha).tanh()).matrix();
}

enum class Mode { kTraining, kInference };

enum class Net : int { kA = 0, kB = 1 };

/// Offsets of one dense layer inside the flat parameter vector. The weight
/// is stored row-major (rows = outputs).
struct DenseRef {
  std::size_t weight = 0;
  std::size_t bias = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

/// Flow parameters in one flat vector. Order, per block: net A layers, net B
/// layers (each layer weight then bias), then the m x m mixing matrix. This
/// is also the checkpoint order.
class FlowModel {
 public:
  FlowModel() = default;

  /// All MLP parameters zero and every mixing matrix the identity: the flow
  /// is the identity map.
  explicit FlowModel(const FlowShape& shape) : shape_(shape) {
    shape_.validate();
    std::size_t offset = 0;
    const auto h = static_cast<Eigen::Index>(shape_.half());
    const auto m = static_cast<Eigen::Index>(shape_.dim);
    const auto w = static_cast<Eigen::Index>(shape_.hidden_width);
    blocks_.resize(shape_.blocks);
    for (auto& block : blocks_) {
      for (auto& net : block.nets) {
        Eigen::Index in = h;
        for (std::uint32_t k = 0; k <= shape_.hidden_layers; ++k) {
          const Eigen::Index out = k == shape_.hidden_layers ? m : w;
          DenseRef ref{offset, offset + static_cast<std::size_t>(out * in), out, in};
          offset = ref.bias + static_cast<std::size_t>(out);
          net.push_back(ref);
          in = out;
        }
      }
      block.mixing = offset;
      offset += static_cast<std::size_t>(m * m);
    }
    params_.assign(offset, 0.0);
    for (std::size_t b = 0; b < blocks_.size(); ++b) mixing(b).setIdentity();
  }

  /// Hidden layers He-normal, output layers zero (each block starts as the
  /// identity coupling), mixing matrices random orthogonal.
  static FlowModel initialized(const FlowShape& shape, std::uint64_t seed) {
    FlowModel model(shape);
    auto rng = derive_stream(seed, 0x494e4954ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t b = 0; b < model.block_count(); ++b) {
      for (Net net : {Net::kA, Net::kB}) {
        const auto& layers = model.layers(b, net);
        for (std::size_t k = 0; k + 1 < layers.size(); ++k) {
          const double std_dev = std::sqrt(2.0 / static_cast<double>(layers[k].cols));
          auto w = model.weight(layers[k]);
          for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = std_dev * normal(rng);
        }
      }
      Eigen::MatrixXd gauss(shape.dim, shape.dim);
      for (Eigen::Index i = 0; i < gauss.size(); ++i) gauss.data()[i] = normal(rng);
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
      Eigen::MatrixXd q = qr.householderQ();
      const Eigen::MatrixXd& r = qr.matrixQR();
      for (Eigen::Index j = 0; j < q.cols(); ++j) {
        if (r(j, j) < 0) q.col(j) *= -1.0;
      }
      model.mixing(b) = q;
    }
    return model;
  }

  const FlowShape& shape() const { return shape_; }
  std::size_t dim() const { return shape_.dim; }
  std::size_t block_count() const { return blocks_.size(); }

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.size(); }

  const std::vector<DenseRef>& layers(std::size_t block, Net net) const {
    return blocks_[block].nets[static_cast<int>(net)];
  }
  std::size_t mixing_offset(std::size_t block) const { return blocks_[block].mixing; }

  ConstRowMap weight(const DenseRef& r) const { return {params_.data() + r.weight, r.rows, r.cols}; }
  RowMap weight(const DenseRef& r) { return {params_.data() + r.weight, r.rows, r.cols}; }
  ConstVecMap bias(const DenseRef& r) const { return {params_.data() + r.bias, r.rows}; }
  VecMap bias(const DenseRef& r) { return {params_.data() + r.bias, r.rows}; }

  ConstRowMap mixing(std::size_t block) const {
    const auto m = static_cast<Eigen::Index>(shape_.dim);
    return {params_.data() + blocks_[block].mixing, m, m};
  }
  RowMap mixing(std::size_t block) {
    const auto m = static_cast<Eigen::Index>(shape_.dim);
    return {params_.data() + blocks_[block].mixing, m, m};
  }

  bool operator==(const FlowModel& o) const {
    return shape_ == o.shape_ && params_ == o.params_ && input_transform == o.input_transform;
  }

  Mode mode = Mode::kInference;
  double dropout = 0.0;
  /// Applied to raw features before the flow; its log-Jacobian is part of
  /// log_prob.
  std::optional<Standardizer> input_transform;

 private:
  struct BlockLayout {
    std::vector<DenseRef> nets[2];
    std::size_t mixing = 0;
  };

  FlowShape shape_;
  AlignedBuffer params_;
  std::vector<BlockLayout> blocks_;
};

/// Gradient buffer views with the model's layout.
inline RowMap grad_weight(std::span<double> g, const DenseRef& r) {
  return {g.data() + r.weight, r.rows, r.cols};
}
inline VecMap grad_bias(std::span<double> g, const DenseRef& r) { return {g.data() + r.bias, r.rows}; }
inline RowMap grad_mixing(std::span<double> g, const FlowModel& model, std::size_t block) {
  const auto m = static_cast<Eigen::Index>(model.dim());
  return {g.data() + model.mixing_offset(block), m, m};
}

/// LU factorizations of every mixing matrix.
struct MixingFactors {
  std::vector<Eigen::PartialPivLU<Eigen::MatrixXd>> lu;
  std::vector<double> log_abs_det;
  double total_log_abs_det = 0.0;

  explicit MixingFactors(const FlowModel& model) {
    lu.reserve(model.block_count());
    for (std::size_t b = 0; b < model.block_count(); ++b) {
      lu.emplace_back(Eigen::MatrixXd(model.mixing(b)));
      const auto& packed = lu.back().matrixLU();
      double s = 0.0;
      for (Eigen::Index i = 0; i < packed.rows(); ++i) s += std::log(std::abs(packed(i, i)));
      log_abs_det.push_back(s);
      total_log_abs_det += s;
    }
  }
};

/// True when every mixing matrix has a finite log|det| and is not
/// numerically singular.
inline bool mixing_invertible(const FlowModel& model, double min_rcond = 1e-12) {
  MixingFactors f(model);
  for (std::size_t b = 0; b < f.lu.size(); ++b) {
    if (!std::isfinite(f.log_abs_det[b]) || !(f.lu[b].rcond() > min_rcond)) return false;
  }
  return true;
}

struct MlpCache {
  std::vector<Eigen::MatrixXd> inputs;  // input of each linear layer
  std::vector<Eigen::MatrixXd> gates;   // d(hidden activation)/d(pre-activation), dropout included
};

struct BlockCache {
  Eigen::MatrixXd u1, u2, v1, v2, s1, s2;
  MlpCache net_a, net_b;
};

struct ChunkCache {
  std::vector<BlockCache> blocks;
};

/// Activations recorded by a forward pass, consumed by backward().
struct ForwardCache {
  std::vector<ChunkCache> chunks;
  Eigen::MatrixXd z;
  Eigen::VectorXd log_det;

  bool empty() const { return chunks.empty(); }
  Eigen::Index columns() const { return z.cols(); }
};

struct FlowOutput {
  Eigen::MatrixXd z;
  Eigen::VectorXd log_det;
};

namespace detail {

inline Eigen::MatrixXd mlp_forward(const FlowModel& model, std::size_t block, Net net,
                                   const Eigen::MatrixXd& x, SplitMix64* dropout_rng,
                                   MlpCache* cache) {
  const auto& layers = model.layers(block, net);
  const double p = model.dropout;
  const bool drop = dropout_rng != nullptr && p > 0.0;
  const double keep_scale = drop ? 1.0 / (1.0 - p) : 1.0;
  if (cache) {
    cache->inputs.clear();
    cache->gates.clear();
  }
  Eigen::MatrixXd h = x;
  for (std::size_t k = 0;; ++k) {
    const auto& ref = layers[k];
    Eigen::MatrixXd pre = model.weight(ref) * h;
    pre.colwise() += model.bias(ref);
    if (cache) cache->inputs.push_back(h);
    if (k + 1 == layers.size()) return pre;
    if (!drop && !cache) {
      h = pre.cwiseMax(0.0);
      continue;
    }
    Eigen::MatrixXd gate = (pre.array() > 0.0).cast<double>().matrix();
    if (drop) {
      for (Eigen::Index i = 0; i < gate.size(); ++i) {
        gate.data()[i] *= dropout_rng->uniform() < p ? 0.0 : keep_scale;
      }
    }
    h = pre.cwiseProduct(gate);
    if (cache) cache->gates.push_back(std::move(gate));
  }
}

/// Returns d loss / d input; accumulates parameter gradients into `grad`.
inline Eigen::MatrixXd mlp_backward(const FlowModel& model, std::size_t block, Net net,
                                    Eigen::MatrixXd d_out, const MlpCache& cache,
                                    std::span<double> grad) {
  const auto& layers = model.layers(block, net);
  for (std::size_t k = layers.size(); k-- > 0;) {
    const auto& ref = layers[k];
    grad_weight(grad, ref).noalias() += d_out * cache.inputs[k].transpose();
    grad_bias(grad, ref) += d_out.rowwise().sum();
    Eigen::MatrixXd d_in = model.weight(ref).transpose() * d_out;
    if (k == 0) return d_in;
    d_out = d_in.cwiseProduct(cache.gates[k - 1]);
  }
  return {};
}

inline Eigen::MatrixXd block_forward(const FlowModel& model, std::size_t b, const Eigen::MatrixXd& x,
                                     const Eigen::MatrixXd& mixing, Eigen::Ref<Eigen::VectorXd> log_det,
                                     SplitMix64* rng, BlockCache* cache) {
  const auto h = static_cast<Eigen::Index>(model.shape().half());
  const double alpha = model.shape().clamp;
  Eigen::MatrixXd u1 = x.topRows(h);
  Eigen::MatrixXd u2 = x.bottomRows(h);

  const Eigen::MatrixXd out_a =
      mlp_forward(model, b, Net::kA, u2, rng, cache ? &cache->net_a : nullptr);
  Eigen::MatrixXd s2 = clamp_scale(out_a.topRows(h), alpha);
  Eigen::MatrixXd v1 = u1.cwiseProduct(s2.array().exp().matrix()) + out_a.bottomRows(h);

  const Eigen::MatrixXd out_b =
      mlp_forward(model, b, Net::kB, v1, rng, cache ? &cache->net_b : nullptr);
  Eigen::MatrixXd s1 = clamp_scale(out_b.topRows(h), alpha);
  Eigen::MatrixXd v2 = u2.cwiseProduct(s1.array().exp().matrix()) + out_b.bottomRows(h);

  log_det += (s1.colwise().sum() + s2.colwise().sum()).transpose();

  Eigen::MatrixXd y = mixing.leftCols(h) * v1 + mixing.rightCols(h) * v2;
  if (cache) {
    cache->u1 = std::move(u1);
    cache->u2 = std::move(u2);
    cache->v1 = std::move(v1);
    cache->v2 = std::move(v2);
    cache->s1 = std::move(s1);
    cache->s2 = std::move(s2);
  }
  return y;
}

inline void check_finite(const Eigen::MatrixXd& m, std::size_t block, const char* stage) {
  if (!m.allFinite()) {
    throw NumericError(std::string("non-finite value in ") + stage + " of block " +
                       std::to_string(block));
  }
}

/// Block-b activations of the given batch columns, gathered across chunks.
inline BlockCache gather(const ForwardCache& cache, std::size_t b, std::span<const Eigen::Index> cols) {
  const auto k = static_cast<Eigen::Index>(cols.size());
  auto at = [&](std::size_t j) -> const BlockCache& {
    return cache.chunks[static_cast<std::size_t>(cols[j] / kChunkColumns)].blocks[b];
  };
  auto pick = [&](auto field) {
    Eigen::MatrixXd out(field(at(0)).rows(), k);
    for (Eigen::Index j = 0; j < k; ++j) {
      out.col(j) = field(at(static_cast<std::size_t>(j))).col(cols[static_cast<std::size_t>(j)] % kChunkColumns);
    }
    return out;
  };
  auto pick_mlp = [&](auto net) {
    MlpCache out;
    const MlpCache& first = net(at(0));
    for (std::size_t i = 0; i < first.inputs.size(); ++i) {
      out.inputs.push_back(pick([&](const BlockCache& c) -> const Eigen::MatrixXd& { return net(c).inputs[i]; }));
    }
    for (std::size_t i = 0; i < first.gates.size(); ++i) {
      out.gates.push_back(pick([&](const BlockCache& c) -> const Eigen::MatrixXd& { return net(c).gates[i]; }));
    }
    return out;
  };
  BlockCache out;
  out.u1 = pick([](const BlockCache& c) -> const Eigen::MatrixXd& { return c.u1; });
  out.u2 = pick([](const BlockCache& c) -> const Eigen::MatrixXd& { return c.u2; });
  out.v1 = pick([](const BlockCache& c) -> const Eigen::MatrixXd& { return c.v1; });
  out.v2 = pick([](const BlockCache& c) -> const Eigen::MatrixXd& { return c.v2; });
  out.s1 = pick([](const BlockCache& c) -> const Eigen::MatrixXd& { return c.s1; });
  out.s2 = pick([](const BlockCache& c) -> const Eigen::MatrixXd& { return c.s2; });
  out.net_a = pick_mlp([](const BlockCache& c) -> const MlpCache& { return c.net_a; });
  out.net_b = pick_mlp([](const BlockCache& c) -> const MlpCache& { return c.net_b; });
  return out;
}

}  // namespace detail

/// z = f(r) and log|det df/dr| per sample. `r` holds one sample per column.
/// In training mode with a positive dropout rate, `dropout_rng` drives the
/// masks; it is ignored in inference mode.
inline FlowOutput forward(const FlowModel& model, const Eigen::MatrixXd& r,
                          ForwardCache* cache = nullptr, SplitMix64* dropout_rng = nullptr) {
  if (static_cast<std::size_t>(r.rows()) != model.dim()) {
    throw ShapeError("input dimension " + std::to_string(r.rows()) + " does not match flow dimension " +
                     std::to_string(model.dim()));
  }
  if (!r.allFinite()) throw NumericError("non-finite flow input");
  const bool use_dropout = model.mode == Mode::kTraining && model.dropout > 0.0;
  if (use_dropout && dropout_rng == nullptr) {
    throw std::logic_error("training-mode forward with dropout needs a random stream");
  }

  const MixingFactors factors(model);
  std::vector<Eigen::MatrixXd> mixing;
  for (std::size_t b = 0; b < model.block_count(); ++b) mixing.emplace_back(model.mixing(b));

  const Eigen::Index n = r.cols();
  const auto n_chunks = static_cast<std::size_t>((n + kChunkColumns - 1) / kChunkColumns);
  std::vector<SplitMix64> chunk_rngs;
  for (std::size_t c = 0; c < n_chunks; ++c) {
    chunk_rngs.push_back(use_dropout ? dropout_rng->split() : SplitMix64(0));
  }

  FlowOutput out{Eigen::MatrixXd(r.rows(), n), Eigen::VectorXd::Constant(n, factors.total_log_abs_det)};
  if (cache) {
    cache->chunks.assign(n_chunks, ChunkCache{});
  }
  parallel_for(n_chunks, [&](std::size_t c) {
    const Eigen::Index begin = static_cast<Eigen::Index>(c) * kChunkColumns;
    const Eigen::Index width = std::min(kChunkColumns, n - begin);
    Eigen::MatrixXd x = r.middleCols(begin, width);
    Eigen::VectorXd ld = Eigen::VectorXd::Zero(width);
    ChunkCache* cc = cache ? &cache->chunks[c] : nullptr;
    if (cc) cc->blocks.resize(model.block_count());
    for (std::size_t b = 0; b < model.block_count(); ++b) {
      x = detail::block_forward(model, b, x, mixing[b], ld, use_dropout ? &chunk_rngs[c] : nullptr,
                                cc ? &cc->blocks[b] : nullptr);
      detail::check_finite(x, b, "forward");
    }
    out.z.middleCols(begin, width) = x;
    out.log_det.segment(begin, width) += ld;
  });
  if (cache) {
    cache->z = out.z;
    cache->log_det = out.log_det;
  }
  return out;
}

inline FlowOutput forward(const FlowModel& model, const Eigen::VectorXd& r) {
  return forward(model, Eigen::MatrixXd(r));
}

/// One block in isolation (inference mode), for per-block checks.
inline Eigen::MatrixXd forward_block(const FlowModel& model, std::size_t b, const Eigen::MatrixXd& x,
                                     Eigen::VectorXd* log_det = nullptr) {
  Eigen::VectorXd ld = Eigen::VectorXd::Zero(x.cols());
  const Eigen::MatrixXd w = model.mixing(b);
  Eigen::MatrixXd y = detail::block_forward(model, b, x, w, ld, nullptr, nullptr);
  if (log_det) *log_det = ld.array() + MixingFactors(model).log_abs_det[b];
  return y;
}

namespace detail {
inline Eigen::MatrixXd block_inverse(const FlowModel& model, std::size_t b,
                                     const Eigen::PartialPivLU<Eigen::MatrixXd>& lu,
                                     const Eigen::MatrixXd& y) {
  const auto h = static_cast<Eigen::Index>(model.shape().half());
  const double alpha = model.shape().clamp;
  const Eigen::MatrixXd v = lu.solve(y);
  const Eigen::MatrixXd v1 = v.topRows(h);
  const Eigen::MatrixXd v2 = v.bottomRows(h);
  const Eigen::MatrixXd out_b = mlp_forward(model, b, Net::kB, v1, nullptr, nullptr);
  const Eigen::MatrixXd s1 = clamp_scale(out_b.topRows(h), alpha);
  Eigen::MatrixXd x(y.rows(), y.cols());
  x.bottomRows(h) = (v2 - out_b.bottomRows(h)).cwiseProduct((-s1).array().exp().matrix());
  const Eigen::MatrixXd out_a = mlp_forward(model, b, Net::kA, x.bottomRows(h), nullptr, nullptr);
  const Eigen::MatrixXd s2 = clamp_scale(out_a.topRows(h), alpha);
  x.topRows(h) = (v1 - out_a.bottomRows(h)).cwiseProduct((-s2).array().exp().matrix());
  return x;
}
}  // namespace detail

inline Eigen::MatrixXd inverse_block(const FlowModel& model, std::size_t b, const Eigen::MatrixXd& y) {
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu{Eigen::MatrixXd(model.mixing(b))};
  return detail::block_inverse(model, b, lu, y);
}

/// r = f^{-1}(z), blocks undone in reverse order. Dropout is never applied.
inline Eigen::MatrixXd inverse(const FlowModel& model, const Eigen::MatrixXd& z) {
  if (static_cast<std::size_t>(z.rows()) != model.dim()) throw ShapeError("latent dimension mismatch");
  if (!z.allFinite()) throw NumericError("non-finite latent input");
  const MixingFactors factors(model);
  for (std::size_t b = 0; b < factors.lu.size(); ++b) {
    if (!std::isfinite(factors.log_abs_det[b])) {
      throw NumericError("singular mixing matrix in block " + std::to_string(b));
    }
  }
  Eigen::MatrixXd x = z;
  for (std::size_t b = model.block_count(); b-- > 0;) {
    x = detail::block_inverse(model, b, factors.lu[b], x);
    detail::check_finite(x, b, "inverse");
  }
  return x;
}

/// Exact log-density of raw samples (columns) under the standard-normal base:
/// -0.5 (m log 2pi + |z|^2) + log_det, plus the input transform's log-Jacobian.
inline Eigen::VectorXd log_prob(const FlowModel& model, const Eigen::MatrixXd& r,
                                ForwardCache* cache = nullptr, SplitMix64* dropout_rng = nullptr) {
  double offset = 0.0;
  FlowOutput out;
  if (model.input_transform) {
    if (model.input_transform->dim() != model.dim()) throw ShapeError("input transform dimension mismatch");
    offset = model.input_transform->log_jacobian();
    out = forward(model, model.input_transform->apply(r), cache, dropout_rng);
  } else {
    out = forward(model, r, cache, dropout_rng);
  }
  const double m = static_cast<double>(model.dim());
  return (-0.5 * (m * kLog2Pi + out.z.colwise().squaredNorm().array()) + out.log_det.transpose().array() + offset)
      .transpose()
      .matrix();
}

/// Accumulates dL/dtheta for L = sum_i upstream[i] * log p(r_i) into `grad`.
/// Only samples with a nonzero upstream weight are back-propagated.
inline void backward(const FlowModel& model, const ForwardCache& cache, std::span<const double> upstream,
                     std::span<double> grad) {
  if (cache.empty()) throw std::logic_error("backward called without a forward cache");
  if (static_cast<Eigen::Index>(upstream.size()) != cache.columns()) {
    throw ShapeError("upstream weight count does not match cached batch");
  }
  if (grad.size() != model.parameter_count()) throw ShapeError("gradient buffer size mismatch");
  for (double u : upstream) {
    if (!std::isfinite(u)) throw NumericError("non-finite upstream weight");
  }

  const auto h = static_cast<Eigen::Index>(model.shape().half());
  const double alpha = model.shape().clamp;
  std::vector<Eigen::MatrixXd> mixing_inv_t;
  {
    const MixingFactors factors(model);
    for (const auto& lu : factors.lu) mixing_inv_t.push_back(lu.inverse().transpose());
  }

  // Active columns in batch order, in groups of at most kChunkColumns. A
  // group that is exactly one cached chunk reuses that chunk's cache.
  std::vector<Eigen::Index> active;
  for (std::size_t i = 0; i < upstream.size(); ++i) {
    if (upstream[i] != 0.0) active.push_back(static_cast<Eigen::Index>(i));
  }
  const std::size_t groups = (active.size() + kChunkColumns - 1) / kChunkColumns;
  std::vector<AlignedBuffer> partial(groups > 1 ? groups : 0);

  parallel_for(groups, [&](std::size_t gi) {
    const std::size_t first = gi * kChunkColumns;
    const std::span<const Eigen::Index> cols(active.data() + first,
                                             std::min<std::size_t>(kChunkColumns, active.size() - first));
    const auto k = static_cast<Eigen::Index>(cols.size());
    const std::size_t chunk = static_cast<std::size_t>(cols[0] / kChunkColumns);
    const bool whole_chunk = cols[0] % kChunkColumns == 0 && cols.back() - cols[0] == k - 1 &&
                             k == cache.chunks[chunk].blocks[0].u1.cols();
    Eigen::RowVectorXd w(k);
    Eigen::MatrixXd z(model.dim(), k);
    for (Eigen::Index j = 0; j < k; ++j) {
      w[j] = upstream[static_cast<std::size_t>(cols[static_cast<std::size_t>(j)])];
      z.col(j) = cache.z.col(cols[static_cast<std::size_t>(j)]);
    }
    const double w_sum = w.sum();
    std::span<double> g = grad;
    if (groups > 1) {
      partial[gi].assign(model.parameter_count(), 0.0);
      g = partial[gi];
    }

    // d log p / d z = -z ; d log p / d log_det = 1
    Eigen::MatrixXd dy = -(z.array().rowwise() * w.array()).matrix();
    for (std::size_t b = model.block_count(); b-- > 0;) {
      const BlockCache gathered = whole_chunk ? BlockCache{} : detail::gather(cache, b, cols);
      const BlockCache& bc = whole_chunk ? cache.chunks[chunk].blocks[b] : gathered;

      auto gw = grad_mixing(g, model, b);
      gw.leftCols(h).noalias() += dy * bc.v1.transpose();
      gw.rightCols(h).noalias() += dy * bc.v2.transpose();
      gw += w_sum * mixing_inv_t[b];
      const Eigen::MatrixXd dv = model.mixing(b).transpose() * dy;
      Eigen::MatrixXd dv1 = dv.topRows(h);
      const Eigen::MatrixXd dv2 = dv.bottomRows(h);

      const Eigen::ArrayXXd e1 = bc.s1.array().exp();
      Eigen::MatrixXd du2 = (dv2.array() * e1).matrix();
      Eigen::ArrayXXd ds1 = dv2.array() * bc.u2.array() * e1;
      ds1.rowwise() += w.array();
      Eigen::MatrixXd d_out_b(2 * h, k);
      d_out_b.topRows(h) = (ds1 * (1.0 - (bc.s1.array() / alpha).square())).matrix();
      d_out_b.bottomRows(h) = dv2;
      dv1 += detail::mlp_backward(model, b, Net::kB, std::move(d_out_b), bc.net_b, g);

      const Eigen::ArrayXXd e2 = bc.s2.array().exp();
      Eigen::MatrixXd du1 = (dv1.array() * e2).matrix();
      Eigen::ArrayXXd ds2 = dv1.array() * bc.u1.array() * e2;
      ds2.rowwise() += w.array();
      Eigen::MatrixXd d_out_a(2 * h, k);
      d_out_a.topRows(h) = (ds2 * (1.0 - (bc.s2.array() / alpha).square())).matrix();
      d_out_a.bottomRows(h) = dv1;
      du2 += detail::mlp_backward(model, b, Net::kA, std::move(d_out_a), bc.net_a, g);

      dy.resize(2 * h, k);
      dy.topRows(h) = du1;
      dy.bottomRows(h) = du2;
    }
  });

  for (const auto& p : partial) {
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += p[i];
  }
}

// Checkpoint format (little-endian):
//   "QODM" | u32 version=1 | u32 m | u32 n | u32 L | u32 h | f64 clamp
//   | parameters as f64 in FlowModel order
//   | u32 has_transform | (has_transform) m f64 shift, m f64 scale

inline constexpr std::uint32_t kModelFormatVersion = 1;

inline std::vector<char> serialize_model(const FlowModel& model) {
  detail::ByteWriter out;
  const auto& s = model.shape();
  out.magic("QODM");
  out.u32(kModelFormatVersion);
  out.u32(s.dim);
  out.u32(s.blocks);
  out.u32(s.hidden_layers);
  out.u32(s.hidden_width);
  out.f64(s.clamp);
  for (double p : model.parameters()) out.f64(p);
  out.u32(model.input_transform ? 1 : 0);
  if (model.input_transform) {
    for (double v : model.input_transform->shift) out.f64(v);
    for (double v : model.input_transform->scale) out.f64(v);
  }
  return out.bytes();
}

inline void save_model(const FlowModel& model, const std::string& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed: " + path);
}

inline FlowModel load_model(const std::string& path) {
  auto in = detail::ByteReader::from_file(path);
  if (!in.magic("QODM")) throw FormatError(FormatErrc::kBadMagic, path);
  const std::uint32_t version = in.u32();
  if (version != kModelFormatVersion) {
    throw FormatError(FormatErrc::kVersionMismatch, path + " has version " + std::to_string(version));
  }
  FlowShape shape;
  shape.dim = in.u32();
  if (shape.dim < 2 || shape.dim % 2 != 0) {
    throw FormatError(FormatErrc::kOddDimension, path + " declares dim " + std::to_string(shape.dim));
  }
  shape.blocks = in.u32();
  shape.hidden_layers = in.u32();
  shape.hidden_width = in.u32();
  shape.clamp = in.f64();
  FlowModel model(shape);
  in.need(model.parameter_count() * 8);
  for (double& p : model.parameters()) {
    p = in.f64();
    if (!std::isfinite(p)) throw FormatError(FormatErrc::kNonFinite, path + " parameter");
  }
  if (in.u32() != 0) {
    Standardizer t;
    t.shift.resize(shape.dim);
    t.scale.resize(shape.dim);
    for (auto& v : t.shift) v = in.f64();
    for (auto& v : t.scale) v = in.f64();
    model.input_transform = std::move(t);
  }
  if (in.remaining() != 0) throw FormatError(FormatErrc::kTrailingBytes, path);
  return model;
}

}  // namespace quantod
