#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "calq/adam.hpp"
#include "calq/error.hpp"
#include "calq/linalg.hpp"
#include "calq/matrix.hpp"
#include "calq/quantizer.hpp"
#include "calq/random.hpp"

namespace calq {

// Invertible block-diagonal d x d matrix made of d/k blocks of size k x k, with cached inverses.
class BlockDiagTransform {
 public:
  BlockDiagTransform() = default;

  BlockDiagTransform(std::size_t dim, std::size_t block_size, std::vector<DenseMatrix> blocks)
      : dim_(dim), block_size_(block_size), blocks_(std::move(blocks)) {
    if (block_size_ == 0 || dim_ % block_size_ != 0)
      throw ConfigError("block size " + std::to_string(block_size_) + " does not divide dimension " + std::to_string(dim_));
    if (blocks_.size() != dim_ / block_size_) throw ShapeError("block-diagonal transform: wrong number of blocks");
    inverse_blocks_.reserve(blocks_.size());
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      if (blocks_[b].rows() != block_size_ || blocks_[b].cols() != block_size_)
        throw ShapeError("block " + std::to_string(b) + " has shape " + blocks_[b].shape_string());
      try {
        inverse_blocks_.push_back(inverse(blocks_[b]));
      } catch (const NumericalError&) {
        throw NumericalError("block-diagonal transform: block " + std::to_string(b) + " is singular", static_cast<long>(b));
      }
    }
  }

  static BlockDiagTransform identity(std::size_t dim, std::size_t block_size) {
    std::vector<DenseMatrix> blocks(dim / std::max<std::size_t>(block_size, 1), DenseMatrix::identity(block_size));
    return BlockDiagTransform(dim, block_size, std::move(blocks));
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t block_size() const noexcept { return block_size_; }
  std::size_t block_count() const noexcept { return blocks_.size(); }
  const std::vector<DenseMatrix>& blocks() const noexcept { return blocks_; }
  const std::vector<DenseMatrix>& inverse_blocks() const noexcept { return inverse_blocks_; }

  // Multiply-adds to apply M (or M⁻¹) to one d-dimensional vector.
  std::size_t flops_per_vector() const noexcept { return dim_ * block_size_; }

  DenseMatrix apply(const DenseMatrix& w) const { return apply_blocks(blocks_, w); }
  DenseMatrix apply_inverse(const DenseMatrix& w) const { return apply_blocks(inverse_blocks_, w); }

  DenseMatrix assemble() const { return assemble_blocks(blocks_); }
  DenseMatrix assemble_inverse() const { return assemble_blocks(inverse_blocks_); }

  // Largest ‖B·B⁻¹ - I‖_F over blocks.
  double inverse_defect() const {
    double worst = 0.0;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      auto e = matmul(blocks_[b], inverse_blocks_[b]);
      for (std::size_t i = 0; i < block_size_; ++i) e(i, i) -= 1.0;
      worst = std::max(worst, frobenius(e));
    }
    return worst;
  }

 private:
  DenseMatrix apply_blocks(const std::vector<DenseMatrix>& bs, const DenseMatrix& w) const {
    if (w.rows() != dim_) throw ShapeError("block-diagonal transform of dim " + std::to_string(dim_) + " applied to " + w.shape_string());
    DenseMatrix out(w.rows(), w.cols());
    for (std::size_t b = 0; b < bs.size(); ++b) {
      const std::size_t r0 = b * block_size_;
      out.set_block(r0, 0, matmul(bs[b], w.block(r0, 0, block_size_, w.cols())));
    }
    return out;
  }

  DenseMatrix assemble_blocks(const std::vector<DenseMatrix>& bs) const {
    DenseMatrix m(dim_, dim_);
    for (std::size_t b = 0; b < bs.size(); ++b) m.set_block(b * block_size_, b * block_size_, bs[b]);
    return m;
  }

  std::size_t dim_ = 0;
  std::size_t block_size_ = 0;
  std::vector<DenseMatrix> blocks_;
  std::vector<DenseMatrix> inverse_blocks_;
};

inline void require_block_divides(std::size_t d, std::size_t k) {
  if (k == 0 || d % k != 0)
    throw ConfigError("block size " + std::to_string(k) + " does not divide dimension " + std::to_string(d));
}

// Every block an independent random rotation; block b draws from derive_seed(seed, b).
inline BlockDiagTransform init_blocks(std::size_t d, std::size_t k, Seed seed) {
  require_block_divides(d, k);
  std::vector<DenseMatrix> blocks;
  blocks.reserve(d / k);
  for (std::size_t b = 0; b < d / k; ++b) blocks.push_back(random_rotation(k, derive_seed(seed, b)));
  return BlockDiagTransform(d, k, std::move(blocks));
}

// Every block an independent randomized Hadamard matrix; k must be a power of two.
inline BlockDiagTransform hadamard_blocks(std::size_t d, std::size_t k, Seed seed) {
  require_block_divides(d, k);
  std::vector<DenseMatrix> blocks;
  blocks.reserve(d / k);
  for (std::size_t b = 0; b < d / k; ++b) blocks.push_back(randomized_hadamard(k, derive_seed(seed, b)));
  return BlockDiagTransform(d, k, std::move(blocks));
}

enum class InfNormMode { exact_subgradient, smoothed };

struct SingleLossConfig {
  int bits = 4;
  InfNormMode inf_norm = InfNormMode::exact_subgradient;
  double tau = 100.0;  // smoothing temperature, used when inf_norm == smoothed
  AdamConfig adam{};
  int iterations = 20000;
  int trace_every = 100;
  // Fixed randomized Hadamard factors around each learned block: 0 none, 1 -> B·H, 2 -> H'·B·H.
  int hadamard_count = 0;
};

inline void validate(const SingleLossConfig& c) {
  if (c.bits < 1 || c.bits > 8) throw ConfigError("single transform: bits must lie in [1, 8]");
  if (c.inf_norm == InfNormMode::smoothed && !(c.tau > 0.0)) throw ConfigError("single transform: tau must be positive");
  if (c.iterations < 1) throw ConfigError("single transform: iterations must be >= 1");
  if (c.hadamard_count < 0 || c.hadamard_count > 2) throw ConfigError("single transform: hadamard_count must be 0, 1 or 2");
  validate(c.adam);
}

namespace detail {

// Smooth max (1/τ)·log Σ exp(τ|v|) with softmax weights written to `weights`.
inline double smooth_abs_max(std::span<const double> v, double tau, std::span<double> weights) {
  double mx = 0.0;
  for (double x : v) mx = std::max(mx, std::abs(x));
  double s = 0.0;
  for (std::size_t a = 0; a < v.size(); ++a) {
    weights[a] = std::exp(tau * (std::abs(v[a]) - mx));
    s += weights[a];
  }
  for (double& w : weights) w /= s;
  return mx + std::log(s) / tau;
}

inline std::size_t abs_argmax(std::span<const double> v) {
  std::size_t best = 0;
  double bv = -1.0;
  for (std::size_t a = 0; a < v.size(); ++a) {
    if (std::abs(v[a]) > bv) {
      bv = std::abs(v[a]);
      best = a;
    }
  }
  return best;
}

inline double sgn(double x) { return (x > 0.0) - (x < 0.0); }

}  // namespace detail

// Loss of a single k x k block acting on the k rows `w_rows` (k x d2) of W:
//   d2/(2^N-1)² · Σ_j ‖column j of B⁻¹‖² · ‖row j of B·W‖²_∞
// If `grad` is non-null it receives ∂loss/∂B.
inline double block_surrogate(const DenseMatrix& block, const DenseMatrix& w_rows, const SingleLossConfig& cfg,
                              DenseMatrix* grad = nullptr) {
  const std::size_t k = block.rows();
  const std::size_t d2 = w_rows.cols();
  const double levels = static_cast<double>((1u << cfg.bits) - 1u);
  const double pref = static_cast<double>(d2) / (levels * levels);

  const auto inv = inverse(block);
  const auto y = matmul(block, w_rows);

  std::vector<double> c(k, 0.0);  // squared column norms of B⁻¹
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) c[j] += inv(i, j) * inv(i, j);

  const bool smoothed = cfg.inf_norm == InfNormMode::smoothed;
  std::vector<double> r(k, 0.0);
  std::vector<std::size_t> arg(k, 0);
  std::vector<double> arg_sign(k, 0.0);
  DenseMatrix omega;  // ∂r_j/∂y_{j,a}, smoothed mode only
  if (grad && smoothed) omega = DenseMatrix(k, d2);
  std::vector<double> weights(smoothed ? d2 : 0);
  for (std::size_t j = 0; j < k; ++j) {
    auto yj = y.row(j);
    if (smoothed) {
      r[j] = detail::smooth_abs_max(yj, cfg.tau, weights);
      if (grad)
        for (std::size_t a = 0; a < d2; ++a) omega(j, a) = weights[a] * detail::sgn(yj[a]);
    } else {
      arg[j] = detail::abs_argmax(yj);
      r[j] = std::abs(yj[arg[j]]);
      arg_sign[j] = detail::sgn(yj[arg[j]]);
    }
  }
  double loss = 0.0;
  for (std::size_t j = 0; j < k; ++j) loss += c[j] * r[j] * r[j];
  loss *= pref;

  if (grad) {
    // Through the row maxima: diag(2 c r) · Ω · Wᵀ. Ω has one non-zero per row in exact mode.
    DenseMatrix g1(k, k);
    if (smoothed) {
      g1 = matmul_nt(omega, w_rows);
    } else {
      for (std::size_t j = 0; j < k; ++j)
        for (std::size_t l = 0; l < k; ++l) g1(j, l) = arg_sign[j] * w_rows(l, arg[j]);
    }
    for (std::size_t j = 0; j < k; ++j) {
      const double f = 2.0 * c[j] * r[j];
      for (double& v : g1.row(j)) v *= f;
    }
    // Through B⁻¹: -2 · B⁻ᵀ · B⁻¹ · diag(r²) · B⁻ᵀ.
    DenseMatrix scaled = inv;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) scaled(i, j) *= r[j] * r[j];
    DenseMatrix g2 = matmul_nt(matmul_tn(inv, scaled), inv);
    g1 -= g2 * 2.0;
    g1 *= pref;
    *grad = std::move(g1);
  }
  return loss;
}

namespace detail {

inline void require_conformal(const BlockDiagTransform& m, const DenseMatrix& w) {
  if (m.dim() != w.rows())
    throw ShapeError("surrogate: transform dim " + std::to_string(m.dim()) + " does not match weight " + w.shape_string());
}

inline double checked_block_surrogate(const DenseMatrix& block, const DenseMatrix& w_rows, const SingleLossConfig& cfg,
                                      std::size_t b, DenseMatrix* grad) {
  try {
    return block_surrogate(block, w_rows, cfg, grad);
  } catch (const NumericalError&) {
    throw NumericalError("surrogate: block " + std::to_string(b) + " is singular", static_cast<long>(b));
  }
}

}  // namespace detail

// Upper bound on E‖M⁻¹·Q_stoch(MW) - W‖²_F for row-grouped quantization of MW.
inline double surrogate_loss(const BlockDiagTransform& m, const DenseMatrix& w, const SingleLossConfig& cfg) {
  detail::require_conformal(m, w);
  const std::size_t k = m.block_size();
  double total = 0.0;
  for (std::size_t b = 0; b < m.block_count(); ++b)
    total += detail::checked_block_surrogate(m.blocks()[b], w.block(b * k, 0, k, w.cols()), cfg, b, nullptr);
  return total;
}

inline std::vector<DenseMatrix> surrogate_grad(const BlockDiagTransform& m, const DenseMatrix& w, const SingleLossConfig& cfg) {
  detail::require_conformal(m, w);
  const std::size_t k = m.block_size();
  std::vector<DenseMatrix> grads(m.block_count());
  for (std::size_t b = 0; b < m.block_count(); ++b)
    detail::checked_block_surrogate(m.blocks()[b], w.block(b * k, 0, k, w.cols()), cfg, b, &grads[b]);
  return grads;
}

struct LossTracePoint {
  long iteration = 0;
  std::size_t block_index = 0;
  double loss = 0.0;
};

struct SingleOptimizationResult {
  BlockDiagTransform transform;
  double initial_loss = 0.0;
  double best_loss = 0.0;
  std::vector<LossTracePoint> trace;
};

// Adam on one block from a random-rotation start. Returns the best block seen and its loss.
inline DenseMatrix optimize_block(const DenseMatrix& w_rows, std::size_t k, const SingleLossConfig& cfg, Seed seed,
                                  std::size_t block_index, double& initial_loss, double& best_loss,
                                  std::vector<LossTracePoint>* trace) {
  DenseMatrix param = random_rotation(k, seed);
  DenseMatrix h_pre, h_post;
  if (cfg.hadamard_count >= 1) h_pre = randomized_hadamard(k, derive_seed(seed, "hadamard-pre"));
  if (cfg.hadamard_count >= 2) h_post = randomized_hadamard(k, derive_seed(seed, "hadamard-post"));
  auto effective = [&](const DenseMatrix& p) {
    DenseMatrix e = p;
    if (!h_pre.empty()) e = matmul(e, h_pre);
    if (!h_post.empty()) e = matmul(h_post, e);
    return e;
  };

  DenseMatrix best = effective(param);
  AdamState adam(k, k);
  DenseMatrix grad;
  best_loss = std::numeric_limits<double>::infinity();
  for (long it = 0; it <= cfg.iterations; ++it) {
    const DenseMatrix eff = effective(param);
    const bool last = it == cfg.iterations;
    double loss = 0.0;
    try {
      loss = block_surrogate(eff, w_rows, cfg, last ? nullptr : &grad);
    } catch (const NumericalError&) {
      throw NumericalError("optimize_single: block " + std::to_string(block_index) + " became singular at iteration " +
                               std::to_string(it),
                           it);
    }
    if (!std::isfinite(loss))
      throw NumericalError("optimize_single: non-finite loss in block " + std::to_string(block_index) + " at iteration " +
                               std::to_string(it),
                           it);
    if (it == 0) initial_loss = loss;
    if (trace && cfg.trace_every > 0 && (it % cfg.trace_every == 0 || last)) trace->push_back({it, block_index, loss});
    if (loss < best_loss) {
      best_loss = loss;
      best = eff;
    }
    if (last || loss == 0.0) break;
    if (!h_post.empty()) grad = matmul_tn(h_post, grad);
    if (!h_pre.empty()) grad = matmul_nt(grad, h_pre);
    adam.step(param, grad, cfg.adam);
  }
  return best;
}

// Learns a block-diagonal M for W (rows of W are the transformed dimension). Blocks are
// optimized independently; the loss is a sum of per-block terms.
inline SingleOptimizationResult optimize_single(const DenseMatrix& w, std::size_t k, const SingleLossConfig& cfg, Seed seed,
                                                bool record_trace = false) {
  validate(cfg);
  require_block_divides(w.rows(), k);
  if (cfg.hadamard_count > 0 && !is_power_of_two(k))
    throw ConfigError("single transform: hadamard composition needs a power-of-two block size");
  SingleOptimizationResult res;
  std::vector<DenseMatrix> blocks;
  const std::size_t count = w.rows() / k;
  blocks.reserve(count);
  for (std::size_t b = 0; b < count; ++b) {
    double init = 0.0, best = 0.0;
    blocks.push_back(optimize_block(w.block(b * k, 0, k, w.cols()), k, cfg, derive_seed(seed, b), b, init, best,
                                    record_trace ? &res.trace : nullptr));
    res.initial_loss += init;
    res.best_loss += best;
  }
  res.transform = BlockDiagTransform(w.rows(), k, std::move(blocks));
  return res;
}

struct TransformedQuantization {
  QuantizedMatrix quantized;  // codes of M·W
  BlockDiagTransform transform;
};

inline TransformedQuantization quantize_with_transform(const DenseMatrix& w, const BlockDiagTransform& m, const QuantConfig& qcfg) {
  return {quantize(m.apply(w), qcfg), m};
}

// M⁻¹ · dequantize(Q(MW))
inline DenseMatrix reconstruct(const TransformedQuantization& tq) { return tq.transform.apply_inverse(dequantize(tq.quantized)); }

}  // namespace calq
