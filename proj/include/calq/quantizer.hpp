#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "calq/error.hpp"
#include "calq/linalg.hpp"
#include "calq/matrix.hpp"
#include "calq/random.hpp"

namespace calq {

enum class GroupKind { per_tensor, per_channel, subchannel };
enum class RoundingMode { nearest, stochastic };

// Which weights share a (scale, min) pair. `axis` names the lines that form channels:
// Axis::rows makes every row a channel, Axis::cols every column. Subchannel groups split
// each channel into consecutive runs of `block_size` entries.
struct Granularity {
  GroupKind kind = GroupKind::per_channel;
  Axis axis = Axis::rows;
  std::size_t block_size = 0;

  static Granularity per_tensor() { return {GroupKind::per_tensor, Axis::rows, 0}; }
  static Granularity per_channel(Axis a = Axis::rows) { return {GroupKind::per_channel, a, 0}; }
  static Granularity subchannel(std::size_t block, Axis a = Axis::rows) { return {GroupKind::subchannel, a, block}; }

  friend bool operator==(const Granularity&, const Granularity&) = default;
};

struct QuantConfig {
  int bits = 4;
  Granularity granularity{};
  RoundingMode rounding = RoundingMode::nearest;
  Seed seed{};

  std::uint32_t max_code() const { return (1u << bits) - 1u; }

  friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

inline void validate(const QuantConfig& cfg) {
  if (cfg.bits < 1 || cfg.bits > 8) throw ConfigError("quantizer: bits must lie in [1, 8], got " + std::to_string(cfg.bits));
  if (cfg.granularity.kind == GroupKind::subchannel && cfg.granularity.block_size == 0)
    throw ConfigError("quantizer: subchannel block size must be positive");
}

// Maps element coordinates to group indices for one (shape, granularity) pair.
class GroupLayout {
 public:
  GroupLayout(std::size_t rows, std::size_t cols, const Granularity& g) : rows_(rows), cols_(cols), g_(g) {
    const std::size_t channel_len = g.axis == Axis::rows ? cols : rows;
    const std::size_t channels = g.axis == Axis::rows ? rows : cols;
    switch (g.kind) {
      case GroupKind::per_tensor:
        count_ = 1;
        break;
      case GroupKind::per_channel:
        count_ = channels;
        per_channel_ = 1;
        break;
      case GroupKind::subchannel:
        if (g.block_size == 0 || channel_len % g.block_size != 0) {
          throw ConfigError("quantizer: subchannel block size " + std::to_string(g.block_size) +
                            " does not divide channel length " + std::to_string(channel_len));
        }
        per_channel_ = channel_len / g.block_size;
        count_ = channels * per_channel_;
        break;
    }
  }

  std::size_t count() const noexcept { return count_; }

  std::size_t group_of(std::size_t r, std::size_t c) const noexcept {
    switch (g_.kind) {
      case GroupKind::per_tensor:
        return 0;
      case GroupKind::per_channel:
        return g_.axis == Axis::rows ? r : c;
      case GroupKind::subchannel:
        return g_.axis == Axis::rows ? r * per_channel_ + c / g_.block_size : c * per_channel_ + r / g_.block_size;
    }
    return 0;
  }

 private:
  std::size_t rows_, cols_;
  Granularity g_;
  std::size_t count_ = 0;
  std::size_t per_channel_ = 0;
};

struct QuantizedMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> codes;  // row-major, each <= 2^bits - 1
  std::vector<double> group_min;
  std::vector<double> group_scale;
  QuantConfig config;

  friend bool operator==(const QuantizedMatrix&, const QuantizedMatrix&) = default;
};

namespace detail {

struct GroupRange {
  std::vector<double> lo, hi;
};

inline GroupRange group_ranges(const DenseMatrix& w, const GroupLayout& layout) {
  GroupRange r{std::vector<double>(layout.count(), std::numeric_limits<double>::infinity()),
               std::vector<double>(layout.count(), -std::numeric_limits<double>::infinity())};
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      const auto g = layout.group_of(i, j);
      r.lo[g] = std::min(r.lo[g], w(i, j));
      r.hi[g] = std::max(r.hi[g], w(i, j));
    }
  }
  return r;
}

}  // namespace detail

// Uniform quantization: s = (max - min) / (2^N - 1), code = round((w - min) / s).
// Nearest rounding breaks .5 ties upward; stochastic rounding draws one uniform per
// element in row-major order. Constant groups get scale 0 and code 0.
inline QuantizedMatrix quantize(const DenseMatrix& w, const QuantConfig& cfg) {
  validate(cfg);
  if (!w.all_finite()) throw DomainError("quantize: weights contain non-finite values");
  GroupLayout layout(w.rows(), w.cols(), cfg.granularity);
  const auto range = detail::group_ranges(w, layout);
  const double levels = static_cast<double>(cfg.max_code());

  QuantizedMatrix q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.config = cfg;
  q.codes.resize(w.size());
  q.group_min = range.lo;
  q.group_scale.resize(layout.count());
  for (std::size_t g = 0; g < layout.count(); ++g) q.group_scale[g] = (range.hi[g] - range.lo[g]) / levels;

  Rng rng(cfg.seed);
  const bool stochastic = cfg.rounding == RoundingMode::stochastic;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      const auto g = layout.group_of(i, j);
      const double s = q.group_scale[g];
      const double u = stochastic ? rng.uniform() : 0.0;
      double code = 0.0;
      if (s > 0.0) {
        const double x = (w(i, j) - q.group_min[g]) / s;
        if (stochastic) {
          const double fl = std::floor(x);
          code = fl + ((u < x - fl) ? 1.0 : 0.0);
        } else {
          code = std::round(x);
        }
        code = std::clamp(code, 0.0, levels);
      }
      q.codes[i * w.cols() + j] = static_cast<std::uint8_t>(code);
    }
  }
  return q;
}

inline QuantizedMatrix quantize_stochastic(const DenseMatrix& w, QuantConfig cfg) {
  cfg.rounding = RoundingMode::stochastic;
  return quantize(w, cfg);
}

inline DenseMatrix dequantize(const QuantizedMatrix& q) {
  GroupLayout layout(q.rows, q.cols, q.config.granularity);
  DenseMatrix w(q.rows, q.cols);
  for (std::size_t i = 0; i < q.rows; ++i) {
    for (std::size_t j = 0; j < q.cols; ++j) {
      const auto g = layout.group_of(i, j);
      w(i, j) = q.group_scale[g] * q.codes[i * q.cols + j] + q.group_min[g];
    }
  }
  return w;
}

inline DenseMatrix quantize_dequantize(const DenseMatrix& w, const QuantConfig& cfg) { return dequantize(quantize(w, cfg)); }

// ‖W - Ŵ‖_F / ‖W‖_F
inline double relative_error(const DenseMatrix& w, const DenseMatrix& w_hat) {
  if (!w.same_shape(w_hat)) throw ShapeError("relative_error: " + w.shape_string() + " vs " + w_hat.shape_string());
  const double ref = frobenius(w);
  if (ref == 0.0) throw DomainError("relative_error: reference matrix has zero norm");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w.data()[i] - w_hat.data()[i];
    s += d * d;
  }
  return std::sqrt(s) / ref;
}

// Paired quantization error ‖Ŵ₁Ŵ₂ - W₁W₂‖_F.
inline double pqe(const DenseMatrix& w1, const DenseMatrix& w2, const DenseMatrix& w1_hat, const DenseMatrix& w2_hat) {
  if (!w1.same_shape(w1_hat) || !w2.same_shape(w2_hat))
    throw ShapeError("pqe: quantized shapes differ from originals");
  return frobenius(matmul(w1_hat, w2_hat) - matmul(w1, w2));
}

// PQE divided by ‖W₁W₂‖_F.
inline double relative_pqe(const DenseMatrix& w1, const DenseMatrix& w2, const DenseMatrix& w1_hat, const DenseMatrix& w2_hat) {
  if (!w1.same_shape(w1_hat) || !w2.same_shape(w2_hat))
    throw ShapeError("relative_pqe: quantized shapes differ from originals");
  const auto ref = matmul(w1, w2);
  const double n = frobenius(ref);
  if (n == 0.0) throw DomainError("relative_pqe: W1·W2 is zero");
  return frobenius(matmul(w1_hat, w2_hat) - ref) / n;
}

struct ErrorBoundReport {
  bool ok = true;
  std::size_t checked = 0;
  std::size_t violations = 0;
  // Worst element by (error - bound); meaningful when checked > 0.
  std::size_t worst_row = 0;
  std::size_t worst_col = 0;
  double worst_error = 0.0;
  double worst_bound = 0.0;
};

// Checks |w - ŵ| <= (max_g - min_g) / (2(2^N - 1)) + slack for every element.
inline ErrorBoundReport elementwise_error_bound(const QuantizedMatrix& q, const DenseMatrix& w, double slack = 1e-12) {
  if (w.rows() != q.rows || w.cols() != q.cols) throw ShapeError("elementwise_error_bound: shape mismatch");
  GroupLayout layout(q.rows, q.cols, q.config.granularity);
  const auto range = detail::group_ranges(w, layout);
  const auto w_hat = dequantize(q);
  const double denom = 2.0 * static_cast<double>(q.config.max_code());
  ErrorBoundReport rep;
  double worst_excess = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      const auto g = layout.group_of(i, j);
      const double bound = (range.hi[g] - range.lo[g]) / denom;
      const double err = std::abs(w(i, j) - w_hat(i, j));
      ++rep.checked;
      if (err > bound + slack) ++rep.violations;
      if (err - bound > worst_excess) {
        worst_excess = err - bound;
        rep.worst_row = i;
        rep.worst_col = j;
        rep.worst_error = err;
        rep.worst_bound = bound;
      }
    }
  }
  rep.ok = rep.violations == 0;
  return rep;
}

}  // namespace calq
