#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "calq/error.hpp"
#include "calq/linalg.hpp"
#include "calq/matrix.hpp"
#include "calq/paired_transform.hpp"
#include "calq/quantizer.hpp"

namespace calq {

struct AdaptiveRoundConfig {
  int iterations = 3;  // 0 = half-iteration: quantize W₁, then compensate-quantize W₂ once
  PairQuantConfig quant = PairQuantConfig::per_channel(4);
  double rcond = kDefaultRcond;
  bool early_stop = true;
  double early_stop_tolerance = 1e-6;  // minimum relative PQE improvement per iteration
};

enum class RoundSide { independent, second, first };

inline const char* to_string(RoundSide s) {
  switch (s) {
    case RoundSide::independent: return "independent";
    case RoundSide::second: return "w2";
    case RoundSide::first: return "w1";
  }
  return "?";
}

struct PqeTracePoint {
  std::size_t step = 0;
  RoundSide side = RoundSide::independent;
  double pqe = 0.0;
};

template <typename Encoded>
struct AdaptiveRoundOutcome {
  Encoded first;
  Encoded second;
  std::vector<PqeTracePoint> trace;
  double independent_pqe = 0.0;
  double best_pqe = 0.0;
  std::size_t best_step = 0;
  int iterations_completed = 0;
  std::string note;
};

// Ŵ₁† · W₁ · W₂, the matrix W₂ must approximate once W₁ is replaced by Ŵ₁.
inline DenseMatrix compensation_target(const DenseMatrix& w1_hat, const DenseMatrix& w1, const DenseMatrix& w2,
                                       double rcond = kDefaultRcond) {
  if (!w1_hat.same_shape(w1)) throw ShapeError("compensation_target: Ŵ1 " + w1_hat.shape_string() + " vs W1 " + w1.shape_string());
  return matmul(pinv(w1_hat, rcond), matmul(w1, w2));
}

// Alternating pseudoinverse-compensated rounding of a coupled pair over any pair of codecs.
// A codec exposes `encode(const DenseMatrix&) -> Encoded` and `decode(const Encoded&) -> DenseMatrix`.
// Returns the best pair seen, including the initial independent rounding.
template <typename Codec1, typename Codec2>
auto adaptive_round_with(const DenseMatrix& w1, const DenseMatrix& w2, const Codec1& q1, const Codec2& q2, int iterations,
                         double rcond = kDefaultRcond, bool early_stop = true, double tolerance = 1e-6) {
  using Encoded = decltype(q1.encode(w1));
  if (w1.cols() != w2.rows() || w1.cols() == 0)
    throw ShapeError("adaptive_round: W1 " + w1.shape_string() + " and W2 " + w2.shape_string() + " do not conform");
  if (iterations < 0) throw ConfigError("adaptive_round: iterations must be non-negative");

  const auto product = matmul(w1, w2);
  AdaptiveRoundOutcome<Encoded> out;
  Encoded e1 = q1.encode(w1);
  Encoded e2 = q2.encode(w2);
  DenseMatrix d1 = q1.decode(e1);
  DenseMatrix d2 = q2.decode(e2);
  auto error_of = [&](const DenseMatrix& a, const DenseMatrix& b) { return frobenius(matmul(a, b) - product); };

  double current = error_of(d1, d2);
  out.independent_pqe = out.best_pqe = current;
  out.trace.push_back({0, RoundSide::independent, current});
  out.first = e1;
  out.second = e2;
  if (current == 0.0) return out;
  if (frobenius(product) == 0.0) {
    out.note = "W1·W2 is zero; kept independent rounding";
    return out;
  }

  std::size_t step = 0;
  auto record = [&](RoundSide side) {
    current = error_of(d1, d2);
    out.trace.push_back({++step, side, current});
    if (current < out.best_pqe) {
      out.best_pqe = current;
      out.best_step = step;
      out.first = e1;
      out.second = e2;
    }
  };
  auto update_second = [&] {
    e2 = q2.encode(matmul(pinv(d1, rcond), product));
    d2 = q2.decode(e2);
    record(RoundSide::second);
  };
  auto update_first = [&] {
    e1 = q1.encode(matmul(product, pinv(d2, rcond)));
    d1 = q1.decode(e1);
    record(RoundSide::first);
  };

  if (iterations == 0) {
    update_second();
    return out;
  }
  double previous = current;
  for (int it = 0; it < iterations; ++it) {
    update_second();
    update_first();
    ++out.iterations_completed;
    if (early_stop && previous - current < tolerance * previous) break;
    previous = current;
  }
  return out;
}

struct QuantCodec {
  QuantConfig config;
  QuantizedMatrix encode(const DenseMatrix& w) const { return quantize(w, config); }
  DenseMatrix decode(const QuantizedMatrix& q) const { return dequantize(q); }
};

// Pass-through codec; with it the algorithm reduces to exact pseudoinverse updates.
struct IdentityCodec {
  DenseMatrix encode(const DenseMatrix& w) const { return w; }
  DenseMatrix decode(const DenseMatrix& w) const { return w; }
};

using AdaptiveRoundResult = AdaptiveRoundOutcome<QuantizedMatrix>;

inline AdaptiveRoundResult adaptive_round(const DenseMatrix& w1, const DenseMatrix& w2, const AdaptiveRoundConfig& cfg) {
  if (!(cfg.rcond > 0.0 && cfg.rcond < 1.0)) throw ConfigError("adaptive_round: rcond must lie in (0, 1)");
  return adaptive_round_with(w1, w2, QuantCodec{cfg.quant.first}, QuantCodec{cfg.quant.second}, cfg.iterations, cfg.rcond,
                             cfg.early_stop, cfg.early_stop_tolerance);
}

// SVD-dominated cost estimate max(I, 1) · d · h · min(d, h); informational only.
inline double complexity_report(std::size_t d, std::size_t h, int iterations) {
  if (d == 0 || h == 0) throw DomainError("complexity_report: dimensions must be positive");
  return static_cast<double>(std::max(iterations, 1)) * static_cast<double>(d) * static_cast<double>(h) *
         static_cast<double>(std::min(d, h));
}

}  // namespace calq
