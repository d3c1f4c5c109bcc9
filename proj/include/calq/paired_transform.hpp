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

enum class PairedLoss { log_sum_exp, sum_sq, sum_sq_weighted };

struct PairedLossKind {
  PairedLoss loss = PairedLoss::log_sum_exp;
  double t = 5.0;  // log-sum-exp temperature

  static PairedLossKind log_sum_exp(double t = 5.0) { return {PairedLoss::log_sum_exp, t}; }
  static PairedLossKind sum_sq() { return {PairedLoss::sum_sq, 5.0}; }
  static PairedLossKind sum_sq_weighted() { return {PairedLoss::sum_sq_weighted, 5.0}; }
};

inline const char* to_string(PairedLoss l) {
  switch (l) {
    case PairedLoss::log_sum_exp: return "logsumexp";
    case PairedLoss::sum_sq: return "sumsq";
    case PairedLoss::sum_sq_weighted: return "sumsq_weighted";
  }
  return "?";
}

// Quantizer settings for the two sides of a coupled pair. Channels of W₁M are its rows and
// channels of M⁻¹W₂ its columns, so each group runs along the shared inner dimension.
struct PairQuantConfig {
  QuantConfig first;
  QuantConfig second;

  static PairQuantConfig per_channel(int bits) {
    PairQuantConfig p;
    p.first.bits = p.second.bits = bits;
    p.first.granularity = Granularity::per_channel(Axis::rows);
    p.second.granularity = Granularity::per_channel(Axis::cols);
    return p;
  }
  static PairQuantConfig subchannel(int bits, std::size_t block) {
    PairQuantConfig p;
    p.first.bits = p.second.bits = bits;
    p.first.granularity = Granularity::subchannel(block, Axis::rows);
    p.second.granularity = Granularity::subchannel(block, Axis::cols);
    return p;
  }
  static PairQuantConfig per_tensor(int bits) {
    PairQuantConfig p;
    p.first.bits = p.second.bits = bits;
    p.first.granularity = p.second.granularity = Granularity::per_tensor();
    return p;
  }
};

namespace detail {

inline void require_pair_shapes(const DenseMatrix& w1, const DenseMatrix& w2, const DenseMatrix& m) {
  if (w1.cols() != m.rows() || m.rows() != m.cols() || m.cols() != w2.rows()) {
    throw ShapeError("paired transform: W1 " + w1.shape_string() + ", M " + m.shape_string() + ", W2 " + w2.shape_string() +
                     " do not conform");
  }
}

inline DenseMatrix checked_inverse(const DenseMatrix& m) {
  try {
    return inverse(m);
  } catch (const NumericalError&) {
    throw NumericalError("paired transform: M is singular");
  }
}

inline double sign_of(double x) { return (x > 0.0) - (x < 0.0); }

struct PairedEval {
  double loss = 0.0;
  DenseMatrix grad;  // ∂loss/∂M, empty unless requested
};

// Pseudo-loss on U = W₁M (row maxima) and V = M⁻¹W₂ (column maxima), optionally with gradient.
inline PairedEval evaluate_pseudo_loss(const DenseMatrix& w1, const DenseMatrix& w2, const DenseMatrix& m,
                                       const PairedLossKind& kind, bool want_grad) {
  require_pair_shapes(w1, w2, m);
  const auto inv = checked_inverse(m);
  const auto u = matmul(w1, m);
  const auto v = matmul(inv, w2);
  const std::size_t d1 = u.rows(), d3 = v.cols();

  std::vector<double> mu(d1, 0.0), mv(d3, 0.0);
  std::vector<std::size_t> au(d1, 0), av(d3, 0);  // argmax, lowest index on ties
  for (std::size_t i = 0; i < d1; ++i) {
    auto r = u.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (std::abs(r[j]) > mu[i]) {
        mu[i] = std::abs(r[j]);
        au[i] = j;
      }
    }
  }
  for (std::size_t i = 0; i < v.rows(); ++i) {
    auto r = v.row(i);
    for (std::size_t j = 0; j < d3; ++j) {
      if (std::abs(r[j]) > mv[j]) {
        mv[j] = std::abs(r[j]);
        av[j] = i;
      }
    }
  }

  PairedEval out;
  std::vector<double> du(d1, 0.0), dv(d3, 0.0);  // ∂loss/∂m_u, ∂loss/∂m_v
  double fro_u_coef = 0.0, fro_v_coef = 0.0;     // ∂loss/∂‖U‖_F, ∂loss/∂‖V‖_F
  double fro_u = 0.0, fro_v = 0.0;
  switch (kind.loss) {
    case PairedLoss::log_sum_exp: {
      const double t = kind.t;
      double mx = 0.0;
      for (double x : mu) mx = std::max(mx, x);
      for (double x : mv) mx = std::max(mx, x);
      double s = 0.0;
      for (std::size_t i = 0; i < d1; ++i) s += (du[i] = std::exp(t * (mu[i] - mx)));
      for (std::size_t j = 0; j < d3; ++j) s += (dv[j] = std::exp(t * (mv[j] - mx)));
      out.loss = mx + std::log(s) / t;
      for (double& x : du) x /= s;
      for (double& x : dv) x /= s;
      break;
    }
    case PairedLoss::sum_sq: {
      for (std::size_t i = 0; i < d1; ++i) {
        out.loss += mu[i] * mu[i] / static_cast<double>(d1);
        du[i] = 2.0 * mu[i] / static_cast<double>(d1);
      }
      for (std::size_t j = 0; j < d3; ++j) {
        out.loss += mv[j] * mv[j] / static_cast<double>(d3);
        dv[j] = 2.0 * mv[j] / static_cast<double>(d3);
      }
      break;
    }
    case PairedLoss::sum_sq_weighted: {
      fro_u = frobenius(u);
      fro_v = frobenius(v);
      double su = 0.0, sv = 0.0;
      for (double x : mu) su += x * x;
      for (double x : mv) sv += x * x;
      su /= static_cast<double>(d1);
      sv /= static_cast<double>(d3);
      out.loss = fro_v * su + fro_u * sv;
      for (std::size_t i = 0; i < d1; ++i) du[i] = fro_v * 2.0 * mu[i] / static_cast<double>(d1);
      for (std::size_t j = 0; j < d3; ++j) dv[j] = fro_u * 2.0 * mv[j] / static_cast<double>(d3);
      fro_v_coef = su;
      fro_u_coef = sv;
      break;
    }
  }
  if (!want_grad) return out;

  // Chain through U = W₁M and V = M⁻¹W₂ (dV = -M⁻¹ dM V):
  //   ∂/∂M = W₁ᵀ·G_U - M⁻ᵀ·G_V·Vᵀ
  // The channel-maximum parts of G_U and G_V have one non-zero per row / column.
  const std::size_t h = m.rows();
  DenseMatrix wt_gu(h, h);  // W₁ᵀ·G_U
  DenseMatrix gv_vt(h, h);  // G_V·Vᵀ
  for (std::size_t i = 0; i < d1; ++i) {
    const double g = du[i] * sign_of(u(i, au[i]));
    if (g == 0.0) continue;
    auto w1i = w1.row(i);
    for (std::size_t l = 0; l < h; ++l) wt_gu(l, au[i]) += g * w1i[l];
  }
  for (std::size_t j = 0; j < d3; ++j) {
    const double g = dv[j] * sign_of(v(av[j], j));
    if (g == 0.0) continue;
    auto row = gv_vt.row(av[j]);
    for (std::size_t s = 0; s < h; ++s) row[s] += g * v(s, j);
  }
  if (fro_u_coef != 0.0 && fro_u > 0.0) wt_gu += matmul_tn(w1, u) * (fro_u_coef / fro_u);
  if (fro_v_coef != 0.0 && fro_v > 0.0) gv_vt += matmul_nt(v, v) * (fro_v_coef / fro_v);
  out.grad = std::move(wt_gu);
  out.grad -= matmul_tn(inv, gv_vt);
  return out;
}

}  // namespace detail

inline double paired_pseudo_loss(const DenseMatrix& w1, const DenseMatrix& w2, const DenseMatrix& m, const PairedLossKind& kind) {
  return detail::evaluate_pseudo_loss(w1, w2, m, kind, false).loss;
}

struct OrthPenalty {
  double value = 0.0;
  DenseMatrix grad;
};

// ‖MMᵀ - I‖_F / √d and its gradient 2(MMᵀ - I)M / (‖MMᵀ - I‖_F √d). The penalty is not
// differentiable on the orthogonal group; defects below 1e-10 (roundoff) get the zero subgradient.
inline OrthPenalty orth_penalty_with_grad(const DenseMatrix& m, bool want_grad = true) {
  if (m.rows() != m.cols()) throw ShapeError("orth_penalty: matrix must be square, got " + m.shape_string());
  auto e = matmul_nt(m, m);
  for (std::size_t i = 0; i < e.rows(); ++i) e(i, i) -= 1.0;
  const double n = frobenius(e);
  const double root_d = std::sqrt(static_cast<double>(m.rows()));
  OrthPenalty out{n / root_d, {}};
  if (!want_grad) return out;
  if (n <= 1e-10) {
    out.grad = DenseMatrix(m.rows(), m.cols());
  } else {
    out.grad = matmul(e, m);
    out.grad *= 2.0 / (n * root_d);
  }
  return out;
}

inline double orth_penalty(const DenseMatrix& m) { return orth_penalty_with_grad(m, false).value; }

inline DenseMatrix orth_penalty_grad(const DenseMatrix& m) { return orth_penalty_with_grad(m).grad; }

inline DenseMatrix paired_grad(const DenseMatrix& w1, const DenseMatrix& w2, const DenseMatrix& m, const PairedLossKind& kind,
                               double lambda_orth) {
  auto g = detail::evaluate_pseudo_loss(w1, w2, m, kind, true).grad;
  if (lambda_orth != 0.0) g += orth_penalty_grad(m) * lambda_orth;
  return g;
}

// ---------------------------------------------------------------------------
// Cayley SGD on the orthogonal group.

struct CayleyState {
  DenseMatrix momentum;
  long steps = 0;
  int reorthonormalize_every = 1000;
  long rejected = 0;
};

// One Cayley step: B ← βB + G, A = B·Mᵀ - M·Bᵀ, M ← (I + (lr/2)A)⁻¹(I - (lr/2)A)M.
// A singular left factor halves the step for this iteration (up to 30 times).
inline DenseMatrix cayley_step(const DenseMatrix& m, const DenseMatrix& grad, double lr, CayleyState& state, double beta = 0.1) {
  if (m.rows() != m.cols() || !grad.same_shape(m)) throw ShapeError("cayley_step: M and gradient must be equal square shapes");
  const std::size_t d = m.rows();
  if (state.momentum.empty()) state.momentum = DenseMatrix(d, d);
  state.momentum *= beta;
  state.momentum += grad;
  const auto a = matmul_nt(state.momentum, m) - matmul_nt(m, state.momentum);

  DenseMatrix next;
  double step = lr;
  for (int attempt = 0; attempt < 30; ++attempt, step *= 0.5) {
    DenseMatrix left = DenseMatrix::identity(d), right = DenseMatrix::identity(d);
    left += a * (step / 2.0);
    right -= a * (step / 2.0);
    auto lu = lu_decompose(left);
    if (lu.singular) {
      ++state.rejected;
      continue;
    }
    next = lu_solve(lu, matmul(right, m));
    break;
  }
  if (next.empty()) throw NumericalError("cayley_step: Cayley factor singular at every step size", state.steps);
  ++state.steps;
  if (state.reorthonormalize_every > 0 && state.steps % state.reorthonormalize_every == 0) next = qr(next).q;
  return next;
}

// ---------------------------------------------------------------------------

enum class PairedOptimizer { adam, cayley };
enum class PairedInit { identity, random_rotation };

struct PairedOptConfig {
  PairedOptimizer optimizer = PairedOptimizer::adam;
  double lr = 1e-2;
  double beta1 = 0.1;  // Adam first-moment decay
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.1;  // Cayley SGD momentum
  double lambda_orth = 0.1;
  long iterations = 100000;
  long checkpoint_every = 1000;
  int reorthonormalize_every = 1000;
  PairedInit init = PairedInit::identity;
  PairQuantConfig track = PairQuantConfig::per_channel(4);
};

inline void validate(const PairedOptConfig& c) {
  if (!(c.lr > 0.0)) throw ConfigError("paired optimizer: lr must be positive");
  if (c.lambda_orth < 0.0) throw ConfigError("paired optimizer: lambda_orth must be non-negative");
  if (c.iterations < 0) throw ConfigError("paired optimizer: iterations must be non-negative");
  if (c.checkpoint_every < 1) throw ConfigError("paired optimizer: checkpoint cadence must be positive");
}

struct PairedTracePoint {
  long iteration = 0;
  double pseudo_loss = 0.0;
  double relative_pqe = std::numeric_limits<double>::quiet_NaN();  // NaN when M was singular
  double orth_penalty = 0.0;
  double min_sigma = 0.0;
  double max_sigma = 0.0;
};

struct PairedTransform {
  DenseMatrix m;
  DenseMatrix m_inv;
  PairedLossKind kind;
  PairedOptConfig opt;
  long best_iteration = 0;
  double pseudo_loss = 0.0;
  double relative_pqe = 0.0;
  double min_sigma = 1.0;
  double max_sigma = 1.0;
};

struct PairedOptimizationResult {
  PairedTransform transform;
  std::vector<PairedTracePoint> trace;
  std::vector<std::string> warnings;
};

// Relative PQE after independently quantizing W₁M and M⁻¹W₂.
inline double transformed_relative_pqe(const DenseMatrix& w1, const DenseMatrix& w2, const DenseMatrix& m, const DenseMatrix& m_inv,
                                       const PairQuantConfig& q) {
  const auto u = matmul(w1, m);
  const auto v = matmul(m_inv, w2);
  return relative_pqe(u, v, quantize_dequantize(u, q.first), quantize_dequantize(v, q.second));
}

inline PairedOptimizationResult optimize_paired(const DenseMatrix& w1, const DenseMatrix& w2, const PairedOptConfig& cfg,
                                                const PairedLossKind& kind, Seed seed) {
  validate(cfg);
  if (kind.loss == PairedLoss::log_sum_exp && !(kind.t > 0.0)) throw ConfigError("paired loss: t must be positive");
  if (w1.cols() != w2.rows()) throw ShapeError("optimize_paired: W1 " + w1.shape_string() + " and W2 " + w2.shape_string() + " do not conform");
  const std::size_t d = w1.cols();

  DenseMatrix m = cfg.init == PairedInit::identity ? DenseMatrix::identity(d) : random_rotation(d, seed);
  PairedOptimizationResult res;
  res.transform.kind = kind;
  res.transform.opt = cfg;
  double best_pqe = std::numeric_limits<double>::infinity();
  DenseMatrix best_m;

  AdamState adam(d, d);
  const AdamConfig adam_cfg{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
  CayleyState cayley;
  cayley.reorthonormalize_every = cfg.reorthonormalize_every;
  const bool constrained = cfg.optimizer == PairedOptimizer::cayley;
  const double lambda = constrained ? 0.0 : cfg.lambda_orth;

  for (long it = 0; it <= cfg.iterations; ++it) {
    const bool checkpoint = it % cfg.checkpoint_every == 0 || it == cfg.iterations;
    const bool last = it == cfg.iterations;
    detail::PairedEval ev;
    try {
      ev = detail::evaluate_pseudo_loss(w1, w2, m, kind, !last);
    } catch (const NumericalError&) {
      throw NumericalError("optimize_paired: M became singular at iteration " + std::to_string(it), it);
    }
    const bool penalized = lambda != 0.0 && !last;
    auto orth = orth_penalty_with_grad(m, penalized);
    const double penalty = orth.value;
    const double total = ev.loss + lambda * penalty;
    if (!std::isfinite(total)) throw NumericalError("optimize_paired: non-finite loss at iteration " + std::to_string(it), it);

    if (checkpoint) {
      PairedTracePoint tp{it, ev.loss, std::numeric_limits<double>::quiet_NaN(), penalty, 0.0, 0.0};
      const auto sv = svd(m).singular_values;
      tp.max_sigma = sv.front();
      tp.min_sigma = sv.back();
      if (tp.min_sigma > 0.0) {
        try {
          const auto inv = inverse(m);
          tp.relative_pqe = transformed_relative_pqe(w1, w2, m, inv, cfg.track);
          if (tp.relative_pqe < best_pqe) {
            best_pqe = tp.relative_pqe;
            best_m = m;
            res.transform.best_iteration = it;
            res.transform.pseudo_loss = ev.loss;
          }
        } catch (const NumericalError&) {
          // singular iterate: no PQE at this checkpoint
        }
      }
      res.trace.push_back(tp);
    }
    if (last) break;

    DenseMatrix g = std::move(ev.grad);
    if (penalized) g += orth.grad * lambda;
    if (constrained) {
      m = cayley_step(m, g, cfg.lr, cayley, cfg.momentum);
    } else {
      adam.step(m, g, adam_cfg);
    }
  }
  if (best_m.empty()) throw NumericalError("optimize_paired: no invertible checkpoint", cfg.iterations);

  res.transform.m = std::move(best_m);
  res.transform.m_inv = inverse(res.transform.m);
  res.transform.relative_pqe = best_pqe;
  const auto sv = svd(res.transform.m).singular_values;
  res.transform.max_sigma = sv.front();
  res.transform.min_sigma = sv.back();
  if (res.transform.max_sigma > 1e3 || (res.transform.min_sigma > 0.0 && 1.0 / res.transform.min_sigma > 1e3)) {
    res.warnings.push_back("learned M has extreme singular values (min " + std::to_string(res.transform.min_sigma) + ", max " +
                           std::to_string(res.transform.max_sigma) + ")");
  }
  return res;
}

}  // namespace calq
