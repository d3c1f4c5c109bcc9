#include <gtest/gtest.h>

#include <cmath>

#include "calq/paired_transform.hpp"
#include "calq/synthetic.hpp"
#include "oracles.hpp"

using namespace calq;

namespace {

struct ChannelMaxima {
  std::vector<double> u;  // row maxima of W₁M
  std::vector<double> v;  // column maxima of M⁻¹W₂
  double fro_u = 0.0, fro_v = 0.0;
};

ChannelMaxima channel_maxima(const DenseMatrix& w1, const DenseMatrix& w2, const DenseMatrix& m) {
  const auto u = oracle::triple_loop_product(w1, m);
  const auto v = oracle::triple_loop_product(pinv(m), w2);
  ChannelMaxima c{std::vector<double>(u.rows(), 0.0), std::vector<double>(v.cols(), 0.0), 0.0, 0.0};
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (std::size_t j = 0; j < u.cols(); ++j) {
      c.u[i] = std::max(c.u[i], std::abs(u(i, j)));
      c.fro_u += u(i, j) * u(i, j);
    }
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = 0; j < v.cols(); ++j) {
      c.v[j] = std::max(c.v[j], std::abs(v(i, j)));
      c.fro_v += v(i, j) * v(i, j);
    }
  c.fro_u = std::sqrt(c.fro_u);
  c.fro_v = std::sqrt(c.fro_v);
  return c;
}

double mean_square(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s / static_cast<double>(x.size());
}

double oracle_loss(const DenseMatrix& w1, const DenseMatrix& w2, const DenseMatrix& m, const PairedLossKind& kind) {
  const auto c = channel_maxima(w1, w2, m);
  switch (kind.loss) {
    case PairedLoss::log_sum_exp: {
      long double s = 0.0L;
      for (double x : c.u) s += std::exp(static_cast<long double>(kind.t * x));
      for (double x : c.v) s += std::exp(static_cast<long double>(kind.t * x));
      return static_cast<double>(std::log(s) / kind.t);
    }
    case PairedLoss::sum_sq: return mean_square(c.u) + mean_square(c.v);
    case PairedLoss::sum_sq_weighted: return c.fro_v * mean_square(c.u) + c.fro_u * mean_square(c.v);
  }
  return 0.0;
}

struct Pair {
  DenseMatrix w1, w2, m;
};

Pair random_pair(Rng& rng, std::size_t d1, std::size_t h, std::size_t d3) {
  Pair p{gaussian_matrix(d1, h, rng), gaussian_matrix(h, d3, rng), gaussian_matrix(h, h, rng)};
  p.m *= 0.2;
  p.m += DenseMatrix::identity(h);
  return p;
}

// Smallest gap between the top two |entries| over every channel of U and V.
double channel_gap(const Pair& p) {
  const auto u = matmul(p.w1, p.m);
  const auto v = matmul(inverse(p.m), p.w2).transpose();
  double gap = 1e300;
  for (const auto* x : {&u, &v}) {
    for (std::size_t i = 0; i < x->rows(); ++i) {
      double first = 0.0, second = 0.0;
      for (double e : x->row(i)) {
        const double a = std::abs(e);
        if (a > first) {
          second = first;
          first = a;
        } else if (a > second) {
          second = a;
        }
      }
      gap = std::min(gap, first - second);
    }
  }
  return gap;
}

const PairedLossKind kAllLosses[] = {PairedLossKind::log_sum_exp(3.0), PairedLossKind::sum_sq(), PairedLossKind::sum_sq_weighted()};

}  // namespace

TEST(PseudoLoss, MatchesOracle) {
  Rng rng(Seed{1});
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_pair(rng, 5, 4, 6);
    for (const auto& kind : kAllLosses) {
      const double got = paired_pseudo_loss(p.w1, p.w2, p.m, kind);
      EXPECT_NEAR(got, oracle_loss(p.w1, p.w2, p.m, kind), 1e-10 * std::abs(got)) << to_string(kind.loss);
    }
  }
}

TEST(PseudoLoss, LogSumExpBracketsMaximum) {
  Rng rng(Seed{2});
  for (double t : {0.5, 5.0, 50.0}) {
    const auto p = random_pair(rng, 6, 4, 3);
    const auto c = channel_maxima(p.w1, p.w2, p.m);
    double mx = 0.0;
    for (double x : c.u) mx = std::max(mx, x);
    for (double x : c.v) mx = std::max(mx, x);
    const double lse = paired_pseudo_loss(p.w1, p.w2, p.m, PairedLossKind::log_sum_exp(t));
    EXPECT_GE(lse, mx - 1e-12);
    EXPECT_LE(lse, mx + std::log(9.0) / t + 1e-12);
  }
}

TEST(PseudoLoss, LogSumExpIsStableForLargeT) {
  Rng rng(Seed{3});
  const auto p = random_pair(rng, 4, 4, 4);
  const double lse = paired_pseudo_loss(p.w1 * 100.0, p.w2 * 100.0, p.m, PairedLossKind::log_sum_exp(50.0));
  EXPECT_TRUE(std::isfinite(lse));
}

TEST(PseudoLoss, InvariantUnderSignedPermutation) {
  // a signed permutation only relabels and flips channels of U and V
  Rng rng(Seed{4});
  const auto p = random_pair(rng, 5, 3, 5);
  const DenseMatrix perm{{0, -1, 0}, {0, 0, 1}, {1, 0, 0}};
  const auto m2 = matmul(p.m, perm);
  for (const auto& kind : kAllLosses)
    EXPECT_NEAR(paired_pseudo_loss(p.w1, p.w2, m2, kind), paired_pseudo_loss(p.w1, p.w2, p.m, kind), 1e-10);
}

TEST(PseudoLoss, ShapeMismatch) {
  EXPECT_THROW(paired_pseudo_loss(DenseMatrix(3, 4, 1.0), DenseMatrix(3, 2, 1.0), DenseMatrix::identity(4), {}), ShapeError);
  EXPECT_THROW(paired_pseudo_loss(DenseMatrix(3, 4, 1.0), DenseMatrix(4, 2, 1.0), DenseMatrix(4, 4), {}), NumericalError);
}

TEST(OrthPenalty, KnownValues) {
  EXPECT_NEAR(orth_penalty(DenseMatrix::identity(4) * 2.0), 3.0, 1e-12);
  EXPECT_NEAR(orth_penalty(DenseMatrix::identity(5)), 0.0, 1e-15);
  EXPECT_LT(orth_penalty(random_rotation(16, Seed{1})), 1e-12);
  EXPECT_THROW(orth_penalty(DenseMatrix(2, 3)), ShapeError);
}

TEST(OrthPenalty, InvariantUnderRotation) {
  Rng rng(Seed{5});
  const auto m = gaussian_matrix(6, 6, rng);
  const auto q = random_rotation(6, Seed{2});
  EXPECT_NEAR(orth_penalty(matmul(q, m)), orth_penalty(m), 1e-12);
}

TEST(OrthPenalty, GradientZeroOnOrthogonalGroup) {
  EXPECT_EQ(orth_penalty_grad(random_rotation(8, Seed{3})), DenseMatrix(8, 8));
}

TEST(OrthPenalty, GradientMatchesFiniteDifferences) {
  Rng rng(Seed{6});
  for (int trial = 0; trial < 20; ++trial) {
    auto m = gaussian_matrix(4, 4, rng);
    m += DenseMatrix::identity(4);
    const auto numeric = oracle::numeric_gradient(m, [](const DenseMatrix& x) { return orth_penalty(x); });
    EXPECT_LT(oracle::relative_gap(orth_penalty_grad(m), numeric), 1e-4);
  }
}

TEST(PairedGradient, MatchesFiniteDifferencesForEveryLoss) {
  Rng rng(Seed{7});
  for (const auto& kind : kAllLosses) {
    int checked = 0;
    while (checked < 20) {
      const auto p = random_pair(rng, 3 + rng.next_u64() % 4, 2 + rng.next_u64() % 4, 3 + rng.next_u64() % 4);
      if (channel_gap(p) < 1e-2) continue;
      const auto g = paired_grad(p.w1, p.w2, p.m, kind, 0.1);
      const auto numeric = oracle::numeric_gradient(p.m, [&](const DenseMatrix& x) {
        return paired_pseudo_loss(p.w1, p.w2, x, kind) + 0.1 * orth_penalty(x);
      });
      EXPECT_LT(oracle::relative_gap(g, numeric), 1e-4) << to_string(kind.loss) << " trial " << checked;
      ++checked;
    }
  }
}

TEST(PairedGradient, WeightedLossScalesCubically) {
  Rng rng(Seed{8});
  const auto p = random_pair(rng, 4, 3, 4);
  const auto kind = PairedLossKind::sum_sq_weighted();
  const double base = paired_pseudo_loss(p.w1, p.w2, p.m, kind);
  EXPECT_NEAR(paired_pseudo_loss(p.w1 * 2.0, p.w2 * 2.0, p.m, kind), 8.0 * base, 1e-10 * base);
}

TEST(Cayley, ZeroGradientKeepsM) {
  const auto q = random_rotation(5, Seed{4});
  CayleyState st;
  EXPECT_LT(oracle::max_abs_diff(cayley_step(q, DenseMatrix(5, 5), 0.1, st), q), 1e-15);
}

TEST(Cayley, TwoByTwoClosedForm) {
  // from M = I the update is a rotation whose angle follows from c = lr·(g₁₂ - g₂₁)/2
  const DenseMatrix g{{0.3, 0.8}, {-0.4, 1.2}};
  const double lr = 0.5;
  const double c = lr * (g(0, 1) - g(1, 0)) / 2.0;
  const DenseMatrix expect{{(1 - c * c) / (1 + c * c), -2 * c / (1 + c * c)}, {2 * c / (1 + c * c), (1 - c * c) / (1 + c * c)}};
  CayleyState st;
  EXPECT_LT(oracle::max_abs_diff(cayley_step(DenseMatrix::identity(2), g, lr, st), expect), 1e-14);
}

TEST(Cayley, StaysOrthogonal) {
  Rng rng(Seed{9});
  CayleyState st;
  st.reorthonormalize_every = 0;
  DenseMatrix m = random_rotation(8, Seed{5});
  for (int s = 0; s < 500; ++s) m = cayley_step(m, gaussian_matrix(8, 8, rng), 0.05, st);
  EXPECT_LT(orthogonality_defect(m), 1e-10);
  EXPECT_EQ(st.steps, 500);
}

TEST(OptimizePaired, ProductIsPreserved) {
  Rng rng(Seed{10});
  const auto w1 = heavy_tailed_matrix(24, 8, rng, 0.05, 10.0);
  const auto w2 = heavy_tailed_matrix(8, 24, rng, 0.05, 10.0);
  PairedOptConfig cfg;
  cfg.iterations = 300;
  cfg.checkpoint_every = 50;
  const auto res = optimize_paired(w1, w2, cfg, PairedLossKind::log_sum_exp(5.0), Seed{1});
  const auto& t = res.transform;
  EXPECT_LT(oracle::relative_gap(matmul(matmul(w1, t.m), matmul(t.m_inv, w2)), matmul(w1, w2)), 1e-10);
  EXPECT_LE(t.relative_pqe, res.trace.front().relative_pqe);
  EXPECT_EQ(res.trace.size(), 7u);
  EXPECT_EQ(res.trace.back().iteration, 300);
}

TEST(OptimizePaired, IdentityStartMatchesIndependentRounding) {
  Rng rng(Seed{11});
  const auto w1 = gaussian_matrix(6, 4, rng);
  const auto w2 = gaussian_matrix(4, 6, rng);
  PairedOptConfig cfg;
  cfg.iterations = 0;
  const auto res = optimize_paired(w1, w2, cfg, {}, Seed{1});
  const auto q = PairQuantConfig::per_channel(4);
  EXPECT_NEAR(res.transform.relative_pqe,
              relative_pqe(w1, w2, quantize_dequantize(w1, q.first), quantize_dequantize(w2, q.second)), 1e-12);
}

TEST(OptimizePaired, CayleyRunStaysOnOrthogonalGroup) {
  Rng rng(Seed{12});
  const auto w1 = heavy_tailed_matrix(32, 16, rng, 0.02, 20.0);
  const auto w2 = heavy_tailed_matrix(16, 32, rng, 0.02, 20.0);
  PairedOptConfig cfg;
  cfg.optimizer = PairedOptimizer::cayley;
  cfg.lr = 1e-2;
  cfg.iterations = 1000;
  cfg.checkpoint_every = 100;
  const auto res = optimize_paired(w1, w2, cfg, PairedLossKind::log_sum_exp(5.0), Seed{2});
  for (const auto& tp : res.trace) {
    EXPECT_LT(tp.orth_penalty * 4.0, 1e-4) << "iteration " << tp.iteration;
    EXPECT_GE(tp.min_sigma, 0.99);
    EXPECT_LE(tp.max_sigma, 1.01);
  }
  EXPECT_TRUE(res.warnings.empty());
}

TEST(OptimizePaired, RejectsBadConfig) {
  PairedOptConfig cfg;
  cfg.lr = 0.0;
  EXPECT_THROW(optimize_paired(DenseMatrix(2, 2, 1.0), DenseMatrix(2, 2, 1.0), cfg, {}, Seed{0}), ConfigError);
  cfg.lr = 1e-2;
  EXPECT_THROW(optimize_paired(DenseMatrix(2, 2, 1.0), DenseMatrix(2, 2, 1.0), cfg, PairedLossKind::log_sum_exp(0.0), Seed{0}),
               ConfigError);
  EXPECT_THROW(optimize_paired(DenseMatrix(2, 3, 1.0), DenseMatrix(2, 2, 1.0), cfg, {}, Seed{0}), ShapeError);
}
