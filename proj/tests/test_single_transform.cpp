#include <gtest/gtest.h>

#include <cmath>

#include "calq/single_transform.hpp"
#include "calq/synthetic.hpp"
#include "oracles.hpp"

using namespace calq;

namespace {

// Surrogate computed from the assembled dense M, with M⁻¹ taken from the SVD pseudoinverse.
double dense_surrogate(const DenseMatrix& m, const DenseMatrix& w, int bits) {
  const auto inv = pinv(m);
  const auto mw = oracle::triple_loop_product(m, w);
  const double levels = std::pow(2.0, bits) - 1.0;
  double total = 0.0;
  for (std::size_t j = 0; j < m.rows(); ++j) {
    double col = 0.0, mx = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) col += inv(i, j) * inv(i, j);
    for (std::size_t a = 0; a < w.cols(); ++a) mx = std::max(mx, std::abs(mw(j, a)));
    total += col * mx * mx;
  }
  return total * static_cast<double>(w.cols()) / (levels * levels);
}

BlockDiagTransform random_blocks(std::size_t d, std::size_t k, Rng& rng) {
  std::vector<DenseMatrix> blocks;
  for (std::size_t b = 0; b < d / k; ++b) {
    auto g = gaussian_matrix(k, k, rng);
    g *= 0.3;
    g += DenseMatrix::identity(k);
    blocks.push_back(g);
  }
  return BlockDiagTransform(d, k, blocks);
}

SingleLossConfig loss_config(int bits, InfNormMode mode = InfNormMode::exact_subgradient) {
  SingleLossConfig c;
  c.bits = bits;
  c.inf_norm = mode;
  return c;
}

// Smallest gap between the two largest |entries| in any row of B·W; small gaps make the
// exact ∞-norm non-differentiable within a finite-difference step.
double row_max_gap(const DenseMatrix& b, const DenseMatrix& w) {
  const auto y = matmul(b, w);
  double gap = 1e300;
  for (std::size_t j = 0; j < y.rows(); ++j) {
    double first = 0.0, second = 0.0;
    for (double v : y.row(j)) {
      const double a = std::abs(v);
      if (a > first) {
        second = first;
        first = a;
      } else if (a > second) {
        second = a;
      }
    }
    gap = std::min(gap, first - second);
  }
  return gap;
}

}  // namespace

TEST(BlockDiag, InitBlocksAreRotations) {
  const auto m = init_blocks(12, 4, Seed{5});
  EXPECT_EQ(m.block_count(), 3u);
  for (const auto& b : m.blocks()) {
    EXPECT_LT(orthogonality_defect(b), 1e-12);
    EXPECT_NEAR(determinant(b), 1.0, 1e-12);
  }
  EXPECT_NE(m.blocks()[0], m.blocks()[1]);
  EXPECT_EQ(init_blocks(12, 4, Seed{5}).blocks(), m.blocks());
}

TEST(BlockDiag, AssembleIsBlockDiagonal) {
  Rng rng(Seed{1});
  const auto m = random_blocks(6, 2, rng);
  const auto dense = m.assemble();
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      if (i / 2 != j / 2) {
        EXPECT_EQ(dense(i, j), 0.0);
      }
    }
  EXPECT_LT(oracle::max_abs_diff(oracle::triple_loop_product(dense, m.assemble_inverse()), DenseMatrix::identity(6)), 1e-12);
}

TEST(BlockDiag, ApplyMatchesDenseProduct) {
  Rng rng(Seed{2});
  const auto m = random_blocks(8, 4, rng);
  const auto w = gaussian_matrix(8, 5, rng);
  EXPECT_LT(oracle::max_abs_diff(m.apply(w), oracle::triple_loop_product(m.assemble(), w)), 1e-12);
  EXPECT_LT(oracle::max_abs_diff(m.apply_inverse(m.apply(w)), w), 1e-12);
}

TEST(BlockDiag, RejectsBadBlockSize) {
  EXPECT_THROW(init_blocks(10, 4, Seed{0}), ConfigError);
  EXPECT_THROW(init_blocks(10, 0, Seed{0}), ConfigError);
  EXPECT_THROW(hadamard_blocks(12, 6, Seed{0}), DomainError);
}

TEST(BlockDiag, SingularBlockReportsIndex) {
  std::vector<DenseMatrix> blocks{DenseMatrix::identity(2), DenseMatrix(2, 2), DenseMatrix::identity(2)};
  try {
    BlockDiagTransform(6, 2, blocks);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.index(), 1);
    EXPECT_NE(std::string(e.what()).find("block 1"), std::string::npos);
  }
}

TEST(BlockDiag, FlopsPerVector) { EXPECT_EQ(BlockDiagTransform::identity(256, 32).flops_per_vector(), 256u * 32u); }

TEST(Surrogate, IdentityOnIdentity) {
  // every row of I has ∞-norm 1 and every column of I has norm 1
  for (int bits : {1, 2, 4, 8}) {
    for (std::size_t d : {2u, 4u, 8u}) {
      const double levels = std::pow(2.0, bits) - 1.0;
      const double expect = static_cast<double>(d * d) / (levels * levels);
      EXPECT_NEAR(surrogate_loss(BlockDiagTransform::identity(d, d), DenseMatrix::identity(d), loss_config(bits)), expect, 1e-12);
      EXPECT_NEAR(surrogate_loss(BlockDiagTransform::identity(d, 1), DenseMatrix::identity(d), loss_config(bits)), expect, 1e-12);
    }
  }
}

TEST(Surrogate, MatchesDenseOracle) {
  Rng rng(Seed{3});
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = random_blocks(8, trial % 2 ? 4 : 2, rng);
    const auto w = gaussian_matrix(8, 7, rng);
    const double got = surrogate_loss(m, w, loss_config(3));
    EXPECT_NEAR(got, dense_surrogate(m.assemble(), w, 3), 1e-10 * got);
  }
}

TEST(Surrogate, QuadraticInW) {
  Rng rng(Seed{4});
  const auto m = random_blocks(6, 3, rng);
  const auto w = gaussian_matrix(6, 9, rng);
  const double base = surrogate_loss(m, w, loss_config(4));
  for (double c : {0.5, 2.0, -3.0}) EXPECT_NEAR(surrogate_loss(m, w * c, loss_config(4)), c * c * base, 1e-12 * c * c * base);
}

TEST(Surrogate, InvariantToScalingM) {
  Rng rng(Seed{5});
  const auto m = random_blocks(4, 4, rng);
  const auto w = gaussian_matrix(4, 6, rng);
  const double base = surrogate_loss(m, w, loss_config(4));
  const BlockDiagTransform scaled(4, 4, {m.blocks()[0] * 7.5});
  EXPECT_NEAR(surrogate_loss(scaled, w, loss_config(4)), base, 1e-12 * base);
}

TEST(Surrogate, SumsOverBlocks) {
  Rng rng(Seed{6});
  const auto m = random_blocks(12, 3, rng);
  const auto w = gaussian_matrix(12, 5, rng);
  double parts = 0.0;
  for (std::size_t b = 0; b < 4; ++b) parts += block_surrogate(m.blocks()[b], w.block(b * 3, 0, 3, 5), loss_config(4));
  EXPECT_NEAR(surrogate_loss(m, w, loss_config(4)), parts, 1e-12 * parts);
}

TEST(Surrogate, BlockPermutationInvariance) {
  // swapping two blocks together with their row slices of W leaves the loss unchanged
  Rng rng(Seed{7});
  const auto m = random_blocks(8, 4, rng);
  const auto w = gaussian_matrix(8, 5, rng);
  DenseMatrix w_swapped(8, 5);
  w_swapped.set_block(0, 0, w.block(4, 0, 4, 5));
  w_swapped.set_block(4, 0, w.block(0, 0, 4, 5));
  const BlockDiagTransform swapped(8, 4, {m.blocks()[1], m.blocks()[0]});
  EXPECT_NEAR(surrogate_loss(swapped, w_swapped, loss_config(4)), surrogate_loss(m, w, loss_config(4)), 1e-12);
}

TEST(Surrogate, ShapeMismatch) {
  EXPECT_THROW(surrogate_loss(BlockDiagTransform::identity(4, 2), DenseMatrix(6, 3, 1.0), loss_config(4)), ShapeError);
}

TEST(Surrogate, SmoothedApproachesExact) {
  Rng rng(Seed{8});
  const auto m = random_blocks(4, 4, rng);
  const auto w = gaussian_matrix(4, 16, rng);
  const double exact = surrogate_loss(m, w, loss_config(4));
  double previous_gap = 1e300;
  for (double tau : {10.0, 100.0, 1000.0}) {
    auto cfg = loss_config(4, InfNormMode::smoothed);
    cfg.tau = tau;
    const double gap = std::abs(surrogate_loss(m, w, cfg) - exact);
    EXPECT_LT(gap, previous_gap);
    previous_gap = gap;
  }
  EXPECT_LT(previous_gap / exact, 2e-2);
}

TEST(SurrogateGradient, ExactModeMatchesFiniteDifferences) {
  Rng rng(Seed{9});
  int checked = 0;
  while (checked < 20) {
    const std::size_t k = 2 + rng.next_u64() % 4;
    auto block = gaussian_matrix(k, k, rng);
    block += DenseMatrix::identity(k) * 2.0;
    const auto w = gaussian_matrix(k, 3 + rng.next_u64() % 6, rng);
    if (row_max_gap(block, w) < 1e-2) continue;
    const auto cfg = loss_config(4);
    DenseMatrix grad;
    block_surrogate(block, w, cfg, &grad);
    const auto numeric = oracle::numeric_gradient(block, [&](const DenseMatrix& b) { return block_surrogate(b, w, cfg); });
    EXPECT_LT(oracle::relative_gap(grad, numeric), 1e-4) << "trial " << checked;
    ++checked;
  }
}

TEST(SurrogateGradient, SmoothedModeMatchesFiniteDifferences) {
  Rng rng(Seed{10});
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 2 + trial % 4;
    auto block = gaussian_matrix(k, k, rng);
    block += DenseMatrix::identity(k) * 2.0;
    const auto w = gaussian_matrix(k, 6, rng);
    auto cfg = loss_config(3, InfNormMode::smoothed);
    cfg.tau = 5.0;
    DenseMatrix grad;
    block_surrogate(block, w, cfg, &grad);
    const auto numeric = oracle::numeric_gradient(block, [&](const DenseMatrix& b) { return block_surrogate(b, w, cfg); });
    EXPECT_LT(oracle::relative_gap(grad, numeric), 1e-4) << "trial " << trial;
  }
}

TEST(SurrogateGradient, StationaryAtSymmetricRotation) {
  // For W = I₂ over 2x2 rotations the loss is 2·max(cos², sin²)·const, minimized at 45°. The
  // tangent (skew) part of the smoothed gradient vanishes there.
  const double c = std::sqrt(0.5);
  const DenseMatrix r{{c, -c}, {c, c}};
  auto cfg = loss_config(4, InfNormMode::smoothed);
  cfg.tau = 50.0;
  DenseMatrix g;
  block_surrogate(r, DenseMatrix::identity(2), cfg, &g);
  const auto skew = matmul_nt(g, r) - matmul_nt(r, g);
  EXPECT_LT(frobenius(skew), 1e-6);

  const double at_min = block_surrogate(r, DenseMatrix::identity(2), cfg);
  for (double theta : {0.1, 0.5, 0.7, 1.0}) {
    const DenseMatrix rot{{std::cos(theta), -std::sin(theta)}, {std::sin(theta), std::cos(theta)}};
    EXPECT_GT(block_surrogate(rot, DenseMatrix::identity(2), cfg), at_min);
  }
}

TEST(SurrogateBound, MonteCarloBelowSurrogate) {
  // Expected stochastic-rounding error of M⁻¹·Q(MW) stays below the surrogate value.
  Rng rng(Seed{11});
  constexpr int kDraws = 400;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 4, cols = 6;
    const auto m = random_blocks(d, trial % 2 ? 2 : 4, rng);
    const auto w = gaussian_matrix(d, cols, rng);
    const int bits = 1 + trial % 4;
    QuantConfig q{bits, Granularity::per_channel(Axis::rows), RoundingMode::stochastic, Seed{0}};
    const auto mw = m.apply(w);
    double sum = 0.0, sum_sq = 0.0;
    for (int s = 0; s < kDraws; ++s) {
      q.seed = derive_seed(Seed{static_cast<std::uint64_t>(trial)}, static_cast<std::uint64_t>(s));
      const auto back = m.apply_inverse(dequantize(quantize_stochastic(mw, q)));
      const double e = std::pow(frobenius(back - w), 2);
      sum += e;
      sum_sq += e * e;
    }
    const double mean = sum / kDraws;
    const double se = std::sqrt(std::max(sum_sq / kDraws - mean * mean, 0.0) / kDraws);
    EXPECT_LE(mean, surrogate_loss(m, w, loss_config(bits)) + 3.0 * se) << "trial " << trial;
  }
}

TEST(OptimizeSingle, BestNotWorseThanInitial) {
  Rng rng(Seed{12});
  const auto w = heavy_tailed_matrix(16, 32, rng, 0.05, 20.0);
  SingleLossConfig cfg = loss_config(4);
  cfg.adam.lr = 1e-2;
  cfg.iterations = 200;
  const auto res = optimize_single(w, 8, cfg, Seed{1}, true);
  EXPECT_LE(res.best_loss, res.initial_loss);
  EXPECT_NEAR(surrogate_loss(res.transform, w, cfg), res.best_loss, 1e-9 * res.best_loss);
  EXPECT_FALSE(res.trace.empty());
  EXPECT_LT(res.transform.inverse_defect(), 1e-8);
}

TEST(OptimizeSingle, ZeroWeightsGiveZeroLoss) {
  SingleLossConfig cfg = loss_config(4);
  cfg.iterations = 10;
  const auto res = optimize_single(DenseMatrix(8, 4), 4, cfg, Seed{2});
  EXPECT_EQ(res.best_loss, 0.0);
  EXPECT_EQ(res.transform.block_count(), 2u);
}

TEST(OptimizeSingle, DeterministicForSeed) {
  Rng rng(Seed{13});
  const auto w = gaussian_matrix(8, 8, rng);
  SingleLossConfig cfg = loss_config(4);
  cfg.iterations = 50;
  EXPECT_EQ(optimize_single(w, 4, cfg, Seed{9}).transform.blocks(), optimize_single(w, 4, cfg, Seed{9}).transform.blocks());
}

TEST(OptimizeSingle, HadamardCompositionNeedsPowerOfTwo) {
  SingleLossConfig cfg = loss_config(4);
  cfg.iterations = 1;
  cfg.hadamard_count = 1;
  EXPECT_THROW(optimize_single(DenseMatrix(6, 3, 1.0), 3, cfg, Seed{0}), ConfigError);
  EXPECT_NO_THROW(optimize_single(DenseMatrix(8, 3, 1.0), 4, cfg, Seed{0}));
}

TEST(OptimizeSingle, SpreadsAnOutlier) {
  // one large entry dominates its row's range under plain quantization
  Rng rng(Seed{14});
  auto w = gaussian_matrix(32, 64, rng);
  w(3, 10) = 60.0;
  w(17, 40) = -45.0;
  const QuantConfig q{4, Granularity::per_channel(Axis::rows), RoundingMode::nearest, Seed{0}};
  const double plain = relative_error(w, quantize_dequantize(w, q));
  SingleLossConfig cfg = loss_config(4);
  cfg.adam.lr = 1e-2;
  cfg.iterations = 300;
  const auto res = optimize_single(w, 8, cfg, Seed{3});
  const double learned = relative_error(w, reconstruct(quantize_with_transform(w, res.transform, q)));
  EXPECT_LT(learned, plain);
}

TEST(TransformedQuantization, IdentityTransformEqualsPlain) {
  Rng rng(Seed{15});
  const auto w = gaussian_matrix(8, 12, rng);
  const QuantConfig q{3, Granularity::per_channel(Axis::rows), RoundingMode::nearest, Seed{0}};
  const auto tq = quantize_with_transform(w, BlockDiagTransform::identity(8, 4), q);
  EXPECT_EQ(tq.quantized, quantize(w, q));
  EXPECT_EQ(reconstruct(tq), dequantize(quantize(w, q)));
}

TEST(TransformedQuantization, HighPrecisionRoundTrip) {
  Rng rng(Seed{16});
  const auto w = gaussian_matrix(8, 12, rng);
  const auto m = init_blocks(8, 4, Seed{4});
  const QuantConfig q{8, Granularity::per_channel(Axis::rows), RoundingMode::nearest, Seed{0}};
  EXPECT_LT(relative_error(w, reconstruct(quantize_with_transform(w, m, q))), 1e-2);
}
