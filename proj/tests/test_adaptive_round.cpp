#include <gtest/gtest.h>

#include "calq/adaptive_round.hpp"
#include "calq/synthetic.hpp"
#include "oracles.hpp"

using namespace calq;

namespace {

const DenseMatrix kToy{{1.0, 0.0}, {0.0, 0.6}};

AdaptiveRoundConfig toy_config(int iterations) {
  AdaptiveRoundConfig c;
  c.iterations = iterations;
  c.quant = PairQuantConfig::per_tensor(1);
  return c;
}

}  // namespace

TEST(AdaptiveRound, ToyHalfIteration) {
  const auto res = adaptive_round(kToy, kToy, toy_config(0));
  EXPECT_NEAR(res.independent_pqe, 0.64, 1e-6);
  EXPECT_NEAR(res.best_pqe, 0.36, 1e-6);
  ASSERT_EQ(res.trace.size(), 2u);
  EXPECT_EQ(res.trace[1].side, RoundSide::second);
  EXPECT_EQ(res.best_step, 1u);
  EXPECT_EQ(dequantize(res.first), (DenseMatrix{{1.0, 0.0}, {0.0, 1.0}}));
  EXPECT_EQ(dequantize(res.second), (DenseMatrix{{1.0, 0.0}, {0.0, 0.0}}));
}

TEST(AdaptiveRound, ToyFullIterationsNeverWorse) {
  const auto res = adaptive_round(kToy, kToy, toy_config(3));
  EXPECT_LE(res.best_pqe, 0.36 + 1e-12);
  EXPECT_EQ(res.trace.size(), 1u + 2u * static_cast<std::size_t>(res.iterations_completed));
  for (const auto& tp : res.trace) EXPECT_GE(tp.pqe, res.best_pqe);
}

TEST(AdaptiveRound, ExactlyRepresentableReturnsImmediately) {
  // entries already on the 1-bit grid of each row
  const DenseMatrix w1{{0.0, 2.0}, {-1.0, 1.0}};
  const DenseMatrix w2{{3.0, 1.0}, {0.0, 0.0}};
  AdaptiveRoundConfig cfg;
  cfg.quant = PairQuantConfig::per_channel(1);
  const auto res = adaptive_round(w1, w2, cfg);
  EXPECT_EQ(res.best_pqe, 0.0);
  EXPECT_EQ(res.trace.size(), 1u);
  EXPECT_EQ(res.iterations_completed, 0);
}

TEST(AdaptiveRound, ZeroProductKeepsIndependent) {
  // W1·W2 = 0 while the rounded product is not
  const DenseMatrix w1{{1.0, 0.5}, {0.2, 0.1}};
  const DenseMatrix w2{{1.0, 1.0}, {-2.0, -2.0}};
  AdaptiveRoundConfig cfg;
  cfg.quant = PairQuantConfig::per_tensor(1);
  const auto res = adaptive_round(w1, w2, cfg);
  EXPECT_GT(res.independent_pqe, 0.0);
  EXPECT_FALSE(res.note.empty());
  EXPECT_EQ(res.best_step, 0u);
}

TEST(AdaptiveRound, TraceLengthAndBestSelection) {
  Rng rng(Seed{1});
  const auto w1 = gaussian_matrix(12, 6, rng);
  const auto w2 = gaussian_matrix(6, 12, rng);
  AdaptiveRoundConfig cfg;
  cfg.iterations = 4;
  cfg.early_stop = false;
  const auto res = adaptive_round(w1, w2, cfg);
  ASSERT_EQ(res.trace.size(), 9u);
  EXPECT_EQ(res.iterations_completed, 4);
  double best = res.trace[0].pqe;
  for (const auto& tp : res.trace) best = std::min(best, tp.pqe);
  EXPECT_EQ(res.best_pqe, best);
  EXPECT_EQ(res.trace[res.best_step].pqe, best);
  EXPECT_NEAR(pqe(w1, w2, dequantize(res.first), dequantize(res.second)), best, 1e-12);
  for (std::size_t s = 1; s < res.trace.size(); ++s)
    EXPECT_EQ(res.trace[s].side, s % 2 ? RoundSide::second : RoundSide::first);
}

TEST(AdaptiveRound, SecondIterateMatchesPseudoinverseTarget) {
  Rng rng(Seed{2});
  const auto w1 = gaussian_matrix(10, 4, rng);
  const auto w2 = gaussian_matrix(4, 8, rng);
  AdaptiveRoundConfig cfg;
  cfg.iterations = 0;
  const auto res = adaptive_round(w1, w2, cfg);
  const auto d1 = dequantize(quantize(w1, cfg.quant.first));
  const auto expected = quantize_dequantize(compensation_target(d1, w1, w2), cfg.quant.second);
  EXPECT_NEAR(res.trace[1].pqe, pqe(w1, w2, d1, expected), 1e-12);
}

TEST(AdaptiveRound, NotWorseThanIndependentOnRandomPairs) {
  // over Gaussian 16x8 / 8x16 pairs at 4 bits the best iterate improves on independent rounding
  int not_worse = 0;
  double reduction = 0.0;
  for (std::uint64_t s = 0; s < 40; ++s) {
    Rng rng(Seed{100 + s});
    const auto w1 = gaussian_matrix(16, 8, rng);
    const auto w2 = gaussian_matrix(8, 16, rng);
    const auto res = adaptive_round(w1, w2, AdaptiveRoundConfig{});
    if (res.best_pqe <= res.independent_pqe) ++not_worse;
    reduction += 1.0 - res.best_pqe / res.independent_pqe;
  }
  EXPECT_EQ(not_worse, 40);
  EXPECT_GE(reduction / 40.0, 0.10);
}

TEST(CompensationTarget, ExactFirstFactorReturnsW2) {
  Rng rng(Seed{3});
  const auto w1 = gaussian_matrix(8, 4, rng);  // full column rank
  const auto w2 = gaussian_matrix(4, 5, rng);
  EXPECT_LT(oracle::max_abs_diff(compensation_target(w1, w1, w2), w2), 1e-10);
}

TEST(CompensationTarget, ProjectsOntoRangeOfW1Hat) {
  // with Ŵ₁ of reduced rank the target minimizes ‖Ŵ₁X - W₁W₂‖: the residual is orthogonal to range(Ŵ₁)
  Rng rng(Seed{4});
  const auto w1 = gaussian_matrix(6, 3, rng);
  const auto w2 = gaussian_matrix(3, 4, rng);
  auto w1_hat = w1;
  for (std::size_t i = 0; i < 6; ++i) w1_hat(i, 2) = w1_hat(i, 0);
  const auto x = compensation_target(w1_hat, w1, w2);
  const auto residual = matmul(w1_hat, x) - matmul(w1, w2);
  EXPECT_LT(frobenius(matmul_tn(w1_hat, residual)), 1e-10);
  EXPECT_THROW(compensation_target(DenseMatrix(5, 3), w1, w2), ShapeError);
}

TEST(AdaptiveRoundWith, IdentityCodecIsExact) {
  Rng rng(Seed{5});
  const auto w1 = gaussian_matrix(7, 3, rng);
  const auto w2 = gaussian_matrix(3, 5, rng);
  const auto res = adaptive_round_with(w1, w2, IdentityCodec{}, IdentityCodec{}, 3);
  EXPECT_EQ(res.best_pqe, 0.0);
  EXPECT_EQ(res.first, w1);
}

TEST(AdaptiveRoundWith, RequantizingDecodedCodesIsStable) {
  Rng rng(Seed{6});
  const auto w1 = gaussian_matrix(8, 4, rng);
  const auto w2 = gaussian_matrix(4, 8, rng);
  const QuantCodec codec{QuantConfig{4, Granularity::per_channel(Axis::rows), RoundingMode::nearest, Seed{0}}};
  const auto res = adaptive_round_with(w1, w2, codec, QuantCodec{{4, Granularity::per_channel(Axis::cols), RoundingMode::nearest, Seed{0}}}, 2);
  const auto d1 = codec.decode(res.first);
  EXPECT_EQ(codec.decode(codec.encode(d1)), d1);
}

TEST(AdaptiveRound, Validation) {
  AdaptiveRoundConfig cfg;
  cfg.rcond = 0.0;
  EXPECT_THROW(adaptive_round(kToy, kToy, cfg), ConfigError);
  cfg = AdaptiveRoundConfig{};
  cfg.iterations = -1;
  EXPECT_THROW(adaptive_round(kToy, kToy, cfg), ConfigError);
  EXPECT_THROW(adaptive_round(DenseMatrix(2, 3, 1.0), kToy, AdaptiveRoundConfig{}), ShapeError);
}

TEST(ComplexityReport, Formula) {
  EXPECT_EQ(complexity_report(256, 64, 3), 3.0 * 256 * 64 * 64);
  EXPECT_EQ(complexity_report(64, 256, 0), 64.0 * 256 * 64);
  EXPECT_THROW(complexity_report(0, 4, 1), DomainError);
}
