#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "calq/adaptive_round.hpp"
#include "calq/linalg.hpp"
#include "calq/paired_transform.hpp"
#include "calq/quantizer.hpp"
#include "calq/single_transform.hpp"

namespace calq {

using QuantizerFn = std::function<QuantizedMatrix(const DenseMatrix&, const QuantConfig&)>;

struct SelfcheckItem {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelfcheckReport {
  std::vector<SelfcheckItem> items;
  bool passed() const {
    for (const auto& i : items)
      if (!i.passed) return false;
    return !items.empty();
  }
};

namespace detail {

struct FnCodec {
  const QuantizerFn* fn;
  QuantConfig config;
  QuantizedMatrix encode(const DenseMatrix& w) const { return (*fn)(w, config); }
  DenseMatrix decode(const QuantizedMatrix& q) const { return dequantize(q); }
};

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ‖analytic - central differences of f‖_F / ‖analytic‖_F.
template <typename F>
double finite_difference_gap(DenseMatrix x, const DenseMatrix& analytic, F f, double h = 1e-5) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    num += (fd - analytic.data()[i]) * (fd - analytic.data()[i]);
    den += analytic.data()[i] * analytic.data()[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace detail

// Embedded sanity suite: the 2x2 worked example, the element-wise error bound and gradient checks.
// `quantizer` is injectable so a deliberately broken implementation can be shown to fail.
inline SelfcheckReport run_selfcheck(const QuantizerFn& quantizer = [](const DenseMatrix& w, const QuantConfig& c) { return quantize(w, c); }) {
  SelfcheckReport rep;
  auto add = [&](std::string name, bool ok, std::string detail) { rep.items.push_back({std::move(name), ok, std::move(detail)}); };

  // 2x2 example: W₁ = W₂ = diag(1, 0.6) at 1 bit, one scale for the whole matrix.
  try {
    const DenseMatrix w{{1.0, 0.0}, {0.0, 0.6}};
    QuantConfig c;
    c.bits = 1;
    c.granularity = Granularity::per_tensor();
    const detail::FnCodec codec{&quantizer, c};
    auto res = adaptive_round_with(w, w, codec, codec, 0, kDefaultRcond, false);
    add("toy_independent_pqe", std::abs(res.independent_pqe - 0.64) <= 1e-6, "PQE " + detail::fmt(res.independent_pqe) + ", expected 0.64");
    add("toy_adaptive_pqe", std::abs(res.best_pqe - 0.36) <= 1e-6, "PQE " + detail::fmt(res.best_pqe) + ", expected 0.36");
  } catch (const std::exception& e) {
    add("toy_example", false, e.what());
  }

  // Element-wise bound on a fixed family of random matrices and configurations.
  try {
    Rng rng(Seed{20240611});
    std::size_t violations = 0, checked = 0;
    const Granularity grans[] = {Granularity::per_tensor(), Granularity::per_channel(Axis::rows), Granularity::per_channel(Axis::cols),
                                 Granularity::subchannel(4, Axis::rows), Granularity::subchannel(4, Axis::cols)};
    for (int trial = 0; trial < 40; ++trial) {
      const std::size_t rows = 4 * (1 + rng.next_u64() % 6), cols = 4 * (1 + rng.next_u64() % 6);
      DenseMatrix w = gaussian_matrix(rows, cols, rng);
      w *= std::exp(4.0 * rng.uniform() - 2.0);
      QuantConfig c;
      c.bits = 1 + static_cast<int>(trial % 8);
      c.granularity = grans[trial % 5];
      const auto report = elementwise_error_bound(quantizer(w, c), w);
      violations += report.violations;
      checked += report.checked;
    }
    add("error_bound", violations == 0, std::to_string(violations) + " violations in " + std::to_string(checked) + " elements");
  } catch (const std::exception& e) {
    add("error_bound", false, e.what());
  }

  // Analytic gradients against central differences.
  try {
    Rng rng(Seed{7});
    const auto w = gaussian_matrix(4, 16, rng);
    const auto b = random_rotation(4, Seed{11}) + gaussian_matrix(4, 4, rng) * 0.1;
    SingleLossConfig cfg;
    DenseMatrix g;
    block_surrogate(b, w, cfg, &g);
    const double gap = detail::finite_difference_gap(b, g, [&](const DenseMatrix& x) { return block_surrogate(x, w, cfg); });
    add("single_gradient", gap <= 1e-4, "relative gap " + detail::fmt(gap));
  } catch (const std::exception& e) {
    add("single_gradient", false, e.what());
  }
  try {
    Rng rng(Seed{13});
    const auto w1 = gaussian_matrix(10, 6, rng), w2 = gaussian_matrix(6, 12, rng);
    const auto m = DenseMatrix::identity(6) + gaussian_matrix(6, 6, rng) * 0.2;
    const auto kind = PairedLossKind::log_sum_exp(5.0);
    const auto g = paired_grad(w1, w2, m, kind, 0.1);
    const double gap = detail::finite_difference_gap(
        m, g, [&](const DenseMatrix& x) { return paired_pseudo_loss(w1, w2, x, kind) + 0.1 * orth_penalty(x); });
    add("paired_gradient", gap <= 1e-4, "relative gap " + detail::fmt(gap));
  } catch (const std::exception& e) {
    add("paired_gradient", false, e.what());
  }
  return rep;
}

}  // namespace calq
