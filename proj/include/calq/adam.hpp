#pragma once

#include <cmath>

#include "calq/error.hpp"
#include "calq/matrix.hpp"

namespace calq {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline void validate(const AdamConfig& c) {
  if (!(c.lr > 0.0)) throw ConfigError("adam: learning rate must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0))
    throw ConfigError("adam: betas must lie in [0, 1)");
  if (!(c.eps > 0.0)) throw ConfigError("adam: eps must be positive");
}

// First/second moment buffers for one matrix parameter.
class AdamState {
 public:
  AdamState() = default;
  AdamState(std::size_t rows, std::size_t cols) : m_(rows, cols), v_(rows, cols) {}

  void step(DenseMatrix& param, const DenseMatrix& grad, const AdamConfig& c) {
    if (m_.empty()) *this = AdamState(param.rows(), param.cols());
    ++t_;
    const double bc1 = 1.0 - std::pow(c.beta1, t_);
    const double bc2 = 1.0 - std::pow(c.beta2, t_);
    auto p = param.data();
    auto g = grad.data();
    auto m = m_.data();
    auto v = v_.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }

  long steps() const noexcept { return t_; }

 private:
  DenseMatrix m_, v_;
  long t_ = 0;
};

}  // namespace calq
