// The 2x2 pair W1 = W2 = diag(1, 0.6) at one bit: independent rounding against one
// compensated half step.
#include <cstdio>
#include <sstream>

#include "calq/calq.hpp"

int main() {
  using namespace calq;
  const DenseMatrix w{{1.0, 0.0}, {0.0, 0.6}};
  AdaptiveRoundConfig cfg;
  cfg.iterations = 0;
  cfg.quant = PairQuantConfig::per_tensor(1);
  const auto res = adaptive_round(w, w, cfg);

  std::printf("W1 W2 =\n%s\n", [&] {
    std::ostringstream os;
    os << matmul(w, w);
    return os.str();
  }().c_str());
  for (const auto& p : res.trace) std::printf("step %zu  %-11s  PQE %.4f\n", p.step, to_string(p.side), p.pqe);
  std::ostringstream os;
  os << dequantize(res.second);
  std::printf("compensated W2 =\n%s\n", os.str().c_str());
  return 0;
}
