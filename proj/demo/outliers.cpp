// Quantizes one heavy-tailed 256x256 matrix at 4 bits three ways and prints the relative
// reconstruction error of each: plain uniform, randomized Hadamard blocks, learned blocks.
#include <cstdio>
#include <cstdlib>

#include "calq/calq.hpp"

int main(int argc, char** argv) {
  using namespace calq;
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;
  const std::size_t k = 32;
  Rng rng(Seed{seed});
  const auto w = heavy_tailed_matrix(256, 256, rng);

  QuantConfig q;
  q.bits = 4;
  q.granularity = Granularity::per_channel(Axis::rows);

  const double uniform = relative_error(w, quantize_dequantize(w, q));
  const auto hadamard = hadamard_blocks(256, k, derive_seed(Seed{seed}, "hadamard"));
  const double random = relative_error(w, reconstruct(quantize_with_transform(w, hadamard, q)));

  SingleLossConfig cfg;
  cfg.iterations = 1000;
  cfg.adam.lr = 1e-2;
  const auto learned = optimize_single(w, k, cfg, derive_seed(Seed{seed}, "learned"));
  const double ours = relative_error(w, reconstruct(quantize_with_transform(w, learned.transform, q)));

  std::printf("seed %llu, k = %zu\n", static_cast<unsigned long long>(seed), k);
  std::printf("  uniform            %.4f\n", uniform);
  std::printf("  hadamard blocks    %.4f\n", random);
  std::printf("  learned blocks     %.4f   (surrogate %.4g -> %.4g)\n", ours, learned.initial_loss, learned.best_loss);
  return 0;
}
