#pragma once

#include <cstddef>
#include <filesystem>
#include <string>

#include "calq/linalg.hpp"
#include "calq/manifest.hpp"
#include "calq/matrix.hpp"
#include "calq/random.hpp"

namespace calq {

// Gaussian entries times `scale`; each entry is independently multiplied by `outlier_gain`
// with probability `outlier_fraction`.
inline DenseMatrix heavy_tailed_matrix(std::size_t rows, std::size_t cols, Rng& rng, double outlier_fraction = 0.01,
                                       double outlier_gain = 100.0, double scale = 1.0) {
  DenseMatrix m(rows, cols);
  for (double& v : m.data()) {
    v = rng.normal() * scale;
    if (rng.uniform() < outlier_fraction) v *= outlier_gain;
  }
  return m;
}

// Gaussian entries times `scale`, with `channels` randomly chosen columns multiplied by `gain`.
inline DenseMatrix outlier_channel_matrix(std::size_t rows, std::size_t cols, Rng& rng, std::size_t channels, double gain,
                                          double scale = 1.0) {
  DenseMatrix m = gaussian_matrix(rows, cols, rng);
  m *= scale;
  for (std::size_t c = 0; c < channels && c < cols; ++c) {
    const std::size_t col = rng.next_u64() % cols;
    for (std::size_t r = 0; r < rows; ++r) m(r, col) *= gain;
  }
  return m;
}

struct SyntheticModelOptions {
  std::size_t layers = 2;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t d_head = 32;
  double scale = 0.02;
  double outlier_fraction = 0.01;
  double outlier_gain = 20.0;
  bool with_embedding = true;
  std::size_t vocab = 96;
};

// Writes a small transformer-shaped model (f32 tensors plus manifest.json) into `dir`. Tensors
// use the output-major layout (contraction along columns) except the value projections, which
// are stored contraction-major to exercise both orientations.
inline ModelManifest write_synthetic_model(const std::filesystem::path& dir, const SyntheticModelOptions& o, Seed seed) {
  std::filesystem::create_directories(dir);
  ModelManifest m;
  m.model_name = "synthetic";
  m.base_dir = dir;
  Rng rng(seed);
  auto add = [&](const std::string& name, TensorRole role, long layer, std::size_t rows, std::size_t cols, Axis contraction) {
    const auto w = heavy_tailed_matrix(rows, cols, rng, o.outlier_fraction, o.outlier_gain, o.scale);
    TensorSpec s{name, role, layer, rows, cols, name + ".f32", contraction};
    write_f32_matrix(dir / s.file, w);
    m.tensors.push_back(s);
  };
  if (o.with_embedding) add("embed", TensorRole::embedding, -1, o.vocab, o.d_model, Axis::cols);
  for (std::size_t l = 0; l < o.layers; ++l) {
    const long li = static_cast<long>(l);
    const std::string p = "layers." + std::to_string(l) + ".";
    add(p + "attn.v", TensorRole::attn_v, li, o.d_model, o.d_head, Axis::rows);
    add(p + "attn.o", TensorRole::attn_o, li, o.d_model, o.d_head, Axis::cols);
    add(p + "mlp.gate", TensorRole::ffn_gate, li, o.d_ff, o.d_model, Axis::cols);
    add(p + "mlp.up", TensorRole::ffn_up, li, o.d_ff, o.d_model, Axis::cols);
    add(p + "mlp.down", TensorRole::ffn_down, li, o.d_model, o.d_ff, Axis::cols);
  }
  save_manifest(m, dir / "manifest.json");
  return m;
}

}  // namespace calq
