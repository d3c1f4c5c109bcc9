#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "calq/adaptive_round.hpp"
#include "calq/artifact.hpp"
#include "calq/config.hpp"
#include "calq/linalg.hpp"
#include "calq/manifest.hpp"
#include "calq/paired_transform.hpp"
#include "calq/quantizer.hpp"
#include "calq/single_transform.hpp"

namespace calq {

// Extra FLOPs of a block-diagonal transform, 2·d·k per token, as a percentage of the layer's
// 2·d_in·d_out matmul.
inline double extra_flops_percent(std::size_t d_transform, std::size_t k, std::size_t d_in, std::size_t d_out) {
  if (d_in == 0 || d_out == 0) throw DomainError("extra_flops_percent: layer dimensions must be positive");
  return 100.0 * (2.0 * static_cast<double>(d_transform) * static_cast<double>(k)) /
         (2.0 * static_cast<double>(d_in) * static_cast<double>(d_out));
}

// Largest power of two that divides d and does not exceed k.
inline std::size_t effective_block_size(std::size_t d, std::size_t k) {
  std::size_t b = 1;
  while (b * 2 <= k && d % (b * 2) == 0) b *= 2;
  return b;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be written to per-index
// slots so the schedule cannot influence them.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

namespace detail {

inline void round_params_to_f32(QuantizedMatrix& q) {
  for (double& v : q.group_min) v = static_cast<float>(v);
  for (double& v : q.group_scale) v = static_cast<float>(v);
}

inline QuantizedMatrix quantize_for_storage(const DenseMatrix& s, const QuantConfig& cfg) {
  auto q = quantize(s, cfg);
  round_params_to_f32(q);
  return q;
}

inline std::vector<DenseMatrix> round_blocks_to_f32(const std::vector<DenseMatrix>& blocks) {
  std::vector<DenseMatrix> out;
  out.reserve(blocks.size());
  for (const auto& b : blocks) out.push_back(round_to_f32(b));
  return out;
}

// Matrix whose columns run along the contraction dimension (rows are output channels).
inline DenseMatrix output_major(const DenseMatrix& file_tensor, Axis contraction) {
  return contraction == Axis::cols ? file_tensor : file_tensor.transpose();
}

// Matrix whose rows run along the contraction dimension, the form in which W₁·W₂ is the layer product.
inline DenseMatrix contraction_major(const DenseMatrix& file_tensor, Axis contraction) {
  return contraction == Axis::rows ? file_tensor : file_tensor.transpose();
}

struct Unit {
  std::size_t first = 0;
  std::optional<std::size_t> second;  // set for attn_v / attn_o pairs
};

inline std::vector<Unit> plan_units(const ModelManifest& m, std::vector<std::string>& warnings) {
  std::vector<Unit> units;
  std::set<std::size_t> paired;
  for (std::size_t i = 0; i < m.tensors.size(); ++i) {
    const auto& v = m.tensors[i];
    if (v.role != TensorRole::attn_v) continue;
    std::vector<std::size_t> partners;
    for (std::size_t j = 0; j < m.tensors.size(); ++j)
      if (m.tensors[j].role == TensorRole::attn_o && m.tensors[j].layer_index == v.layer_index && !paired.count(j)) partners.push_back(j);
    if (partners.size() != 1) {
      warnings.push_back("attn_v '" + v.name + "' has " + std::to_string(partners.size()) + " unpaired attn_o partners in layer " +
                         std::to_string(v.layer_index) + "; quantized as a single tensor");
      continue;
    }
    const auto& o = m.tensors[partners[0]];
    const std::size_t v_inner = v.contraction_axis == Axis::rows ? v.cols : v.rows;
    const std::size_t o_inner = o.contraction_axis == Axis::rows ? o.rows : o.cols;
    if (v_inner != o_inner) {
      warnings.push_back("attn_v '" + v.name + "' and attn_o '" + o.name + "' have inner dimensions " + std::to_string(v_inner) + " and " +
                         std::to_string(o_inner) + "; quantized as single tensors");
      continue;
    }
    paired.insert(i);
    paired.insert(partners[0]);
    units.push_back({i, partners[0]});
  }
  for (std::size_t i = 0; i < m.tensors.size(); ++i)
    if (!paired.count(i)) units.push_back({i, std::nullopt});
  std::sort(units.begin(), units.end(), [](const Unit& a, const Unit& b) { return a.first < b.first; });
  return units;
}

inline TensorRecord base_record(const TensorSpec& spec, const std::string& stem, Seed global) {
  TensorRecord r;
  r.spec = spec;
  r.stem = stem;
  r.seed = derive_seed(global, spec.name).value;
  return r;
}

inline void quantize_single(TensorRecord& r, const DenseMatrix& file_tensor, const PipelineConfig& cfg) {
  if (r.spec.role == TensorRole::embedding && !cfg.quantize_embedding) {
    r.quantized = false;
    r.raw = round_to_f32(file_tensor);
    r.note = "embedding kept in f32";
    return;
  }
  const Seed seed{r.seed};
  const DenseMatrix w = output_major(file_tensor, r.spec.contraction_axis);
  r.transpose_on_output = r.spec.contraction_axis == Axis::rows;
  r.stored_rows = w.rows();
  r.stored_cols = w.cols();
  const QuantConfig qcfg = cfg.single_quant();
  const std::size_t k = effective_block_size(w.rows(), cfg.transform_block_size);

  std::optional<BlockDiagTransform> m;
  if (cfg.method == Method::random) {
    m = hadamard_blocks(w.rows(), k, derive_seed(seed, "hadamard"));
  } else if (cfg.method == Method::cafeq) {
    try {
      m = optimize_single(w, k, cfg.single, derive_seed(seed, "single")).transform;
    } catch (const Error& e) {
      r.fallback = true;
      r.note = std::string("uniform fallback: ") + e.what();
    }
  }
  if (m) {
    r.blocks = round_blocks_to_f32(m->blocks());
    const BlockDiagTransform stored(w.rows(), k, r.blocks);
    r.transform = TransformKind::block_diag;
    r.transform_block = k;
    r.q = quantize_for_storage(stored.apply(w), qcfg);
    r.relative_error = w.size() && frobenius(w) > 0.0 ? relative_error(w, stored.apply_inverse(dequantize(r.q))) : 0.0;
    // transform acts on the output dimension (rows of w); the layer matmul is rows x cols
    r.extra_flops_pct = extra_flops_percent(w.rows(), k, w.cols(), w.rows());
  } else {
    r.q = quantize_for_storage(w, qcfg);
    r.relative_error = frobenius(w) > 0.0 ? relative_error(w, dequantize(r.q)) : 0.0;
  }
  if (k != cfg.transform_block_size && m) {
    if (!r.note.empty()) r.note += "; ";
    r.note += "transform block size reduced to " + std::to_string(k);
  }
}

inline void quantize_pair(TensorRecord& rv, TensorRecord& ro, const DenseMatrix& fv, const DenseMatrix& fo, const PipelineConfig& cfg) {
  const DenseMatrix w1 = contraction_major(fv, rv.spec.contraction_axis);
  const DenseMatrix w2 = contraction_major(fo, ro.spec.contraction_axis);
  const std::size_t h = w1.cols();
  const Seed seed{rv.seed};
  rv.transpose_on_output = rv.spec.contraction_axis == Axis::cols;
  ro.transpose_on_output = ro.spec.contraction_axis == Axis::cols;
  rv.stored_rows = w1.rows();
  rv.stored_cols = w1.cols();
  ro.stored_rows = w2.rows();
  ro.stored_cols = w2.cols();
  rv.partner = ro.spec.name;
  ro.partner = rv.spec.name;
  rv.pair_side = 1;
  ro.pair_side = 2;
  const PairQuantConfig pq = cfg.pair_quant();

  std::optional<DenseMatrix> m;
  if (cfg.method == Method::random) {
    m = is_power_of_two(h) ? randomized_hadamard(h, derive_seed(seed, "hadamard")) : random_rotation(h, derive_seed(seed, "rotation"));
  } else if (cfg.method == Method::cafeq) {
    try {
      auto res = optimize_paired(w1, w2, cfg.paired, cfg.paired_loss, derive_seed(seed, "paired"));
      m = std::move(res.transform.m);
      for (const auto& w : res.warnings) rv.note += (rv.note.empty() ? "" : "; ") + w;
    } catch (const Error& e) {
      rv.fallback = ro.fallback = true;
      rv.note = ro.note = std::string("uniform fallback: ") + e.what();
    }
  }

  DenseMatrix u = w1, v = w2, m_inv;
  if (m) {
    rv.paired_m = round_to_f32(*m);
    m_inv = inverse(rv.paired_m);
    u = matmul(w1, rv.paired_m);
    v = matmul(m_inv, w2);
    rv.transform = ro.transform = TransformKind::paired;
  }
  if (cfg.method == Method::cafeq && cfg.adaptive_enabled) {
    auto ar = adaptive_round(u, v, cfg.adaptive);
    rv.q = std::move(ar.first);
    ro.q = std::move(ar.second);
    detail::round_params_to_f32(rv.q);
    detail::round_params_to_f32(ro.q);
  } else {
    rv.q = quantize_for_storage(u, pq.first);
    ro.q = quantize_for_storage(v, pq.second);
  }

  auto u_hat = dequantize(rv.q);
  auto v_hat = dequantize(ro.q);
  const double rel_pqe = relative_pqe(u, v, u_hat, v_hat);
  rv.relative_pqe = ro.relative_pqe = rel_pqe;
  if (m) {
    u_hat = matmul(u_hat, m_inv);
    v_hat = matmul(rv.paired_m, v_hat);
  }
  rv.relative_error = frobenius(w1) > 0.0 ? relative_error(w1, u_hat) : 0.0;
  ro.relative_error = frobenius(w2) > 0.0 ? relative_error(w2, v_hat) : 0.0;
}

}  // namespace detail

inline QuantArtifact quantize_model(const ModelManifest& manifest, const PipelineConfig& cfg) {
  validate(cfg);
  QuantArtifact a;
  a.model_name = manifest.model_name;
  a.config = cfg;
  const Seed global{cfg.seed};

  std::vector<DenseMatrix> tensors;
  tensors.reserve(manifest.tensors.size());
  for (const auto& t : manifest.tensors) tensors.push_back(read_f32_matrix(manifest.base_dir / t.file, t.rows, t.cols));

  std::set<std::string> stems;
  a.tensors.resize(manifest.tensors.size());
  for (std::size_t i = 0; i < manifest.tensors.size(); ++i) {
    std::string stem = sanitize_stem(manifest.tensors[i].name);
    for (int n = 1; stems.count(stem); ++n) stem = sanitize_stem(manifest.tensors[i].name) + "~" + std::to_string(n);
    stems.insert(stem);
    a.tensors[i] = detail::base_record(manifest.tensors[i], stem, global);
  }

  const auto units = detail::plan_units(manifest, a.warnings);
  parallel_for(units.size(), cfg.threads, [&](std::size_t u) {
    const auto& unit = units[u];
    if (unit.second) {
      detail::quantize_pair(a.tensors[unit.first], a.tensors[*unit.second], tensors[unit.first], tensors[*unit.second], cfg);
    } else {
      detail::quantize_single(a.tensors[unit.first], tensors[unit.first], cfg);
    }
  });

  for (const auto& t : a.tensors) {
    if (!t.quantized) continue;
    a.flops.matmul_flops += 2.0 * static_cast<double>(t.stored_rows) * static_cast<double>(t.stored_cols);
    if (t.transform == TransformKind::block_diag)
      a.flops.transform_flops += 2.0 * static_cast<double>(t.stored_rows) * static_cast<double>(t.transform_block);
    if (t.fallback) a.warnings.push_back("tensor '" + t.spec.name + "' fell back to uniform quantization");
  }
  return a;
}

// ---------------------------------------------------------------------------
// Reconstruction

struct ReconstructedTensor {
  TensorSpec spec;
  DenseMatrix values;  // file orientation
};

// Uses only artifact contents. With `reverse_paired`, paired tensors are multiplied back by
// M⁻¹ / M so each approximates its original weight; otherwise they stay in transformed form.
inline std::vector<ReconstructedTensor> reconstruct_model(const QuantArtifact& a, bool reverse_paired) {
  std::vector<ReconstructedTensor> out;
  out.reserve(a.tensors.size());
  for (const auto& t : a.tensors) {
    if (!t.quantized) {
      out.push_back({t.spec, t.raw});
      continue;
    }
    DenseMatrix s = dequantize(t.q);
    if (t.transform == TransformKind::block_diag) {
      s = BlockDiagTransform(t.stored_rows, t.transform_block, t.blocks).apply_inverse(s);
    } else if (t.transform == TransformKind::paired && reverse_paired) {
      const TensorRecord* owner = t.pair_side == 1 ? &t : a.find(t.partner);
      if (!owner || owner->paired_m.empty()) throw FormatError("artifact: paired transform for '" + t.spec.name + "' is missing");
      s = t.pair_side == 1 ? matmul(s, inverse(owner->paired_m)) : matmul(owner->paired_m, s);
    }
    out.push_back({t.spec, t.transpose_on_output ? s.transpose() : s});
  }
  return out;
}

// Writes `<stem>.f32` files plus a manifest.json describing them, so the output can be fed back
// into `quantize`.
inline void write_reconstruction(const QuantArtifact& a, const std::vector<ReconstructedTensor>& tensors, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  ModelManifest m;
  m.model_name = a.model_name;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    TensorSpec spec = tensors[i].spec;
    spec.file = a.tensors[i].stem + ".f32";
    write_f32_matrix(dir / spec.file, tensors[i].values);
    m.tensors.push_back(spec);
  }
  save_manifest(m, dir / "manifest.json");
}

// ---------------------------------------------------------------------------
// Report

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string granularity_label(const Granularity& g) {
  if (g.kind == GroupKind::subchannel) return "subchannel" + std::to_string(g.block_size);
  return to_string(g.kind);
}

// Per-tensor rows followed by mean rows per role and overall (name column `mean`).
inline std::string report_csv(const QuantArtifact& a) {
  std::ostringstream os;
  os << "name,role,layer_index,bits,granularity,transform,block_size,relative_error,relative_pqe,extra_flops_pct,fallback\n";
  std::map<std::string, std::pair<double, int>> by_role;
  double total = 0.0;
  int count = 0;
  for (const auto& t : a.tensors) {
    os << t.spec.name << ',' << to_string(t.spec.role) << ',' << t.spec.layer_index << ',';
    if (t.quantized) {
      os << t.q.config.bits << ',' << granularity_label(t.q.config.granularity) << ',' << to_string(t.transform) << ','
         << (t.transform == TransformKind::block_diag ? std::to_string(t.transform_block) : "") << ',';
    } else {
      os << "32,none,none,,";
    }
    os << format_number(t.relative_error) << ',' << (t.relative_pqe ? format_number(*t.relative_pqe) : "") << ','
       << format_number(t.extra_flops_pct) << ',' << (t.fallback ? 1 : 0) << '\n';
    if (!t.quantized) continue;
    auto& acc = by_role[to_string(t.spec.role)];
    acc.first += t.relative_error;
    acc.second += 1;
    total += t.relative_error;
    ++count;
  }
  for (const auto& [role, acc] : by_role) os << "mean," << role << ",,,,,," << format_number(acc.first / acc.second) << ",,,\n";
  if (count > 0) os << "mean,all,,,,,," << format_number(total / count) << ",," << format_number(a.flops.extra_pct()) << ",\n";
  return os.str();
}

inline double mean_relative_error(const QuantArtifact& a) {
  double total = 0.0;
  int count = 0;
  for (const auto& t : a.tensors) {
    if (!t.quantized) continue;
    total += t.relative_error;
    ++count;
  }
  return count ? total / count : 0.0;
}

}  // namespace calq
