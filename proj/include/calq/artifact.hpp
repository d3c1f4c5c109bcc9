#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "calq/bitpack.hpp"
#include "calq/config.hpp"
#include "calq/error.hpp"
#include "calq/manifest.hpp"
#include "calq/quantizer.hpp"

namespace calq {

inline constexpr int kArtifactFormatVersion = 1;

enum class TransformKind { none, block_diag, paired };

inline const char* to_string(TransformKind k) {
  switch (k) {
    case TransformKind::none: return "none";
    case TransformKind::block_diag: return "block_diag";
    case TransformKind::paired: return "paired";
  }
  return "?";
}

inline TransformKind parse_transform_kind(const std::string& s) {
  if (s == "none") return TransformKind::none;
  if (s == "block_diag") return TransformKind::block_diag;
  if (s == "paired") return TransformKind::paired;
  throw FormatError("artifact: unknown transform kind '" + s + "'");
}

// One tensor of a quantized model. The stored matrix S is what the codes encode:
//   none        S = W                       (W in stored orientation)
//   block_diag  S = M·W, M block diagonal   (reconstruct M⁻¹·Ŝ)
//   paired      first side S = W₁M, second side S = M⁻¹W₂; M lives on the first side's record
// The file-orientation tensor is Ŝ (or its reverse-transformed form), transposed when
// `transpose_on_output` is set.
struct TensorRecord {
  TensorSpec spec;
  std::string stem;  // file name prefix inside the artifact
  std::uint64_t seed = 0;
  bool quantized = true;
  std::size_t stored_rows = 0;
  std::size_t stored_cols = 0;
  bool transpose_on_output = false;

  TransformKind transform = TransformKind::none;
  std::size_t transform_block = 0;  // block size for block_diag
  std::string partner;              // other tensor of a pair
  int pair_side = 0;                // 1 = first (W₁M), 2 = second (M⁻¹W₂)

  double relative_error = 0.0;
  std::optional<double> relative_pqe;
  double extra_flops_pct = 0.0;
  bool fallback = false;
  std::string note;

  QuantizedMatrix q;                  // when quantized
  std::vector<DenseMatrix> blocks;    // block_diag payload
  DenseMatrix paired_m;               // on the first side of a pair
  DenseMatrix raw;                    // pass-through payload when not quantized
};

struct FlopSummary {
  double matmul_flops = 0.0;     // Σ 2·rows·cols over quantized tensors, per token
  double transform_flops = 0.0;  // Σ 2·d·k over block-diagonal transforms, per token
  double extra_pct() const { return matmul_flops > 0.0 ? 100.0 * transform_flops / matmul_flops : 0.0; }
};

struct QuantArtifact {
  int format_version = kArtifactFormatVersion;
  std::string model_name;
  PipelineConfig config;
  std::vector<TensorRecord> tensors;
  FlopSummary flops;
  std::vector<std::string> warnings;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.spec.name == name) return &t;
    return nullptr;
  }
};

// File-system safe, unique stem for a tensor name.
inline std::string sanitize_stem(const std::string& name) {
  std::string out;
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '.' || c == '-' || c == '_';
    out.push_back(ok ? c : '_');
  }
  if (out.empty() || out == "." || out == ".." || out.front() == '.') out.insert(out.begin(), '_');
  return out;
}

inline nlohmann::json granularity_to_json(const Granularity& g) {
  nlohmann::json j = {{"kind", to_string(g.kind)}, {"axis", to_string(g.axis)}};
  if (g.kind == GroupKind::subchannel) j["block_size"] = g.block_size;
  return j;
}

inline Granularity granularity_from_json(const nlohmann::json& j) {
  Granularity g;
  g.kind = parse_group_kind(j.at("kind").get<std::string>());
  g.axis = parse_axis(j.at("axis").get<std::string>());
  g.block_size = j.value("block_size", std::size_t{0});
  return g;
}

inline nlohmann::json header_json(const QuantArtifact& a) {
  using nlohmann::json;
  json tensors = json::array();
  for (const auto& t : a.tensors) {
    json r = {{"name", t.spec.name},
              {"role", to_string(t.spec.role)},
              {"layer_index", t.spec.layer_index},
              {"shape", {t.spec.rows, t.spec.cols}},
              {"contraction_axis", to_string(t.spec.contraction_axis)},
              {"stem", t.stem},
              {"seed", t.seed},
              {"quantized", t.quantized},
              {"relative_error", t.relative_error},
              {"extra_flops_pct", t.extra_flops_pct},
              {"fallback", t.fallback}};
    if (!t.note.empty()) r["note"] = t.note;
    if (t.relative_pqe) r["relative_pqe"] = *t.relative_pqe;
    if (!t.quantized) {
      r["files"] = {{"raw", t.stem + ".f32"}};
    } else {
      r["stored_shape"] = {t.stored_rows, t.stored_cols};
      r["transpose_on_output"] = t.transpose_on_output;
      r["bits"] = t.q.config.bits;
      r["granularity"] = granularity_to_json(t.q.config.granularity);
      r["group_count"] = t.q.group_min.size();
      json transform = {{"kind", to_string(t.transform)}};
      if (t.transform == TransformKind::block_diag) transform["block_size"] = t.transform_block;
      if (t.transform == TransformKind::paired) {
        transform["partner"] = t.partner;
        transform["side"] = t.pair_side == 1 ? "first" : "second";
        if (t.pair_side == 1) transform["dim"] = t.paired_m.rows();
      }
      r["transform"] = transform;
      json files = {{"codes", t.stem + ".codes"}, {"scales", t.stem + ".scales"}, {"mins", t.stem + ".mins"}};
      if (t.transform == TransformKind::block_diag || (t.transform == TransformKind::paired && t.pair_side == 1))
        files["transform"] = t.stem + ".transform";
      r["files"] = files;
    }
    tensors.push_back(std::move(r));
  }
  return json{{"format_version", a.format_version},
              {"model_name", a.model_name},
              {"method", to_string(a.config.method)},
              {"seeds", {{"global", a.config.seed}}},
              {"config", config_to_json(a.config)},
              {"flops",
               {{"matmul_flops_per_token", a.flops.matmul_flops},
                {"transform_flops_per_token", a.flops.transform_flops},
                {"extra_flops_pct", a.flops.extra_pct()}}},
              {"warnings", a.warnings},
              {"tensors", tensors}};
}

inline void write_artifact(const QuantArtifact& a, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& t : a.tensors) {
    if (!t.quantized) {
      write_f32_matrix(dir / (t.stem + ".f32"), t.raw);
      continue;
    }
    write_bytes(dir / (t.stem + ".codes"), pack_codes(t.q.codes, t.q.rows, t.q.cols, t.q.config.bits));
    write_bytes(dir / (t.stem + ".scales"), encode_f32(t.q.group_scale));
    write_bytes(dir / (t.stem + ".mins"), encode_f32(t.q.group_min));
    if (t.transform == TransformKind::block_diag) {
      std::vector<double> flat;
      for (const auto& b : t.blocks) flat.insert(flat.end(), b.data().begin(), b.data().end());
      write_bytes(dir / (t.stem + ".transform"), encode_f32(flat));
    } else if (t.transform == TransformKind::paired && t.pair_side == 1) {
      write_f32_matrix(dir / (t.stem + ".transform"), t.paired_m);
    }
  }
  write_text_file(dir / "header.json", header_json(a).dump(2) + "\n");
}

inline QuantArtifact read_artifact(const std::filesystem::path& dir) {
  const auto h = read_json_file(dir / "header.json");
  QuantArtifact a;
  try {
    a.format_version = h.at("format_version").get<int>();
    if (a.format_version != kArtifactFormatVersion) {
      throw FormatError("artifact: format version " + std::to_string(a.format_version) + " is not supported (expected " +
                        std::to_string(kArtifactFormatVersion) + ")");
    }
    a.model_name = h.value("model_name", std::string{});
    a.config = config_from_json(h.at("config"));
    a.flops.matmul_flops = h.at("flops").at("matmul_flops_per_token").get<double>();
    a.flops.transform_flops = h.at("flops").at("transform_flops_per_token").get<double>();
    a.warnings = h.value("warnings", std::vector<std::string>{});
    for (const auto& r : h.at("tensors")) {
      TensorRecord t;
      t.spec.name = r.at("name").get<std::string>();
      t.spec.role = parse_role(r.at("role").get<std::string>());
      t.spec.layer_index = r.at("layer_index").get<long>();
      t.spec.rows = r.at("shape")[0].get<std::size_t>();
      t.spec.cols = r.at("shape")[1].get<std::size_t>();
      t.spec.contraction_axis = parse_axis(r.at("contraction_axis").get<std::string>());
      t.stem = r.at("stem").get<std::string>();
      t.spec.file = t.stem + ".f32";
      t.seed = r.at("seed").get<std::uint64_t>();
      t.quantized = r.at("quantized").get<bool>();
      t.relative_error = r.at("relative_error").get<double>();
      t.extra_flops_pct = r.at("extra_flops_pct").get<double>();
      t.fallback = r.at("fallback").get<bool>();
      t.note = r.value("note", std::string{});
      if (r.contains("relative_pqe")) t.relative_pqe = r.at("relative_pqe").get<double>();
      if (!t.quantized) {
        t.raw = read_f32_matrix(dir / r.at("files").at("raw").get<std::string>(), t.spec.rows, t.spec.cols);
        a.tensors.push_back(std::move(t));
        continue;
      }
      t.stored_rows = r.at("stored_shape")[0].get<std::size_t>();
      t.stored_cols = r.at("stored_shape")[1].get<std::size_t>();
      t.transpose_on_output = r.at("transpose_on_output").get<bool>();
      const std::size_t expect_rows = t.transpose_on_output ? t.spec.cols : t.spec.rows;
      const std::size_t expect_cols = t.transpose_on_output ? t.spec.rows : t.spec.cols;
      if (t.stored_rows != expect_rows || t.stored_cols != expect_cols)
        throw FormatError("artifact: stored shape of '" + t.spec.name + "' does not match its tensor shape");

      t.q.rows = t.stored_rows;
      t.q.cols = t.stored_cols;
      t.q.config.bits = r.at("bits").get<int>();
      t.q.config.granularity = granularity_from_json(r.at("granularity"));
      validate(t.q.config);
      const GroupLayout layout(t.q.rows, t.q.cols, t.q.config.granularity);
      const auto& files = r.at("files");
      t.q.codes = unpack_codes(read_bytes(dir / files.at("codes").get<std::string>()), t.q.rows, t.q.cols, t.q.config.bits);
      t.q.group_scale = decode_f32(read_bytes(dir / files.at("scales").get<std::string>()));
      t.q.group_min = decode_f32(read_bytes(dir / files.at("mins").get<std::string>()));
      if (t.q.group_scale.size() != layout.count() || t.q.group_min.size() != layout.count())
        throw FormatError("artifact: '" + t.spec.name + "' expects " + std::to_string(layout.count()) + " groups");

      const auto& tr = r.at("transform");
      t.transform = parse_transform_kind(tr.at("kind").get<std::string>());
      if (t.transform == TransformKind::block_diag) {
        t.transform_block = tr.at("block_size").get<std::size_t>();
        const std::size_t k = t.transform_block, d = t.stored_rows;
        if (k == 0 || d % k != 0) throw FormatError("artifact: '" + t.spec.name + "' has an invalid transform block size");
        const auto flat = decode_f32(read_bytes(dir / files.at("transform").get<std::string>()));
        if (flat.size() != d * k) throw FormatError("artifact: transform payload of '" + t.spec.name + "' has the wrong length");
        for (std::size_t b = 0; b < d / k; ++b)
          t.blocks.emplace_back(k, k, std::vector<double>(flat.begin() + static_cast<long>(b * k * k), flat.begin() + static_cast<long>((b + 1) * k * k)));
      } else if (t.transform == TransformKind::paired) {
        t.partner = tr.at("partner").get<std::string>();
        t.pair_side = tr.at("side").get<std::string>() == "first" ? 1 : 2;
        if (t.pair_side == 1) {
          const auto dim = tr.at("dim").get<std::size_t>();
          t.paired_m = read_f32_matrix(dir / files.at("transform").get<std::string>(), dim, dim);
        }
      }
      a.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("artifact header: ") + e.what());
  }
  return a;
}

}  // namespace calq
