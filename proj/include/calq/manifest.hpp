#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "calq/error.hpp"
#include "calq/linalg.hpp"
#include "calq/matrix.hpp"

namespace calq {

static_assert(std::endian::native == std::endian::little, "artifact I/O assumes a little-endian host");

enum class TensorRole { ffn_gate, ffn_up, ffn_down, attn_q, attn_k, attn_v, attn_o, embedding, other };

inline constexpr std::array<std::pair<TensorRole, const char*>, 9> kRoleNames{{
    {TensorRole::ffn_gate, "ffn_gate"},
    {TensorRole::ffn_up, "ffn_up"},
    {TensorRole::ffn_down, "ffn_down"},
    {TensorRole::attn_q, "attn_q"},
    {TensorRole::attn_k, "attn_k"},
    {TensorRole::attn_v, "attn_v"},
    {TensorRole::attn_o, "attn_o"},
    {TensorRole::embedding, "embedding"},
    {TensorRole::other, "other"},
}};

inline const char* to_string(TensorRole r) {
  for (const auto& [role, name] : kRoleNames)
    if (role == r) return name;
  return "other";
}

inline TensorRole parse_role(const std::string& s) {
  for (const auto& [role, name] : kRoleNames)
    if (s == name) return role;
  throw FormatError("manifest: unknown tensor role '" + s + "'");
}

inline const char* to_string(Axis a) { return a == Axis::rows ? "rows" : "cols"; }

inline Axis parse_axis(const std::string& s) {
  if (s == "rows") return Axis::rows;
  if (s == "cols") return Axis::cols;
  throw FormatError("unknown axis '" + s + "' (expected rows or cols)");
}

struct TensorSpec {
  std::string name;
  TensorRole role = TensorRole::other;
  long layer_index = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string file;  // relative to the manifest directory
  Axis contraction_axis = Axis::cols;
};

struct ModelManifest {
  std::string model_name;
  std::vector<TensorSpec> tensors;
  std::filesystem::path base_dir;
};

inline void to_json(nlohmann::json& j, const TensorSpec& t) {
  j = {{"name", t.name},
       {"role", to_string(t.role)},
       {"layer_index", t.layer_index},
       {"shape", {t.rows, t.cols}},
       {"dtype", "f32"},
       {"file", t.file},
       {"contraction_axis", to_string(t.contraction_axis)}};
}

inline ModelManifest parse_manifest(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  ModelManifest m;
  m.base_dir = base_dir;
  try {
    m.model_name = j.value("model_name", std::string{});
    for (const auto& t : j.at("tensors")) {
      TensorSpec s;
      s.name = t.at("name").get<std::string>();
      s.role = parse_role(t.at("role").get<std::string>());
      s.layer_index = t.value("layer_index", 0L);
      const auto& shape = t.at("shape");
      if (!shape.is_array() || shape.size() != 2) throw FormatError("manifest: tensor '" + s.name + "' shape must be [rows, cols]");
      s.rows = shape[0].get<std::size_t>();
      s.cols = shape[1].get<std::size_t>();
      if (s.rows == 0 || s.cols == 0) throw FormatError("manifest: tensor '" + s.name + "' has an empty dimension");
      const auto dtype = t.value("dtype", std::string{"f32"});
      if (dtype != "f32") throw FormatError("manifest: tensor '" + s.name + "' has unsupported dtype " + dtype);
      s.file = t.at("file").get<std::string>();
      s.contraction_axis = parse_axis(t.value("contraction_axis", std::string{"cols"}));
      m.tensors.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  for (std::size_t a = 0; a < m.tensors.size(); ++a)
    for (std::size_t b = a + 1; b < m.tensors.size(); ++b)
      if (m.tensors[a].name == m.tensors[b].name) throw FormatError("manifest: duplicate tensor name '" + m.tensors[a].name + "'");
  return m;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed for " + path.string());
}

inline ModelManifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_json_file(path), path.parent_path());
}

inline void save_manifest(const ModelManifest& m, const std::filesystem::path& path) {
  nlohmann::json j = {{"model_name", m.model_name}, {"tensors", m.tensors}};
  write_text_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Raw little-endian binary payloads

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

inline std::vector<std::uint8_t> encode_f32(std::span<const double> values) {
  std::vector<std::uint8_t> out(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto f = static_cast<float>(values[i]);
    std::memcpy(out.data() + 4 * i, &f, 4);
  }
  return out;
}

inline std::vector<double> decode_f32(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 4 != 0) throw FormatError("f32 payload length " + std::to_string(bytes.size()) + " is not a multiple of 4");
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    float f;
    std::memcpy(&f, bytes.data() + 4 * i, 4);
    out[i] = f;
  }
  return out;
}

inline DenseMatrix read_f32_matrix(const std::filesystem::path& path, std::size_t rows, std::size_t cols) {
  const auto bytes = read_bytes(path);
  if (bytes.size() != rows * cols * 4) {
    throw FormatError(path.string() + ": expected " + std::to_string(rows * cols * 4) + " bytes for " + std::to_string(rows) + "x" +
                      std::to_string(cols) + " f32, found " + std::to_string(bytes.size()));
  }
  DenseMatrix m(rows, cols, decode_f32(bytes));
  if (!m.all_finite()) throw FormatError(path.string() + ": tensor contains NaN or Inf");
  return m;
}

inline void write_f32_matrix(const std::filesystem::path& path, const DenseMatrix& m) { write_bytes(path, encode_f32(m.data())); }

// Every entry rounded to the nearest 32-bit float.
inline DenseMatrix round_to_f32(DenseMatrix m) {
  for (double& v : m.data()) v = static_cast<float>(v);
  return m;
}

}  // namespace calq
