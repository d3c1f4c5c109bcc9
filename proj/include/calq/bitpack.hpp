#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "calq/error.hpp"

namespace calq {

// Bytes needed for one row of `cols` codes at `bits` bits each.
inline std::size_t packed_row_bytes(std::size_t cols, int bits) { return (cols * static_cast<std::size_t>(bits) + 7) / 8; }

inline std::size_t packed_bytes(std::size_t rows, std::size_t cols, int bits) { return rows * packed_row_bytes(cols, bits); }

// Row-major codes packed LSB-first at `bits` bits per code. Every row starts on a fresh byte;
// unused high bits of a row's last byte are zero.
inline std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, std::size_t rows, std::size_t cols, int bits) {
  if (bits < 1 || bits > 8) throw ConfigError("pack_codes: bits must lie in [1, 8]");
  if (codes.size() != rows * cols) throw ShapeError("pack_codes: expected " + std::to_string(rows * cols) + " codes, got " + std::to_string(codes.size()));
  const std::uint32_t mask = (1u << bits) - 1u;
  const std::size_t row_bytes = packed_row_bytes(cols, bits);
  std::vector<std::uint8_t> out(rows * row_bytes, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::uint8_t* dst = out.data() + r * row_bytes;
    std::size_t bit = 0;
    for (std::size_t c = 0; c < cols; ++c, bit += bits) {
      const std::uint32_t code = codes[r * cols + c];
      if (code > mask) throw DomainError("pack_codes: code " + std::to_string(code) + " exceeds " + std::to_string(bits) + " bits");
      const std::uint32_t shifted = code << (bit % 8);
      dst[bit / 8] |= static_cast<std::uint8_t>(shifted & 0xffu);
      if ((bit % 8) + bits > 8) dst[bit / 8 + 1] |= static_cast<std::uint8_t>(shifted >> 8);
    }
  }
  return out;
}

inline std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, std::size_t rows, std::size_t cols, int bits) {
  if (bits < 1 || bits > 8) throw ConfigError("unpack_codes: bits must lie in [1, 8]");
  const std::size_t row_bytes = packed_row_bytes(cols, bits);
  if (packed.size() != rows * row_bytes) {
    throw FormatError("unpack_codes: bitstream holds " + std::to_string(packed.size()) + " bytes, expected " +
                      std::to_string(rows * row_bytes));
  }
  const std::uint32_t mask = (1u << bits) - 1u;
  std::vector<std::uint8_t> codes(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* src = packed.data() + r * row_bytes;
    std::size_t bit = 0;
    for (std::size_t c = 0; c < cols; ++c, bit += bits) {
      std::uint32_t word = src[bit / 8];
      if ((bit % 8) + bits > 8) word |= static_cast<std::uint32_t>(src[bit / 8 + 1]) << 8;
      codes[r * cols + c] = static_cast<std::uint8_t>((word >> (bit % 8)) & mask);
    }
  }
  return codes;
}

}  // namespace calq
