#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "mcr_stitch/error.hpp"

// Little-endian primitives shared by the EMB1, PQD1, EXP1 and GT1 containers.
namespace mcr::binary {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline void write_f32_span(std::ostream& os, std::span<const float> values) {
  for (float v : values) write_f32(os, v);
}

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void read_exact(std::istream& is, char* dst, std::size_t n, std::string_view what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw FormatError("truncated input while reading " + std::string(what));
  }
}

inline std::uint32_t read_u32(std::istream& is, std::string_view what) {
  std::array<unsigned char, 4> b{};
  read_exact(is, reinterpret_cast<char*>(b.data()), 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint8_t read_u8(std::istream& is, std::string_view what) {
  char c = 0;
  read_exact(is, &c, 1, what);
  return static_cast<std::uint8_t>(c);
}

inline float read_f32(std::istream& is, std::string_view what) {
  const std::uint32_t bits = read_u32(is, what);
  float v = 0.0f;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(magic.size()));
  if (static_cast<std::size_t>(is.gcount()) != magic.size() || got != magic) {
    throw FormatError("bad magic: expected \"" + std::string(magic) + "\"");
  }
}

}  // namespace mcr::binary
