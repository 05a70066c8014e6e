#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "bwcloud/error.hpp"

// Little-endian primitives shared by the binary file formats.
namespace bwcloud {

template <typename U>
inline void put_le(std::ostream& os, U value) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xff);
  os.write(bytes, sizeof(U));
}

template <typename U>
inline U get_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(U));
  if (!is) fail(ErrorKind::format, "unexpected end of binary stream");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

inline void put_u8(std::ostream& os, std::uint8_t v) { put_le<std::uint8_t>(os, v); }
inline void put_u16(std::ostream& os, std::uint16_t v) { put_le<std::uint16_t>(os, v); }
inline void put_u32(std::ostream& os, std::uint32_t v) { put_le<std::uint32_t>(os, v); }
inline void put_f32(std::ostream& os, float v) { put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint8_t get_u8(std::istream& is) { return get_le<std::uint8_t>(is); }
inline std::uint16_t get_u16(std::istream& is) { return get_le<std::uint16_t>(is); }
inline std::uint32_t get_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_le<std::uint32_t>(is)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

inline void put_string(std::ostream& os, const std::string& s) {
  if (s.size() > 0xffff) fail(ErrorKind::format, "identity string too long");
  put_u16(os, static_cast<std::uint16_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get_u16(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) fail(ErrorKind::format, "unexpected end of binary stream");
  return s;
}

}  // namespace bwcloud
