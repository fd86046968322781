#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "fobor/error.hpp"

// Little-endian primitives shared by the FOBO/FOBP/FOBT formats. Bytes are
// assembled explicitly so the on-disk layout does not depend on host order.
namespace fobor::io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), b.size());
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v & 0xffffffffu));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void put_i32(std::ostream& os, std::int32_t v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline void put_f32s(std::ostream& os, std::span<const float> v) {
  for (float x : v) put_f32(os, x);
}

inline void put_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

/// Reader that turns short reads into FormatError("truncated ...").
class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  void bytes(char* dst, std::size_t n, std::string_view what) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw FormatError("truncated payload while reading " + std::string(what));
    consumed_ += n;
  }

  std::uint32_t u32(std::string_view what) {
    std::array<unsigned char, 4> b{};
    bytes(reinterpret_cast<char*>(b.data()), 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  std::uint64_t u64(std::string_view what) {
    const std::uint64_t lo = u32(what);
    const std::uint64_t hi = u32(what);
    return lo | (hi << 32);
  }

  std::int32_t i32(std::string_view what) { return std::bit_cast<std::int32_t>(u32(what)); }

  float f32(std::string_view what) { return std::bit_cast<float>(u32(what)); }

  void f32s(std::span<float> dst, std::string_view what) {
    for (float& x : dst) x = f32(what);
  }

  std::string magic(std::size_t n) {
    std::string m(n, '\0');
    is_.read(m.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw FormatError("truncated payload while reading magic");
    consumed_ += n;
    return m;
  }

  /// True when the stream has no bytes left.
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

  std::size_t consumed() const noexcept { return consumed_; }

 private:
  std::istream& is_;
  std::size_t consumed_ = 0;
};

}  // namespace fobor::io
