#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "wsd/errors.hpp"

// Little-endian primitives shared by the checkpoint and feature sidecar formats.
namespace wsd::binary {

inline void write_u16(std::ostream& os, std::uint16_t v) {
  const std::array<char, 2> b{static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b.data(), b.size());
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), b.size());
}

inline void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

/// Reads from a buffer with bounds checking; errors name the field and offset.
class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_bytes(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw DataError(source_ + ": truncated while reading " + what + " at byte " +
                      std::to_string(pos_) + " (need " + std::to_string(n) + " bytes, have " +
                      std::to_string(remaining()) + ")");
    }
  }

  std::string read_magic(std::size_t n) {
    expect_bytes(n, "magic");
    std::string m = bytes_.substr(pos_, n);
    pos_ += n;
    return m;
  }

  std::uint16_t read_u16(const char* what) {
    expect_bytes(2, what);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += 2;
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }

  std::uint32_t read_u32(const char* what) {
    expect_bytes(4, what);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }

  float read_f32(const char* what) { return std::bit_cast<float>(read_u32(what)); }

 private:
  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace wsd::binary
