#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "guard/errors.hpp"

namespace guard::binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&v, bytes, sizeof(T));
  }
  return v;
}

inline void write_u32(std::ostream& out, std::uint32_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void write_f64(std::ostream& out, double v) {
  std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(v));
  out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

inline void write_bytes(std::ostream& out, const std::string& s) {
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

// Reader that tracks the absolute byte offset for error messages.
class Reader {
 public:
  Reader(std::istream& in, std::size_t base_offset) : in_(in), offset_(base_offset) {}

  std::size_t offset() const { return offset_; }

  void read(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw ParseError(std::string("unexpected end of file reading ") + what,
                       offset_ + static_cast<std::size_t>(in_.gcount()));
    offset_ += n;
  }

  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    read(reinterpret_cast<char*>(&v), sizeof v, what);
    return to_little(v);
  }

  double f64(const char* what) {
    std::uint64_t bits;
    read(reinterpret_cast<char*>(&bits), sizeof bits, what);
    return std::bit_cast<double>(to_little(bits));
  }

  std::string bytes(std::size_t n, const char* what) {
    std::string s(n, '\0');
    if (n) read(s.data(), n, what);
    return s;
  }

  void expect_magic(const char (&magic)[5]) {
    std::size_t at = offset_;
    std::string got = bytes(4, "magic");
    if (got != std::string(magic, 4))
      throw ParseError(std::string("bad magic, expected ") + magic, at);
  }

 private:
  std::istream& in_;
  std::size_t offset_;
};

}  // namespace guard::binio
