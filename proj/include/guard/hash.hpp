#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace guard {

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string fnv1a_hex(std::string_view bytes) { return hex64(fnv1a64(bytes)); }

}  // namespace guard
