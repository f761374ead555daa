#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace bugloc {

/// FNV-1a 64-bit over raw bytes. Used for artifact content hashes and the
/// frozen-encoder checkpoint comparison; stability matters, cryptographic
/// strength does not.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x00000100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(s.data(), s.size());
}

inline std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

/// Hash of a file's contents; throws bugloc::Error if unreadable.
std::string hash_file(const std::string& path);

}  // namespace bugloc
