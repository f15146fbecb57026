#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace dml {

// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update_bytes(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) {
    update_bytes(s.data(), s.size());
    // Separator so that ("ab","c") and ("a","bc") differ.
    const unsigned char zero = 0;
    update_bytes(&zero, 1);
  }
  template <typename U>
  void update_value(const U& v) {
    update_bytes(&v, sizeof(U));
  }
  std::uint64_t value() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view s) {
  Fnv1a h;
  h.update_bytes(s.data(), s.size());
  return h.value();
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace dml
