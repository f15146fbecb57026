#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "dml/error.hpp"

namespace dml {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Per-pixel class indices, row-major. kIgnoreLabel marks unlabeled pixels.
struct LabelMask {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> values;

  LabelMask() = default;
  LabelMask(std::size_t height, std::size_t width, std::uint8_t fill = 0)
      : h(height), w(width), values(height * width, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * w + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * w + x]; }
  std::size_t size() const noexcept { return values.size(); }

  bool operator==(const LabelMask&) const = default;
};

inline void validate_mask(const LabelMask& mask, std::size_t num_classes) {
  if (mask.values.size() != mask.h * mask.w)
    throw DataError(detail::concat("mask buffer holds ", mask.values.size(), " values for ", mask.h, "x", mask.w));
  for (std::size_t i = 0; i < mask.values.size(); ++i) {
    const auto v = mask.values[i];
    if (v != kIgnoreLabel && v >= num_classes)
      throw DataError(detail::concat("mask value ", static_cast<int>(v), " at pixel (", i / mask.w, ",", i % mask.w,
                                     ") is not below K=", num_classes));
  }
}

/// Majority vote over factor x factor blocks, ignoring kIgnoreLabel. Ties go
/// to the lowest class; an all-ignore block stays ignore.
inline LabelMask downsample_majority(const LabelMask& mask, std::size_t factor, std::size_t num_classes) {
  if (factor == 0 || mask.h % factor != 0 || mask.w % factor != 0)
    throw ConfigError(detail::concat("mask ", mask.h, "x", mask.w, " is not divisible by ", factor));
  if (factor == 1) return mask;
  LabelMask out(mask.h / factor, mask.w / factor, kIgnoreLabel);
  std::vector<std::size_t> votes(num_classes);
  for (std::size_t r = 0; r < out.h; ++r) {
    for (std::size_t c = 0; c < out.w; ++c) {
      std::fill(votes.begin(), votes.end(), 0);
      for (std::size_t y = r * factor; y < (r + 1) * factor; ++y)
        for (std::size_t x = c * factor; x < (c + 1) * factor; ++x) {
          const auto v = mask.at(y, x);
          if (v == kIgnoreLabel) continue;
          if (v >= num_classes)
            throw DataError(detail::concat("mask value ", static_cast<int>(v), " at pixel (", y, ",", x,
                                           ") is not below K=", num_classes));
          ++votes[v];
        }
      std::size_t best = 0;
      for (std::size_t k = 1; k < num_classes; ++k)
        if (votes[k] > votes[best]) best = k;
      if (votes[best] > 0) out.at(r, c) = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

}  // namespace dml
