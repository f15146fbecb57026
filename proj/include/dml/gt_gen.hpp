#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "dml/labels.hpp"
#include "dml/tensor.hpp"

namespace dml {

/// K binary planes of size H x W.
struct BinaryStack {
  std::size_t k = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::uint8_t> bits;

  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const { return bits[(c * h + y) * w + x]; }
  std::uint8_t& at(std::size_t c, std::size_t y, std::size_t x) { return bits[(c * h + y) * w + x]; }
  bool operator==(const BinaryStack&) const = default;
};

/// Presence map for one level: bit (k, r, c) says class k occurs inside the
/// window centred on grid cell (r, c).
struct MultiLabelTarget : BinaryStack {
  std::size_t level = 0;
  std::size_t window = 1;  // in mask pixels
  std::size_t stride = 1;  // mask pixels per grid cell
};

inline BinaryStack binarize_channels(const LabelMask& mask, std::size_t num_classes) {
  validate_mask(mask, num_classes);
  BinaryStack out{num_classes, mask.h, mask.w, std::vector<std::uint8_t>(num_classes * mask.h * mask.w, 0)};
  for (std::size_t y = 0; y < mask.h; ++y)
    for (std::size_t x = 0; x < mask.w; ++x) {
      const auto v = mask.at(y, x);
      if (v != kIgnoreLabel) out.at(v, y, x) = 1;
    }
  return out;
}

// Grid cell r covers mask rows [r*stride, (r+1)*stride); its centre is the
// lower middle row.
inline constexpr std::size_t cell_center(std::size_t r, std::size_t stride) { return r * stride + (stride - 1) / 2; }

/// Binary dilation with a window x window square, clipped at the borders,
/// sampled at grid cell centres.
inline MultiLabelTarget dilate_window(const BinaryStack& binary, std::size_t window, std::size_t out_stride) {
  if (window % 2 == 0) throw ConfigError(detail::concat("dilation window must be odd, got ", window));
  if (out_stride == 0 || binary.h % out_stride != 0 || binary.w % out_stride != 0)
    throw ConfigError(detail::concat("binary map ", binary.h, "x", binary.w, " is not divisible by stride ", out_stride));
  const std::size_t half = window / 2;
  const std::size_t ho = binary.h / out_stride, wo = binary.w / out_stride;

  MultiLabelTarget out;
  out.k = binary.k;
  out.h = ho;
  out.w = wo;
  out.window = window;
  out.stride = out_stride;
  out.bits.assign(binary.k * ho * wo, 0);

  // Separable: horizontal max at sampled columns, then vertical max at sampled rows.
  std::vector<std::uint8_t> rows(binary.h * wo);
  for (std::size_t k = 0; k < binary.k; ++k) {
    for (std::size_t y = 0; y < binary.h; ++y)
      for (std::size_t c = 0; c < wo; ++c) {
        const std::size_t cx = cell_center(c, out_stride);
        const std::size_t x0 = cx >= half ? cx - half : 0;
        const std::size_t x1 = std::min(cx + half, binary.w - 1);
        std::uint8_t v = 0;
        for (std::size_t x = x0; x <= x1 && !v; ++x) v = binary.at(k, y, x);
        rows[y * wo + c] = v;
      }
    for (std::size_t r = 0; r < ho; ++r) {
      const std::size_t cy = cell_center(r, out_stride);
      const std::size_t y0 = cy >= half ? cy - half : 0;
      const std::size_t y1 = std::min(cy + half, binary.h - 1);
      for (std::size_t c = 0; c < wo; ++c) {
        std::uint8_t v = 0;
        for (std::size_t y = y0; y <= y1 && !v; ++y) v = rows[y * wo + c];
        out.at(k, r, c) = v;
      }
    }
  }
  return out;
}

/// Geometry needed to derive multi-label targets from a full-resolution mask.
struct GtSpec {
  std::size_t num_classes = 0;
  std::size_t mask_stride = 1;  // full mask -> segmentation grid
  std::size_t dml_stride = 1;   // segmentation grid -> multi-label grid
  std::vector<std::size_t> windows;  // in multi-label grid cells
};

// A window of w multi-label cells spans dml_stride*w segmentation cells; the
// dilation needs an odd window, so even extents grow by one.
inline constexpr std::size_t mask_grid_window(std::size_t window, std::size_t dml_stride) {
  const std::size_t extent = window * dml_stride;
  return extent % 2 == 1 ? extent : extent + 1;
}

inline std::vector<MultiLabelTarget> gen_multilabel_gt(const LabelMask& mask, const GtSpec& spec) {
  for (std::size_t w : spec.windows)
    if (w % 2 == 0) throw ConfigError(detail::concat("window sizes must be odd, got ", w));
  if (spec.mask_stride == 0 || spec.dml_stride == 0) throw ConfigError("gt strides must be positive");
  const std::size_t total = spec.mask_stride * spec.dml_stride;
  if (mask.h % total != 0 || mask.w % total != 0)
    throw ConfigError(detail::concat("mask ", mask.h, "x", mask.w, " is not divisible by total stride ", total));
  const LabelMask grid = downsample_majority(mask, spec.mask_stride, spec.num_classes);
  const BinaryStack binary = binarize_channels(grid, spec.num_classes);
  std::vector<MultiLabelTarget> out;
  out.reserve(spec.windows.size());
  for (std::size_t j = 0; j < spec.windows.size(); ++j) {
    out.push_back(dilate_window(binary, mask_grid_window(spec.windows[j], spec.dml_stride), spec.dml_stride));
    out.back().level = j + 1;
  }
  return out;
}

/// Stacks one level of per-image targets into an (N, K, h, w) tensor.
template <typename T>
Tensor<T> targets_to_tensor(const std::vector<const MultiLabelTarget*>& batch) {
  if (batch.empty()) throw ConfigError("empty target batch");
  const auto& first = *batch.front();
  Tensor<T> out(Shape{batch.size(), first.k, first.h, first.w});
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const auto& t = *batch[n];
    if (t.k != first.k || t.h != first.h || t.w != first.w) throw ConfigError("target batch has mixed shapes");
    auto dst = out.data().subspan(n * t.bits.size(), t.bits.size());
    std::transform(t.bits.begin(), t.bits.end(), dst.begin(), [](std::uint8_t b) { return static_cast<T>(b); });
  }
  return out;
}

}  // namespace dml
