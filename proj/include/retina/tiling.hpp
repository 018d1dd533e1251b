#pragma once

#include <algorithm>
#include <vector>

#include "retina/error.hpp"
#include "retina/image.hpp"

namespace retina {

struct Patch {
  int x = 0;  ///< left offset in the source image
  int y = 0;  ///< top offset in the source image
  RasterImage pixels;
};

namespace detail {

// Offsets along one axis: multiples of stride while the window fits, then one
// last window flush with the border.
inline std::vector<int> tile_offsets(int extent, int size, int stride) {
  if (size >= extent) return {0};
  std::vector<int> offs;
  for (int o = 0; o + size <= extent; o += stride) offs.push_back(o);
  if (offs.back() + size < extent) offs.push_back(extent - size);
  return offs;
}

}  // namespace detail

/// Cuts `img` into size x size patches, row-major by offset. Patches are
/// clamped to the image, so the last row/column may overlap its predecessor.
[[nodiscard]] inline std::vector<Patch> tile_patches(const RasterImage& img, int size, int stride) {
  if (size < 1 || stride < 1) throw InvalidArgument("patch size and stride must be >= 1");
  const int pw = std::min(size, img.width());
  const int ph = std::min(size, img.height());
  const auto xs = detail::tile_offsets(img.width(), size, stride);
  const auto ys = detail::tile_offsets(img.height(), size, stride);
  std::vector<Patch> out;
  out.reserve(xs.size() * ys.size());
  for (int y : ys)
    for (int x : xs) out.push_back({x, y, img.region(x, y, pw, ph)});
  return out;
}

/// Pastes patches back onto a width x height canvas; later patches win where
/// they overlap.
[[nodiscard]] inline RasterImage stitch_patches(const std::vector<Patch>& patches, int width, int height) {
  if (patches.empty()) throw InvalidArgument("no patches to stitch");
  RasterImage out(width, height, patches.front().pixels.channels());
  for (const auto& p : patches) {
    if (p.pixels.channels() != out.channels()) throw InvalidArgument("patch channel count differs");
    if (p.x < 0 || p.y < 0 || p.x + p.pixels.width() > width || p.y + p.pixels.height() > height)
      throw InvalidArgument("patch outside stitch canvas");
    for (int y = 0; y < p.pixels.height(); ++y)
      for (int x = 0; x < p.pixels.width(); ++x)
        for (int c = 0; c < out.channels(); ++c) out.at(p.x + x, p.y + y, c) = p.pixels.at(x, y, c);
  }
  return out;
}

}  // namespace retina
