#pragma once

// Lesion-visibility enhancement: black-margin crop, CLAHE on the L* channel,
// gamma correction per RGB channel.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "retina/color.hpp"
#include "retina/error.hpp"
#include "retina/features.hpp"
#include "retina/image.hpp"

namespace retina {

using ToneMap = std::array<std::uint8_t, 256>;

/// Clips a 256-bin histogram at `limit` and hands the clipped mass back to the
/// bins still under the limit in equal shares, never pushing a bin above the
/// limit (water filling). Total mass is preserved whenever 256 * limit covers it.
[[nodiscard]] inline std::array<double, 256> clip_histogram(const std::array<double, 256>& hist, double limit) {
  std::array<double, 256> out{};
  double excess = 0.0;
  for (std::size_t v = 0; v < 256; ++v) {
    out[v] = std::min(hist[v], limit);
    excess += hist[v] - out[v];
  }
  if (excess <= 0.0) return out;
  std::array<double, 256> deficit{};
  for (std::size_t v = 0; v < 256; ++v) deficit[v] = limit - out[v];
  std::sort(deficit.begin(), deficit.end());
  double level = 0.0, prev = 0.0, remaining = excess;
  std::size_t open = 256;
  bool placed = false;
  for (std::size_t k = 0; k < 256; ++k) {
    const double step = (deficit[k] - prev) * static_cast<double>(open);
    if (remaining <= step) {
      level = prev + remaining / static_cast<double>(open);
      placed = true;
      break;
    }
    remaining -= step;
    prev = deficit[k];
    --open;
  }
  if (!placed) level = prev;
  for (auto& b : out) b = std::min(b + level, limit);
  return out;
}

/// m(v) = round(255 (cdf(v) - cdf_min) / (N - cdf_min)), cdf_min being the
/// first nonzero cumulative value. A tile whose whole mass sits in one bin
/// maps everything to 0.
[[nodiscard]] inline ToneMap equalization_map(const std::array<double, 256>& hist) {
  ToneMap m{};
  double total = 0.0;
  for (double h : hist) total += h;
  double cdf_min = 0.0;
  for (double h : hist)
    if (h > 0.0) {
      cdf_min = h;
      break;
    }
  const double den = total - cdf_min;
  double cdf = 0.0;
  for (std::size_t v = 0; v < 256; ++v) {
    cdf += hist[v];
    const double num = std::max(0.0, cdf - cdf_min);
    m[v] = den > 1e-9 * total ? clamp_u8(255.0 * num / den) : 0;
  }
  // Keep the map monotone under rounding noise.
  for (std::size_t v = 1; v < 256; ++v) m[v] = std::max(m[v], m[v - 1]);
  return m;
}

struct ClaheParams {
  double clip = 3.0;  ///< multiple of the uniform bin height; infinity disables clipping
  int grid_cols = 8;
  int grid_rows = 8;
};

/// Per-tile tone maps plus bilinear blending between tile centres.
class ClaheMapping {
 public:
  ClaheMapping(const RasterImage& gray, const ClaheParams& p) : cols_(p.grid_cols), rows_(p.grid_rows) {
    if (gray.channels() != 1) throw InvalidArgument("CLAHE expects a single-channel image");
    if (cols_ < 1 || rows_ < 1) throw InvalidArgument("CLAHE grid dimensions must be >= 1");
    if (!(p.clip >= 1.0)) throw InvalidArgument("CLAHE clip must be >= 1");
    if (gray.width() < cols_ || gray.height() < rows_) throw InvalidArgument("image smaller than CLAHE grid");
    xs_ = bounds(gray.width(), cols_);
    ys_ = bounds(gray.height(), rows_);
    maps_.resize(static_cast<std::size_t>(cols_) * static_cast<std::size_t>(rows_));
    for (int ty = 0; ty < rows_; ++ty)
      for (int tx = 0; tx < cols_; ++tx) {
        const int x0 = xs_[static_cast<std::size_t>(tx)], x1 = xs_[static_cast<std::size_t>(tx) + 1];
        const int y0 = ys_[static_cast<std::size_t>(ty)], y1 = ys_[static_cast<std::size_t>(ty) + 1];
        const double n = static_cast<double>(x1 - x0) * static_cast<double>(y1 - y0);
        if (n < 4) throw InvalidArgument("CLAHE tile with fewer than 4 pixels");
        std::array<double, 256> hist{};
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) hist[gray.at(x, y)] += 1.0;
        if (std::isfinite(p.clip)) hist = clip_histogram(hist, p.clip * n / 256.0);
        maps_[static_cast<std::size_t>(ty) * static_cast<std::size_t>(cols_) + static_cast<std::size_t>(tx)] =
            equalization_map(hist);
      }
  }

  [[nodiscard]] const ToneMap& tile(int tx, int ty) const {
    return maps_[static_cast<std::size_t>(ty) * static_cast<std::size_t>(cols_) + static_cast<std::size_t>(tx)];
  }
  [[nodiscard]] int cols() const noexcept { return cols_; }
  [[nodiscard]] int rows() const noexcept { return rows_; }

  /// Mapped value at pixel (x, y) for a possibly fractional input level.
  [[nodiscard]] double apply(int x, int y, double level) const {
    const auto [tx0, tx1, wx] = locate(x, xs_);
    const auto [ty0, ty1, wy] = locate(y, ys_);
    auto lookup = [&](int tx, int ty) {
      const auto& m = tile(tx, ty);
      const double v = std::clamp(level, 0.0, 255.0);
      const auto lo = static_cast<std::size_t>(std::floor(v));
      const auto hi = std::min<std::size_t>(lo + 1, 255);
      const double f = v - static_cast<double>(lo);
      return (1.0 - f) * m[lo] + f * m[hi];
    };
    const double top = (1.0 - wx) * lookup(tx0, ty0) + wx * lookup(tx1, ty0);
    const double bottom = (1.0 - wx) * lookup(tx0, ty1) + wx * lookup(tx1, ty1);
    return (1.0 - wy) * top + wy * bottom;
  }

 private:
  struct Loc {
    int i0, i1;
    double w;
  };

  static std::vector<int> bounds(int extent, int tiles) {
    std::vector<int> b(static_cast<std::size_t>(tiles) + 1);
    for (int i = 0; i <= tiles; ++i)
      b[static_cast<std::size_t>(i)] =
          static_cast<int>(static_cast<long long>(i) * extent / tiles);
    return b;
  }

  static double centre(const std::vector<int>& b, int i) {
    return 0.5 * (b[static_cast<std::size_t>(i)] + b[static_cast<std::size_t>(i) + 1] - 1);
  }

  static Loc locate(int p, const std::vector<int>& b) {
    const int tiles = static_cast<int>(b.size()) - 1;
    if (p <= centre(b, 0)) return {0, 0, 0.0};
    if (p >= centre(b, tiles - 1)) return {tiles - 1, tiles - 1, 0.0};
    int i = 0;
    while (i + 1 < tiles && centre(b, i + 1) <= p) ++i;
    const double c0 = centre(b, i), c1 = centre(b, i + 1);
    return {i, i + 1, (p - c0) / (c1 - c0)};
  }

  int cols_;
  int rows_;
  std::vector<int> xs_;
  std::vector<int> ys_;
  std::vector<ToneMap> maps_;
};

[[nodiscard]] inline RasterImage clahe(const RasterImage& gray, const ClaheParams& p = {}) {
  const ClaheMapping mapping(gray, p);
  RasterImage out(gray.width(), gray.height(), 1);
  for (int y = 0; y < gray.height(); ++y)
    for (int x = 0; x < gray.width(); ++x) out.at(x, y) = clamp_u8(mapping.apply(x, y, gray.at(x, y)));
  return out;
}

/// Plain global histogram equalization (unclipped, single tile).
[[nodiscard]] inline RasterImage equalize_histogram(const RasterImage& gray) {
  return clahe(gray, {std::numeric_limits<double>::infinity(), 1, 1});
}

[[nodiscard]] inline ToneMap gamma_table(double gamma) {
  if (!(gamma > 0.0)) throw InvalidArgument("gamma must be > 0");
  ToneMap t{};
  for (int v = 0; v < 256; ++v) t[static_cast<std::size_t>(v)] = clamp_u8(255.0 * std::pow(v / 255.0, gamma));
  return t;
}

/// out = round(255 (in/255)^gamma), applied to every sample.
[[nodiscard]] inline RasterImage gamma_correct(const RasterImage& img, double gamma) {
  const auto t = gamma_table(gamma);
  RasterImage out = img;
  for (auto& v : out.data()) v = t[v];
  return out;
}

struct EnhancementParams {
  double clahe_clip = 3.0;
  int grid_cols = 8;
  int grid_rows = 8;
  double gamma = 0.8;
  int dark_threshold = 15;

  void validate() const {
    if (!(clahe_clip >= 1.0)) throw InvalidArgument("clahe_clip must be >= 1");
    if (grid_cols < 1 || grid_rows < 1) throw InvalidArgument("tile grid dimensions must be >= 1");
    if (!(gamma > 0.0)) throw InvalidArgument("gamma must be > 0");
  }
};

/// Crop, CLAHE on L* (sRGB/D65 Lab), back to RGB, gamma per channel. Gray
/// inputs skip the colour conversion. Output has the crop's dimensions.
[[nodiscard]] inline RasterImage enhance(const RasterImage& img, const EnhancementParams& p = {}) {
  p.validate();
  const auto cropped = crop_black_margins(img, p.dark_threshold).image;
  const ClaheParams cp{p.clahe_clip, p.grid_cols, p.grid_rows};
  if (cropped.channels() == 1) return gamma_correct(clahe(cropped, cp), p.gamma);

  const int w = cropped.width(), h = cropped.height();
  std::vector<Lab> lab(cropped.pixel_count());
  RasterImage lightness(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto& px = lab[static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)];
      px = rgb_to_lab(cropped.at(x, y, 0), cropped.at(x, y, 1), cropped.at(x, y, 2));
      lightness.at(x, y) = clamp_u8(px.l * 2.55);
    }
  const ClaheMapping mapping(lightness, cp);
  RasterImage out(w, h, 3);
  const auto g = gamma_table(p.gamma);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto px = lab[static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)];
      px.l = mapping.apply(x, y, px.l * 2.55) / 2.55;
      const auto rgb = lab_to_rgb(px);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = g[clamp_u8(rgb[static_cast<std::size_t>(c)])];
    }
  return out;
}

}  // namespace retina
