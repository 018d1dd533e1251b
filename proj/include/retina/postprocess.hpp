#pragma once

// Filters machine-predicted lesion masks so that suggestions carry fewer
// background pixels. Every filter only removes foreground.

#include <cmath>
#include <cstdint>
#include <vector>

#include "retina/color.hpp"
#include "retina/error.hpp"
#include "retina/filters.hpp"
#include "retina/image.hpp"

namespace retina {

struct PostprocessParams {
  int window = 25;
  double k_bright = 1.0;
  double k_dark = 1.0;
  double hue_lo = 20.0;
  double hue_hi = 80.0;
  double sat_max = 0.6;
  int open_radius_ma = 1;
  int open_radius_ha = 2;
  int min_area = 5;

  void validate() const {
    if (window < 3 || window % 2 == 0) throw InvalidArgument("window must be odd and >= 3");
    if (open_radius_ma < 0 || open_radius_ha < 0) throw InvalidArgument("radii must be >= 0");
    if (!(hue_lo >= 0.0 && hue_lo < 360.0 && hue_hi >= 0.0 && hue_hi < 360.0))
      throw InvalidArgument("hue range must lie in [0,360)");
    if (min_area < 1) throw InvalidArgument("min_area must be >= 1");
  }

  [[nodiscard]] int open_radius(LesionType t) const noexcept {
    return t == LesionType::MA ? open_radius_ma : open_radius_ha;
  }
};

/// Erosion then dilation with disk(radius); radius 0 is the identity.
[[nodiscard]] inline BinaryMask morphological_open(const BinaryMask& m, int radius) {
  if (radius < 0) throw InvalidArgument("opening radius must be >= 0");
  if (radius == 0) return m;
  return binary_dilate(binary_erode(m, radius), radius);
}

/// Drops 8-connected components smaller than `min_area` pixels.
[[nodiscard]] inline BinaryMask remove_small_components(const BinaryMask& m, int min_area) {
  if (min_area < 1) throw InvalidArgument("min_area must be >= 1");
  int count = 0;
  const auto labels = label_components(m, &count);
  std::vector<int> area(static_cast<std::size_t>(count) + 1, 0);
  for (int l : labels) ++area[static_cast<std::size_t>(l)];
  BinaryMask out(m.width(), m.height());
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      const int l = labels[static_cast<std::size_t>(y) * static_cast<std::size_t>(m.width()) + static_cast<std::size_t>(x)];
      if (l > 0 && area[static_cast<std::size_t>(l)] >= min_area) out.set(x, y);
    }
  return out;
}

/// HSV value channel (max of R, G, B) as raw bytes.
[[nodiscard]] inline std::vector<std::uint8_t> value_channel(const RasterImage& img) {
  std::vector<std::uint8_t> v(img.pixel_count());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      std::uint8_t mx = img.at(x, y, 0);
      for (int c = 1; c < img.channels(); ++c) mx = std::max(mx, img.at(x, y, c));
      v[static_cast<std::size_t>(y) * static_cast<std::size_t>(img.width()) + static_cast<std::size_t>(x)] = mx;
    }
  return v;
}

namespace detail {

inline void check_mask_dims(const RasterImage& img, const BinaryMask& m) {
  if (img.width() != m.width() || img.height() != m.height())
    throw DimensionMismatch("mask is " + std::to_string(m.width()) + "x" + std::to_string(m.height()) +
                            ", image is " + std::to_string(img.width()) + "x" + std::to_string(img.height()));
}

inline bool hue_in_range(double h, double lo, double hi) {
  return lo <= hi ? (h >= lo && h <= hi) : (h >= lo || h <= hi);
}

}  // namespace detail

/// Bright-lesion filter for exudates. A predicted pixel survives when its V
/// is strictly above local mean + k_bright * local std and it is either
/// whitish (low saturation) or yellowish (hue in range).
[[nodiscard]] inline BinaryMask filter_ex(const RasterImage& img, const BinaryMask& mask, const PostprocessParams& p = {}) {
  p.validate();
  detail::check_mask_dims(img, mask);
  const auto v = value_channel(img);
  const LocalStats stats(v, img.width(), img.height(), p.window);
  const double n = static_cast<double>(stats.count());
  BinaryMask kept(mask.width(), mask.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      if (!mask.at(x, y)) continue;
      const double val = v[static_cast<std::size_t>(y) * static_cast<std::size_t>(img.width()) + static_cast<std::size_t>(x)];
      // val > mean + k*std, scaled by the window size to stay in exact integers
      const double lhs = val * n - static_cast<double>(stats.sum(x, y));
      if (!(lhs > p.k_bright * stats.scaled_std(x, y))) continue;
      const auto hsv = img.channels() == 3 ? rgb_to_hsv(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2))
                                           : Hsv{0.0, 0.0, val};
      if (hsv.s <= p.sat_max || detail::hue_in_range(hsv.h, p.hue_lo, p.hue_hi)) kept.set(x, y);
    }
  return remove_small_components(kept, p.min_area);
}

/// Dark-lesion filter for haemorrhages and microaneurysms: V strictly below
/// local mean - k_dark * local std, then opening, then small-component removal.
[[nodiscard]] inline BinaryMask filter_dark(const RasterImage& img, const BinaryMask& mask, LesionType lesion,
                                            const PostprocessParams& p = {}) {
  p.validate();
  if (lesion != LesionType::HA && lesion != LesionType::MA)
    throw InvalidArgument("dark-lesion filter applies to HA or MA only");
  detail::check_mask_dims(img, mask);
  const auto v = value_channel(img);
  const LocalStats stats(v, img.width(), img.height(), p.window);
  const double n = static_cast<double>(stats.count());
  BinaryMask kept(mask.width(), mask.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      if (!mask.at(x, y)) continue;
      const double val = v[static_cast<std::size_t>(y) * static_cast<std::size_t>(img.width()) + static_cast<std::size_t>(x)];
      const double rhs = static_cast<double>(stats.sum(x, y)) - val * n;
      if (rhs > p.k_dark * stats.scaled_std(x, y)) kept.set(x, y);
    }
  return remove_small_components(morphological_open(kept, p.open_radius(lesion)), p.min_area);
}

/// Dispatch by lesion type. SE masks pass through untouched.
[[nodiscard]] inline BinaryMask postprocess(const RasterImage& img, const BinaryMask& mask, LesionType lesion,
                                            const PostprocessParams& p = {}) {
  switch (lesion) {
    case LesionType::EX: return filter_ex(img, mask, p);
    case LesionType::HA:
    case LesionType::MA: return filter_dark(img, mask, lesion, p);
    case LesionType::SE:
      detail::check_mask_dims(img, mask);
      return mask;
  }
  return mask;
}

}  // namespace retina
