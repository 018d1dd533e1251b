#pragma once

// Color conversions: ITU-R 601 luma, HSV, and CIE L*a*b* (sRGB, D65).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "retina/image.hpp"

namespace retina {

[[nodiscard]] constexpr double luma(double r, double g, double b) noexcept {
  // Integer weights keep gray pixels exact: luma(v, v, v) == v.
  return (299.0 * r + 587.0 * g + 114.0 * b) / 1000.0;
}

[[nodiscard]] inline std::uint8_t clamp_u8(double v) noexcept {
  return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
}

/// Unrounded luma of every pixel; gray images pass through.
[[nodiscard]] inline Plane luma_plane(const RasterImage& img) {
  Plane p(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      p.at(x, y) = img.channels() == 1 ? img.at(x, y) : luma(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2));
  return p;
}

/// 8-bit grayscale raster (rounded luma).
[[nodiscard]] inline RasterImage to_gray(const RasterImage& img) {
  if (img.channels() == 1) return img;
  RasterImage out(img.width(), img.height(), 1);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      out.at(x, y) = clamp_u8(luma(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2)));
  return out;
}

/// Single channel of an RGB image; gray images are returned unchanged.
[[nodiscard]] inline RasterImage channel(const RasterImage& img, int c) {
  if (img.channels() == 1) return img;
  RasterImage out(img.width(), img.height(), 1);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) out.at(x, y) = img.at(x, y, c);
  return out;
}

[[nodiscard]] inline Plane to_plane(const RasterImage& gray) {
  Plane p(gray.width(), gray.height());
  for (int y = 0; y < gray.height(); ++y)
    for (int x = 0; x < gray.width(); ++x) p.at(x, y) = gray.at(x, y);
  return p;
}

struct Hsv {
  double h;  ///< degrees, [0, 360)
  double s;  ///< [0, 1]
  double v;  ///< [0, 255]
};

[[nodiscard]] inline Hsv rgb_to_hsv(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) noexcept {
  const double r = r8, g = g8, b = b8;
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  double h = 0.0;
  if (d > 0.0) {
    if (mx == r) {
      h = 60.0 * std::fmod((g - b) / d, 6.0);
    } else if (mx == g) {
      h = 60.0 * ((b - r) / d + 2.0);
    } else {
      h = 60.0 * ((r - g) / d + 4.0);
    }
    if (h < 0.0) h += 360.0;
    if (h >= 360.0) h -= 360.0;
  }
  return {h, mx > 0.0 ? d / mx : 0.0, mx};
}

[[nodiscard]] inline std::array<std::uint8_t, 3> hsv_to_rgb(const Hsv& hsv) noexcept {
  const double c = hsv.v * hsv.s;
  const double hp = hsv.h / 60.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = hsv.v - c;
  return {clamp_u8(r + m), clamp_u8(g + m), clamp_u8(b + m)};
}

struct Lab {
  double l;  ///< [0, 100]
  double a;
  double b;
};

namespace detail {

inline constexpr double kWhiteX = 0.95047;
inline constexpr double kWhiteY = 1.0;
inline constexpr double kWhiteZ = 1.08883;

inline double srgb_to_linear(double c) noexcept {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}
inline double linear_to_srgb(double c) noexcept {
  return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}
inline double lab_f(double t) noexcept {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3.0 * d * d) + 4.0 / 29.0;
}
inline double lab_finv(double t) noexcept {
  constexpr double d = 6.0 / 29.0;
  return t > d ? t * t * t : 3.0 * d * d * (t - 4.0 / 29.0);
}

}  // namespace detail

[[nodiscard]] inline Lab rgb_to_lab(double r8, double g8, double b8) noexcept {
  using namespace detail;
  const double r = srgb_to_linear(r8 / 255.0);
  const double g = srgb_to_linear(g8 / 255.0);
  const double b = srgb_to_linear(b8 / 255.0);
  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  const double fx = lab_f(x / kWhiteX), fy = lab_f(y / kWhiteY), fz = lab_f(z / kWhiteZ);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

/// Inverse of rgb_to_lab; returns unrounded, unclamped sRGB in [0,255] scale.
[[nodiscard]] inline std::array<double, 3> lab_to_rgb(const Lab& lab) noexcept {
  using namespace detail;
  const double fy = (lab.l + 16.0) / 116.0;
  const double fx = fy + lab.a / 500.0;
  const double fz = fy - lab.b / 200.0;
  const double x = kWhiteX * lab_finv(fx), y = kWhiteY * lab_finv(fy), z = kWhiteZ * lab_finv(fz);
  const double r = 3.2404542 * x - 1.5371385 * y - 0.4985314 * z;
  const double g = -0.9692660 * x + 1.8760108 * y + 0.0415560 * z;
  const double b = 0.0556434 * x - 0.2040259 * y + 1.0572252 * z;
  auto enc = [](double c) { return 255.0 * linear_to_srgb(std::clamp(c, 0.0, 1.0)); };
  return {enc(r), enc(g), enc(b)};
}

}  // namespace retina
