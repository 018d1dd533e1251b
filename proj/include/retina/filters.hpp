#pragma once

// Low-level filters shared by the feature, enhancement and post-processing
// modules. Borders replicate unless stated otherwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "retina/color.hpp"
#include "retina/error.hpp"
#include "retina/image.hpp"

namespace retina {

using Kernel1D = std::vector<double>;

/// Sampled Gaussian (order 0), its first (order 1) or second (order 2)
/// derivative as a correlation kernel, radius ceil(3 sigma). The order-0
/// kernel sums to 1; derivative kernels sum to 0.
[[nodiscard]] inline Kernel1D gaussian_kernel(double sigma, int order = 0) {
  if (!(sigma > 0.0)) throw InvalidArgument("gaussian sigma must be > 0");
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  Kernel1D k(static_cast<std::size_t>(2 * r + 1));
  const double s2 = sigma * sigma;
  double norm = 0.0;
  for (int i = -r; i <= r; ++i) norm += std::exp(-0.5 * i * i / s2);
  for (int i = -r; i <= r; ++i) {
    const double g = std::exp(-0.5 * i * i / s2) / norm;
    double v = g;
    if (order == 1) v = i / s2 * g;
    if (order == 2) v = (i * i - s2) / (s2 * s2) * g;
    k[static_cast<std::size_t>(i + r)] = v;
  }
  if (order == 2) {
    double mean = 0.0;
    for (double v : k) mean += v;
    mean /= static_cast<double>(k.size());
    for (double& v : k) v -= mean;
  }
  return k;
}

/// Separable correlation: `kx` along rows, then `ky` along columns.
[[nodiscard]] inline Plane convolve_separable(const Plane& src, std::span<const double> kx, std::span<const double> ky) {
  const int rx = static_cast<int>(kx.size() / 2);
  const int ry = static_cast<int>(ky.size() / 2);
  Plane tmp(src.width, src.height);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      double acc = 0.0;
      for (int i = -rx; i <= rx; ++i) acc += kx[static_cast<std::size_t>(i + rx)] * src.clamped(x + i, y);
      tmp.at(x, y) = acc;
    }
  Plane out(src.width, src.height);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      double acc = 0.0;
      for (int i = -ry; i <= ry; ++i) acc += ky[static_cast<std::size_t>(i + ry)] * tmp.clamped(x, y + i);
      out.at(x, y) = acc;
    }
  return out;
}

[[nodiscard]] inline Plane gaussian_blur(const Plane& src, double sigma) {
  const auto k = gaussian_kernel(sigma);
  return convolve_separable(src, k, k);
}

/// Per-channel Gaussian blur of an 8-bit raster (rounded back to 8 bits).
[[nodiscard]] inline RasterImage gaussian_blur(const RasterImage& img, double sigma) {
  RasterImage out(img.width(), img.height(), img.channels());
  for (int c = 0; c < img.channels(); ++c) {
    const auto blurred = gaussian_blur(to_plane(channel(img, c)), sigma);
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x) out.at(x, y, c) = clamp_u8(blurred.at(x, y));
  }
  return out;
}

/// Sobel gradient magnitude sqrt(gx^2 + gy^2); border pixels are left 0.
[[nodiscard]] inline Plane sobel_magnitude(const Plane& p) {
  Plane out(p.width, p.height);
  for (int y = 1; y + 1 < p.height; ++y)
    for (int x = 1; x + 1 < p.width; ++x) {
      const double gx = (p.at(x + 1, y - 1) + 2 * p.at(x + 1, y) + p.at(x + 1, y + 1)) -
                        (p.at(x - 1, y - 1) + 2 * p.at(x - 1, y) + p.at(x - 1, y + 1));
      const double gy = (p.at(x - 1, y + 1) + 2 * p.at(x, y + 1) + p.at(x + 1, y + 1)) -
                        (p.at(x - 1, y - 1) + 2 * p.at(x, y - 1) + p.at(x + 1, y - 1));
      out.at(x, y) = std::sqrt(gx * gx + gy * gy);
    }
  return out;
}

/// Offsets of the digital disk {(dx,dy) : dx^2 + dy^2 <= r^2}.
[[nodiscard]] inline std::vector<std::pair<int, int>> disk_offsets(int radius) {
  if (radius < 0) throw InvalidArgument("disk radius must be >= 0");
  std::vector<std::pair<int, int>> offs;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) offs.emplace_back(dx, dy);
  return offs;
}

namespace detail {

// Min (erode) or max (dilate) over the disk, restricted to in-bounds pixels.
template <bool Erode>
Plane gray_morph(const Plane& src, const std::vector<std::pair<int, int>>& offs) {
  Plane out(src.width, src.height);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      double v = src.at(x, y);
      for (auto [dx, dy] : offs) {
        const int xx = x + dx, yy = y + dy;
        if (xx < 0 || yy < 0 || xx >= src.width || yy >= src.height) continue;
        const double s = src.at(xx, yy);
        v = Erode ? std::min(v, s) : std::max(v, s);
      }
      out.at(x, y) = v;
    }
  return out;
}

}  // namespace detail

[[nodiscard]] inline Plane gray_erode(const Plane& src, int radius) {
  return detail::gray_morph<true>(src, disk_offsets(radius));
}
[[nodiscard]] inline Plane gray_dilate(const Plane& src, int radius) {
  return detail::gray_morph<false>(src, disk_offsets(radius));
}

/// White top-hat: src minus its grayscale opening with disk(radius).
[[nodiscard]] inline Plane white_tophat(const Plane& src, int radius) {
  const auto opened = gray_dilate(gray_erode(src, radius), radius);
  Plane out(src.width, src.height);
  for (std::size_t i = 0; i < src.values.size(); ++i) out.values[i] = src.values[i] - opened.values[i];
  return out;
}

/// Binary erosion with disk(radius); pixels outside the grid count as background.
[[nodiscard]] inline BinaryMask binary_erode(const BinaryMask& m, int radius) {
  const auto offs = disk_offsets(radius);
  BinaryMask out(m.width(), m.height());
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      if (!m.at(x, y)) continue;
      bool keep = true;
      for (auto [dx, dy] : offs) {
        const int xx = x + dx, yy = y + dy;
        if (xx < 0 || yy < 0 || xx >= m.width() || yy >= m.height() || !m.at(xx, yy)) {
          keep = false;
          break;
        }
      }
      out.set(x, y, keep);
    }
  return out;
}

[[nodiscard]] inline BinaryMask binary_dilate(const BinaryMask& m, int radius) {
  const auto offs = disk_offsets(radius);
  BinaryMask out(m.width(), m.height());
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      if (!m.at(x, y)) continue;
      for (auto [dx, dy] : offs) {
        const int xx = x + dx, yy = y + dy;
        if (xx >= 0 && yy >= 0 && xx < m.width() && yy < m.height()) out.set(xx, yy);
      }
    }
  return out;
}

/// Box-window mean/variance over an integer-valued channel, computed from
/// exact 64-bit integral images with border replication.
class LocalStats {
 public:
  LocalStats(const std::vector<std::uint8_t>& values, int width, int height, int window)
      : width_(width), height_(height), half_(window / 2) {
    if (window < 3 || window % 2 == 0) throw InvalidArgument("local window must be odd and >= 3");
    const int pw = width + 2 * half_, ph = height + 2 * half_;
    stride_ = pw + 1;
    sum_.assign(static_cast<std::size_t>(stride_) * static_cast<std::size_t>(ph + 1), 0);
    sq_ = sum_;
    for (int y = 0; y < ph; ++y) {
      const int sy = std::clamp(y - half_, 0, height - 1);
      std::int64_t row_s = 0, row_q = 0;
      for (int x = 0; x < pw; ++x) {
        const int sx = std::clamp(x - half_, 0, width - 1);
        const std::int64_t v = values[static_cast<std::size_t>(sy) * static_cast<std::size_t>(width) +
                                      static_cast<std::size_t>(sx)];
        row_s += v;
        row_q += v * v;
        sum_[idx(x + 1, y + 1)] = sum_[idx(x + 1, y)] + row_s;
        sq_[idx(x + 1, y + 1)] = sq_[idx(x + 1, y)] + row_q;
      }
    }
  }

  [[nodiscard]] std::int64_t count() const noexcept {
    const std::int64_t w = 2 * half_ + 1;
    return w * w;
  }

  /// Sum of samples in the window centred at (x, y).
  [[nodiscard]] std::int64_t sum(int x, int y) const noexcept { return box(sum_, x, y); }
  [[nodiscard]] std::int64_t sum_sq(int x, int y) const noexcept { return box(sq_, x, y); }

  /// n * sigma, i.e. sqrt(n * sum_sq - sum^2); exact zero on flat windows.
  [[nodiscard]] double scaled_std(int x, int y) const noexcept {
    const std::int64_t s = sum(x, y);
    const std::int64_t q = sum_sq(x, y);
    const std::int64_t d = count() * q - s * s;
    return d > 0 ? std::sqrt(static_cast<double>(d)) : 0.0;
  }

  [[nodiscard]] double mean(int x, int y) const noexcept {
    return static_cast<double>(sum(x, y)) / static_cast<double>(count());
  }
  [[nodiscard]] double stddev(int x, int y) const noexcept {
    return scaled_std(x, y) / static_cast<double>(count());
  }

 private:
  [[nodiscard]] std::size_t idx(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(stride_) + static_cast<std::size_t>(x);
  }
  [[nodiscard]] std::int64_t box(const std::vector<std::int64_t>& t, int x, int y) const noexcept {
    // Window [x-half, x+half] in source coordinates is [x, x+2half] padded.
    const int x0 = x, y0 = y, x1 = x + 2 * half_ + 1, y1 = y + 2 * half_ + 1;
    return t[idx(x1, y1)] - t[idx(x0, y1)] - t[idx(x1, y0)] + t[idx(x0, y0)];
  }

  int width_;
  int height_;
  int half_;
  int stride_ = 0;
  std::vector<std::int64_t> sum_;
  std::vector<std::int64_t> sq_;
};

/// Labels 8-connected foreground components; label 0 is background,
/// components are numbered 1.. in raster order of their first pixel.
[[nodiscard]] inline std::vector<int> label_components(const BinaryMask& m, int* count = nullptr) {
  std::vector<int> labels(m.size(), 0);
  std::vector<std::pair<int, int>> stack;
  int next = 0;
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(m.width()) + static_cast<std::size_t>(x);
      if (!m[i] || labels[i] != 0) continue;
      ++next;
      labels[i] = next;
      stack.emplace_back(x, y);
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx, ny = cy + dy;
            if (nx < 0 || ny < 0 || nx >= m.width() || ny >= m.height()) continue;
            const auto j = static_cast<std::size_t>(ny) * static_cast<std::size_t>(m.width()) + static_cast<std::size_t>(nx);
            if (m[j] && labels[j] == 0) {
              labels[j] = next;
              stack.emplace_back(nx, ny);
            }
          }
      }
    }
  if (count) *count = next;
  return labels;
}

}  // namespace retina
