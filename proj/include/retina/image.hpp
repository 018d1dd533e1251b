#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "retina/error.hpp"

namespace retina {

/// 8-bit gray or RGB pixel grid, row-major, channels interleaved.
class RasterImage {
 public:
  RasterImage() = default;

  RasterImage(int width, int height, int channels, std::uint8_t fill = 0)
      : width_(width), height_(height), channels_(channels) {
    validate_shape(width, height, channels);
    data_.assign(sample_count(), fill);
  }

  RasterImage(int width, int height, int channels, std::vector<std::uint8_t> data)
      : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
    validate_shape(width, height, channels);
    if (data_.size() != sample_count()) {
      throw InvalidArgument("raster data length " + std::to_string(data_.size()) +
                            " does not match " + std::to_string(width) + "x" +
                            std::to_string(height) + "x" + std::to_string(channels));
    }
  }

  [[nodiscard]] int width() const noexcept { return width_; }
  [[nodiscard]] int height() const noexcept { return height_; }
  [[nodiscard]] int channels() const noexcept { return channels_; }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }
  [[nodiscard]] std::size_t pixel_count() const noexcept {
    return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_);
  }
  [[nodiscard]] std::size_t sample_count() const noexcept {
    return pixel_count() * static_cast<std::size_t>(channels_);
  }

  [[nodiscard]] std::uint8_t at(int x, int y, int c = 0) const noexcept {
    return data_[index(x, y, c)];
  }
  std::uint8_t& at(int x, int y, int c = 0) noexcept { return data_[index(x, y, c)]; }

  [[nodiscard]] std::span<const std::uint8_t> data() const noexcept { return data_; }
  [[nodiscard]] std::span<std::uint8_t> data() noexcept { return data_; }

  /// Copy of the rectangle [left, left+w) x [top, top+h).
  [[nodiscard]] RasterImage region(int left, int top, int w, int h) const {
    if (left < 0 || top < 0 || w < 1 || h < 1 || left + w > width_ || top + h > height_) {
      throw InvalidArgument("region outside image bounds");
    }
    RasterImage out(w, h, channels_);
    const auto row_len = static_cast<std::size_t>(w) * static_cast<std::size_t>(channels_);
    for (int y = 0; y < h; ++y) {
      const auto* src = &data_[index(left, top + y, 0)];
      std::copy(src, src + row_len, &out.data_[out.index(0, y, 0)]);
    }
    return out;
  }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;

 private:
  static void validate_shape(int width, int height, int channels) {
    if (width < 1 || height < 1) throw InvalidArgument("raster dimensions must be >= 1");
    if (channels != 1 && channels != 3) throw InvalidArgument("raster must have 1 or 3 channels");
  }

  [[nodiscard]] std::size_t index(int x, int y, int c) const noexcept {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
            static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(channels_) +
           static_cast<std::size_t>(c);
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Real-valued single-channel grid used by the filters.
struct Plane {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  Plane() = default;
  Plane(int w, int h, double fill = 0.0)
      : width(w), height(h), values(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  [[nodiscard]] double at(int x, int y) const noexcept {
    return values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
  double& at(int x, int y) noexcept {
    return values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
  /// Border-replicated read.
  [[nodiscard]] double clamped(int x, int y) const noexcept {
    x = x < 0 ? 0 : (x >= width ? width - 1 : x);
    y = y < 0 ? 0 : (y >= height ? height - 1 : y);
    return at(x, y);
  }
};

/// Binary per-pixel flags; 1 = foreground.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int width, int height, bool fill = false)
      : width_(width), height_(height),
        bits_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill ? 1 : 0) {
    if (width < 1 || height < 1) throw InvalidArgument("mask dimensions must be >= 1");
  }

  [[nodiscard]] int width() const noexcept { return width_; }
  [[nodiscard]] int height() const noexcept { return height_; }
  [[nodiscard]] std::size_t size() const noexcept { return bits_.size(); }

  [[nodiscard]] bool at(int x, int y) const noexcept { return bits_[offset(x, y)] != 0; }
  void set(int x, int y, bool v = true) noexcept { bits_[offset(x, y)] = v ? 1 : 0; }

  [[nodiscard]] bool operator[](std::size_t i) const noexcept { return bits_[i] != 0; }
  [[nodiscard]] std::span<const std::uint8_t> bits() const noexcept { return bits_; }

  [[nodiscard]] std::size_t count() const noexcept {
    std::size_t n = 0;
    for (auto b : bits_) n += b;
    return n;
  }

  [[nodiscard]] bool same_shape(const BinaryMask& o) const noexcept {
    return width_ == o.width_ && height_ == o.height_;
  }

  /// True when every foreground pixel of this mask is also foreground in `o`.
  [[nodiscard]] bool subset_of(const BinaryMask& o) const noexcept {
    if (!same_shape(o)) return false;
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (bits_[i] && !o.bits_[i]) return false;
    return true;
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  [[nodiscard]] std::size_t offset(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> bits_;
};

enum class LesionType { EX, SE, HA, MA };

inline constexpr std::array<LesionType, 4> kAllLesions = {LesionType::EX, LesionType::HA,
                                                          LesionType::MA, LesionType::SE};

[[nodiscard]] inline std::string_view to_string(LesionType t) noexcept {
  switch (t) {
    case LesionType::EX: return "EX";
    case LesionType::SE: return "SE";
    case LesionType::HA: return "HA";
    case LesionType::MA: return "MA";
  }
  return "?";
}

[[nodiscard]] inline LesionType parse_lesion(std::string_view s) {
  if (s == "EX") return LesionType::EX;
  if (s == "SE") return LesionType::SE;
  if (s == "HA") return LesionType::HA;
  if (s == "MA") return LesionType::MA;
  throw InvalidArgument("unknown lesion type '" + std::string(s) + "'");
}

struct LesionMask {
  LesionType lesion = LesionType::EX;
  BinaryMask grid;
};

/// One annotator's mask for one lesion type on one image.
struct Annotation {
  std::string annotator_id;
  std::string image_id;
  LesionType lesion = LesionType::EX;
  BinaryMask mask;
  double confidence = 1.0;
  double expertise = 1.0;

  /// Foreground pixel weight p = confidence x expertise.
  [[nodiscard]] double weight() const noexcept { return confidence * expertise; }

  void validate() const {
    if (!(confidence >= 0.0 && confidence <= 1.0))
      throw InvalidArgument("confidence must lie in [0,1]");
    if (!(expertise >= 0.0 && expertise <= 1.0))
      throw InvalidArgument("expertise must lie in [0,1]");
  }
};

// Banded labels for confidence and expertise. Each band is [lo, hi) except the
// top one, which is closed.
struct Band {
  std::string_view label;
  double lo;
  double hi;
  [[nodiscard]] double midpoint() const noexcept { return 0.5 * (lo + hi); }
  [[nodiscard]] bool contains(double v) const noexcept {
    return v >= lo && (v < hi || (hi == 1.0 && v <= 1.0));
  }
};

inline constexpr std::array<Band, 5> kConfidenceBands = {{
    {"very low", 0.0, 0.2},
    {"low", 0.2, 0.4},
    {"medium", 0.4, 0.6},
    {"high", 0.6, 0.8},
    {"very high", 0.8, 1.0},
}};

inline constexpr std::array<Band, 5> kExpertiseBands = {{
    {"No medical background", 0.0, 0.1},
    {"Medical student", 0.1, 0.3},
    {"Doctor in another specialty", 0.3, 0.5},
    {"Resident/junior ophthalmologist", 0.5, 0.9},
    {"Expert ophthalmologist", 0.9, 1.0},
}};

template <std::size_t N>
[[nodiscard]] std::optional<Band> find_band(const std::array<Band, N>& bands, std::string_view label) {
  for (const auto& b : bands)
    if (b.label == label) return b;
  return std::nullopt;
}

/// Band midpoint for a label, e.g. "Expert ophthalmologist" -> 0.95.
[[nodiscard]] inline double confidence_from_label(std::string_view label) {
  if (auto b = find_band(kConfidenceBands, label)) return b->midpoint();
  throw InvalidArgument("unknown confidence band '" + std::string(label) + "'");
}

[[nodiscard]] inline double expertise_from_label(std::string_view label) {
  if (auto b = find_band(kExpertiseBands, label)) return b->midpoint();
  throw InvalidArgument("unknown expertise band '" + std::string(label) + "'");
}

}  // namespace retina
