#pragma once

// Raster persistence. PNG is the only on-disk raster format; masks are 8-bit
// single-channel PNGs with 0 = background and 255 = foreground.

#include <png.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retina/error.hpp"
#include "retina/image.hpp"

namespace retina {

namespace detail {

inline bool has_png_signature(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0;
}

}  // namespace detail

[[nodiscard]] inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw IoError(IoError::Kind::missing_file, "no such file: " + path.string());
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoError::Kind::missing_file, "cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoError::Kind::write_failed, "cannot write: " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(IoError::Kind::write_failed, "short write: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError(IoError::Kind::write_failed, "rename failed: " + path.string() + ": " + ec.message());
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

/// Decodes PNG bytes. Color inputs become RGB, gray inputs stay gray; alpha is
/// composited away and 16-bit samples are reduced to 8 bits.
[[nodiscard]] inline RasterImage decode_png(std::span<const std::uint8_t> bytes, std::string_view origin = "<memory>") {
  if (!detail::has_png_signature(bytes)) {
    throw IoError(IoError::Kind::unsupported_format, "not a PNG file: " + std::string(origin));
  }
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError(IoError::Kind::corrupt_data, "corrupt PNG " + std::string(origin) + ": " + msg);
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int channels = color ? 3 : 1;
  if (image.width == 0 || image.height == 0 || image.width > (1u << 15) || image.height > (1u << 15)) {
    png_image_free(&image);
    throw IoError(IoError::Kind::corrupt_data, "implausible PNG dimensions in " + std::string(origin));
  }
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError(IoError::Kind::corrupt_data, "corrupt PNG " + std::string(origin) + ": " + msg);
  }
  return RasterImage(static_cast<int>(image.width), static_cast<int>(image.height), channels, std::move(buffer));
}

[[nodiscard]] inline std::vector<std::uint8_t> encode_png(const RasterImage& img) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.data().data(), 0, nullptr)) {
    throw IoError(IoError::Kind::write_failed, std::string("PNG encode failed: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.data().data(), 0, nullptr)) {
    throw IoError(IoError::Kind::write_failed, std::string("PNG encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

[[nodiscard]] inline RasterImage load_image(const std::filesystem::path& path) {
  return decode_png(read_file_bytes(path), path.string());
}

inline void save_image(const std::filesystem::path& path, const RasterImage& img) {
  write_file_atomic(path, encode_png(img));
}

/// Binarizes a single-channel raster: sample > 127 is foreground.
[[nodiscard]] inline BinaryMask mask_from_raster(const RasterImage& img) {
  if (img.channels() != 1) throw InvalidArgument("mask raster must be single-channel");
  BinaryMask m(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) m.set(x, y, img.at(x, y) > 127);
  return m;
}

[[nodiscard]] inline RasterImage mask_to_raster(const BinaryMask& m) {
  RasterImage img(m.width(), m.height(), 1);
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) img.at(x, y) = m.at(x, y) ? 255 : 0;
  return img;
}

[[nodiscard]] inline BinaryMask decode_mask_png(std::span<const std::uint8_t> bytes) {
  return mask_from_raster(decode_png(bytes));
}

[[nodiscard]] inline BinaryMask load_mask(const std::filesystem::path& path) {
  return mask_from_raster(load_image(path));
}

[[nodiscard]] inline std::vector<std::uint8_t> encode_mask_png(const BinaryMask& m) {
  return encode_png(mask_to_raster(m));
}

inline void save_mask(const std::filesystem::path& path, const BinaryMask& m) {
  write_file_atomic(path, encode_mask_png(m));
}

}  // namespace retina
