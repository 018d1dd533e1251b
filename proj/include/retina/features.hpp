#pragma once

// Handcrafted image-quality descriptors plus ingestion of the two
// contrastive vision-language scores ("blurry", "artifacts").

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retina/color.hpp"
#include "retina/error.hpp"
#include "retina/filters.hpp"
#include "retina/format.hpp"
#include "retina/image.hpp"
#include "retina/io.hpp"

namespace retina {

struct CropBox {
  int left = 0;
  int top = 0;
  int width = 0;
  int height = 0;
  friend bool operator==(const CropBox&, const CropBox&) = default;
};

struct CropResult {
  RasterImage image;
  CropBox box;
  bool degenerate = false;  ///< no pixel exceeded the threshold; full frame kept
};

/// Minimal bounding box of pixels whose brightest channel exceeds
/// `dark_threshold`.
[[nodiscard]] inline CropResult crop_black_margins(const RasterImage& img, int dark_threshold = 15) {
  if (dark_threshold < 0 || dark_threshold > 255) throw InvalidArgument("dark_threshold must lie in [0,255]");
  int x0 = img.width(), y0 = img.height(), x1 = -1, y1 = -1;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      int mx = 0;
      for (int c = 0; c < img.channels(); ++c) mx = std::max<int>(mx, img.at(x, y, c));
      if (mx > dark_threshold) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
    }
  if (x1 < 0) return {img, {0, 0, img.width(), img.height()}, true};
  CropBox box{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
  return {img.region(box.left, box.top, box.width, box.height), box, false};
}

/// Mean luma.
[[nodiscard]] inline double brightness(const RasterImage& img) {
  const auto p = luma_plane(img);
  double sum = 0.0;
  for (double v : p.values) sum += v;
  return sum / static_cast<double>(p.values.size());
}

enum class Exposure { under, ok, over };

[[nodiscard]] inline std::string_view to_string(Exposure e) noexcept {
  switch (e) {
    case Exposure::under: return "under";
    case Exposure::ok: return "ok";
    case Exposure::over: return "over";
  }
  return "?";
}

struct ExposureThresholds {
  double under = 50.0;
  double over = 180.0;
};

[[nodiscard]] inline Exposure exposure_verdict(double b, ExposureThresholds t = {}) {
  if (!(t.under < t.over)) throw InvalidArgument("exposure thresholds require under < over");
  if (b < t.under) return Exposure::under;
  if (b > t.over) return Exposure::over;
  return Exposure::ok;
}

struct VesselnessParams {
  std::vector<double> scales{1.0, 2.0, 3.0, 4.0};
  int tophat_radius = 8;
  double beta = 0.5;
};

/// Per-pixel multiscale Frangi response (bright tubes) of the white top-hat
/// of the green channel. Values lie in [0, 1].
[[nodiscard]] inline Plane vesselness_map(const RasterImage& img, const VesselnessParams& params = {}) {
  if (params.scales.empty()) throw InvalidArgument("vesselness needs at least one scale");
  const double max_sigma = *std::max_element(params.scales.begin(), params.scales.end());
  const int min_extent = static_cast<int>(std::ceil(2.0 * max_sigma + 1.0));
  if (img.width() < min_extent || img.height() < min_extent)
    throw InvalidArgument("image smaller than 2*max(sigma)+1 = " + std::to_string(min_extent) + " px");

  const auto green = to_plane(channel(img, img.channels() == 3 ? 1 : 0));
  const auto detail = white_tophat(green, params.tophat_radius);
  Plane best(img.width(), img.height(), 0.0);
  const double two_beta2 = 2.0 * params.beta * params.beta;

  for (double sigma : params.scales) {
    const auto g0 = gaussian_kernel(sigma, 0);
    const auto g1 = gaussian_kernel(sigma, 1);
    const auto g2 = gaussian_kernel(sigma, 2);
    auto hxx = convolve_separable(detail, g2, g0);
    auto hyy = convolve_separable(detail, g0, g2);
    auto hxy = convolve_separable(detail, g1, g1);
    const double s2 = sigma * sigma;

    const std::size_t n = detail.values.size();
    std::vector<double> l1(n), l2(n), frob(n);
    double max_frob = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double a = s2 * hxx.values[i], d = s2 * hyy.values[i], b = s2 * hxy.values[i];
      const double tmp = std::sqrt((a - d) * (a - d) + 4.0 * b * b);
      double mu1 = 0.5 * (a + d + tmp), mu2 = 0.5 * (a + d - tmp);
      if (std::fabs(mu1) > std::fabs(mu2)) std::swap(mu1, mu2);
      l1[i] = mu1;
      l2[i] = mu2;
      frob[i] = std::sqrt(a * a + d * d + 2.0 * b * b);
      max_frob = std::max(max_frob, frob[i]);
    }
    const double c = 0.5 * max_frob;
    if (c <= 1e-12) continue;
    const double two_c2 = 2.0 * c * c;
    for (std::size_t i = 0; i < n; ++i) {
      if (l2[i] >= 0.0) continue;
      const double rb = l1[i] / l2[i];
      const double v = std::exp(-rb * rb / two_beta2) * (1.0 - std::exp(-frob[i] * frob[i] / two_c2));
      best.values[i] = std::max(best.values[i], v);
    }
  }
  return best;
}

/// Mean of vesselness_map over the (already cropped) image.
[[nodiscard]] inline double vesselness(const RasterImage& img, const VesselnessParams& params = {}) {
  const auto m = vesselness_map(img, params);
  double sum = 0.0;
  for (double v : m.values) sum += v;
  return sum / static_cast<double>(m.values.size());
}

/// Mean Sobel gradient magnitude of the luma over interior pixels.
[[nodiscard]] inline double sharpness(const RasterImage& img) {
  if (img.width() < 3 || img.height() < 3) throw InvalidArgument("sharpness needs at least 3x3 pixels");
  const auto mag = sobel_magnitude(luma_plane(img));
  double sum = 0.0;
  for (int y = 1; y + 1 < img.height(); ++y)
    for (int x = 1; x + 1 < img.width(); ++x) sum += mag.at(x, y);
  return sum / (static_cast<double>(img.width() - 2) * static_cast<double>(img.height() - 2));
}

[[nodiscard]] inline std::array<std::size_t, 256> histogram(const RasterImage& gray) {
  std::array<std::size_t, 256> h{};
  for (auto v : gray.data()) ++h[v];
  return h;
}

/// Shannon entropy in bits of the 256-bin gray histogram.
[[nodiscard]] inline double entropy(const RasterImage& img) {
  const auto h = histogram(to_gray(img));
  const auto n = static_cast<double>(img.pixel_count());
  double e = 0.0;
  for (auto c : h) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    e -= p * std::log2(p);
  }
  return e;
}

/// Max luma over mean luma; empty for an all-zero image.
[[nodiscard]] inline std::optional<double> peak_to_mean(const RasterImage& img) {
  const auto p = luma_plane(img);
  double sum = 0.0, mx = 0.0;
  for (double v : p.values) {
    sum += v;
    mx = std::max(mx, v);
  }
  if (sum <= 0.0) return std::nullopt;
  return mx / (sum / static_cast<double>(p.values.size()));
}

struct VlmScores {
  double blurry = 0.0;
  double artifacts = 0.0;
  friend bool operator==(const VlmScores&, const VlmScores&) = default;
};

using VlmScoreMap = std::map<std::string, VlmScores>;

[[nodiscard]] inline VlmScoreMap parse_vlm_scores(std::string_view text) {
  VlmScoreMap out;
  if (trim(text).empty()) return out;
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed VLM score sidecar: ") + e.what());
  }
  if (!doc.is_object()) throw InvalidArgument("VLM score sidecar must be a JSON object");
  for (const auto& [id, entry] : doc.items()) {
    VlmScores s;
    for (auto [name, slot] : {std::pair{"blurry", &s.blurry}, std::pair{"artifacts", &s.artifacts}}) {
      if (!entry.is_object() || !entry.contains(name) || !entry[name].is_number())
        throw InvalidArgument("VLM scores for '" + id + "' missing field '" + name + "'");
      const double v = entry[name].get<double>();
      if (!(v >= 0.0 && v <= 1.0))
        throw InvalidArgument("VLM score " + std::string(name) + " for '" + id + "' outside [0,1]: " + format_double(v));
      *slot = v;
    }
    out.emplace(id, s);
  }
  return out;
}

[[nodiscard]] inline VlmScoreMap ingest_vlm_scores(const std::filesystem::path& sidecar) {
  const auto bytes = read_file_bytes(sidecar);
  return parse_vlm_scores(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

inline constexpr std::array<std::string_view, 7> kFeatureNames = {
    "brightness", "vesselness", "sharpness", "entropy", "peak_to_mean", "blurry", "artifacts"};

struct QualityFeatures {
  double brightness = 0.0;
  double vesselness = 0.0;
  double sharpness = 0.0;
  double entropy = 0.0;
  double peak_to_mean = 0.0;  ///< 0 when peak_to_mean_degenerate
  std::optional<double> blurry;
  std::optional<double> artifacts;
  bool crop_degenerate = false;
  bool peak_to_mean_degenerate = false;
  CropBox crop;

  [[nodiscard]] bool has_vlm() const noexcept { return blurry.has_value() && artifacts.has_value(); }

  /// Values in kFeatureNames order; VLM fields only when present.
  [[nodiscard]] std::vector<double> to_vector() const {
    std::vector<double> v{brightness, vesselness, sharpness, entropy, peak_to_mean};
    if (has_vlm()) {
      v.push_back(*blurry);
      v.push_back(*artifacts);
    }
    return v;
  }
};

struct FeatureConfig {
  int dark_threshold = 15;
  VesselnessParams vessel;
};

/// Crops once and computes every descriptor on the crop.
[[nodiscard]] inline QualityFeatures extract_features(const RasterImage& img, const FeatureConfig& cfg = {},
                                                      std::optional<VlmScores> scores = std::nullopt) {
  QualityFeatures f;
  auto crop = crop_black_margins(img, cfg.dark_threshold);
  f.crop = crop.box;
  f.crop_degenerate = crop.degenerate;
  const RasterImage& roi = crop.image;

  auto guarded = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const Error& e) {
      throw InvalidArgument(std::string("feature '") + name + "': " + e.what());
    }
  };
  f.brightness = guarded("brightness", [&] { return brightness(roi); });
  f.vesselness = guarded("vesselness", [&] { return vesselness(roi, cfg.vessel); });
  f.sharpness = guarded("sharpness", [&] { return sharpness(roi); });
  f.entropy = guarded("entropy", [&] { return entropy(roi); });
  if (auto ptm = peak_to_mean(roi)) {
    f.peak_to_mean = *ptm;
  } else {
    f.peak_to_mean_degenerate = true;
  }
  if (scores) {
    f.blurry = scores->blurry;
    f.artifacts = scores->artifacts;
  }
  return f;
}

enum class QualityLabel { good, bad };

[[nodiscard]] inline std::string_view to_string(QualityLabel q) noexcept {
  return q == QualityLabel::good ? "good" : "bad";
}

[[nodiscard]] inline QualityLabel parse_quality(std::string_view s) {
  if (s == "good") return QualityLabel::good;
  if (s == "bad") return QualityLabel::bad;
  throw InvalidArgument("quality label must be 'good' or 'bad', got '" + std::string(s) + "'");
}

struct FeatureRow {
  std::string image_id;
  QualityFeatures features;
  std::optional<QualityLabel> label;
};

inline constexpr std::string_view kFeatureCsvHeader =
    "image_id,brightness,vesselness,sharpness,entropy,peak_to_mean,blurry,artifacts,label";

[[nodiscard]] inline std::string write_features_csv(const std::vector<FeatureRow>& rows) {
  std::string out(kFeatureCsvHeader);
  out += '\n';
  for (const auto& r : rows) {
    const auto& f = r.features;
    out += r.image_id;
    for (double v : {f.brightness, f.vesselness, f.sharpness, f.entropy}) out += ',' + format_double(v);
    out += ',';
    if (!f.peak_to_mean_degenerate) out += format_double(f.peak_to_mean);
    out += ',';
    if (f.blurry) out += format_double(*f.blurry);
    out += ',';
    if (f.artifacts) out += format_double(*f.artifacts);
    out += ',';
    if (r.label) out += to_string(*r.label);
    out += '\n';
  }
  return out;
}

[[nodiscard]] inline std::vector<FeatureRow> parse_features_csv(std::string_view text) {
  std::vector<FeatureRow> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || trim(line) != kFeatureCsvHeader)
    throw SchemaMismatch("features.csv header must be: " + std::string(kFeatureCsvHeader));
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split(trim(line), ',');
    if (cells.size() != 9) throw SchemaMismatch("features.csv line " + std::to_string(lineno) + ": expected 9 cells");
    FeatureRow r;
    r.image_id = cells[0];
    auto& f = r.features;
    try {
      f.brightness = parse_double(cells[1]);
      f.vesselness = parse_double(cells[2]);
      f.sharpness = parse_double(cells[3]);
      f.entropy = parse_double(cells[4]);
      if (cells[5].empty()) {
        f.peak_to_mean_degenerate = true;
      } else {
        f.peak_to_mean = parse_double(cells[5]);
      }
      if (!cells[6].empty()) f.blurry = parse_double(cells[6]);
      if (!cells[7].empty()) f.artifacts = parse_double(cells[7]);
      if (!cells[8].empty()) r.label = parse_quality(cells[8]);
    } catch (const Error& e) {
      throw SchemaMismatch("features.csv line " + std::to_string(lineno) + ": " + e.what());
    }
    if (f.blurry.has_value() != f.artifacts.has_value())
      throw SchemaMismatch("features.csv line " + std::to_string(lineno) + ": blurry/artifacts must appear together");
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace retina
