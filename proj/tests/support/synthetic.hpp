#pragma once

// Synthetic fundus photographs, degraded copies, random masks and small
// on-disk datasets for tests.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include <nlohmann/json.hpp>

#include "retina/filters.hpp"
#include "retina/image.hpp"
#include "retina/io.hpp"
#include "retina/random.hpp"

namespace synth {

namespace fs = std::filesystem;

struct FundusParams {
  int size = 96;
  double vessel_delta = -45.0;  ///< added to the green/red channels along vessels
  int vessels = 6;
  double illumination = 1.0;
  double noise = 2.0;
};

/// Orange retinal disc on black, with a bright optic disc and branching
/// vessels drawn as thick sinusoidal arcs.
inline retina::RasterImage fundus(const FundusParams& p, std::uint64_t seed) {
  retina::Rng rng(seed);
  const int n = p.size;
  const double cx = n / 2.0, cy = n / 2.0, radius = 0.45 * n;
  std::vector<double> r(static_cast<std::size_t>(n * n)), g(r.size()), b(r.size());
  const double odx = cx + (retina::uniform01(rng) - 0.5) * 0.4 * n;
  const double ody = cy + (retina::uniform01(rng) - 0.5) * 0.2 * n;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double d = std::hypot(x - cx, y - cy) / radius;
      if (d > 1.0) continue;
      const double fall = 1.0 - 0.35 * d * d;
      const double od = std::exp(-(std::pow(x - odx, 2) + std::pow(y - ody, 2)) / (2 * std::pow(0.06 * n, 2)));
      const auto i = static_cast<std::size_t>(y * n + x);
      r[i] = (175 * fall + 60 * od) * p.illumination;
      g[i] = (85 * fall + 110 * od) * p.illumination;
      b[i] = (30 * fall + 60 * od) * p.illumination;
    }
  for (int v = 0; v < p.vessels; ++v) {
    const double angle = 2 * M_PI * (v + retina::uniform01(rng) * 0.5) / p.vessels;
    const double amp = 0.05 * n * (0.5 + retina::uniform01(rng));
    const double freq = 1.0 + 2.0 * retina::uniform01(rng);
    const double width = 1.0 + 1.2 * retina::uniform01(rng);
    for (double t = 0.0; t <= 1.0; t += 0.5 / n) {
      const double along = t * radius;
      const double across = amp * std::sin(freq * M_PI * t);
      const double px = odx + along * std::cos(angle) - across * std::sin(angle);
      const double py = ody + along * std::sin(angle) + across * std::cos(angle);
      for (int dy = -3; dy <= 3; ++dy)
        for (int dx = -3; dx <= 3; ++dx) {
          const int x = static_cast<int>(std::lround(px)) + dx, y = static_cast<int>(std::lround(py)) + dy;
          if (x < 0 || y < 0 || x >= n || y >= n) continue;
          if (std::hypot(x - px, y - py) > width) continue;
          const auto i = static_cast<std::size_t>(y * n + x);
          if (r[i] == 0.0 && g[i] == 0.0) continue;
          r[i] = std::max(20.0, r[i] + p.vessel_delta * 0.6);
          g[i] = std::max(5.0, g[i] + p.vessel_delta);
        }
    }
  }
  retina::RasterImage img(n, n, 3);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const auto i = static_cast<std::size_t>(y * n + x);
      if (r[i] == 0.0 && g[i] == 0.0 && b[i] == 0.0) continue;
      img.at(x, y, 0) = retina::clamp_u8(r[i] + p.noise * retina::normal01(rng));
      img.at(x, y, 1) = retina::clamp_u8(g[i] + p.noise * retina::normal01(rng));
      img.at(x, y, 2) = retina::clamp_u8(b[i] + p.noise * retina::normal01(rng));
    }
  return img;
}

/// Blurred and darkened copy.
inline retina::RasterImage degrade(const retina::RasterImage& img, double sigma, double dark_factor) {
  auto out = retina::gaussian_blur(img, sigma);
  for (auto& v : out.data()) v = retina::clamp_u8(v * dark_factor);
  return out;
}

inline retina::BinaryMask random_mask(int w, int h, double density, retina::Rng& rng) {
  retina::BinaryMask m(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (retina::uniform01(rng) < density) m.set(x, y);
  return m;
}

/// Random union of rectangles, blob-like rather than salt-and-pepper.
inline retina::BinaryMask random_blobs(int w, int h, int count, retina::Rng& rng) {
  retina::BinaryMask m(w, h);
  for (int k = 0; k < count; ++k) {
    const int bw = 1 + static_cast<int>(retina::uniform_index(rng, static_cast<std::uint64_t>(std::max(1, w / 3))));
    const int bh = 1 + static_cast<int>(retina::uniform_index(rng, static_cast<std::uint64_t>(std::max(1, h / 3))));
    const int x0 = static_cast<int>(retina::uniform_index(rng, static_cast<std::uint64_t>(w)));
    const int y0 = static_cast<int>(retina::uniform_index(rng, static_cast<std::uint64_t>(h)));
    for (int y = y0; y < std::min(h, y0 + bh); ++y)
      for (int x = x0; x < std::min(w, x0 + bw); ++x) m.set(x, y);
  }
  return m;
}

inline retina::RasterImage random_image(int w, int h, int channels, retina::Rng& rng) {
  retina::RasterImage img(w, h, channels);
  for (auto& v : img.data()) v = static_cast<std::uint8_t>(retina::uniform_index(rng, 256));
  return img;
}

inline retina::BinaryMask rect_mask(int w, int h, int x0, int y0, int rw, int rh) {
  retina::BinaryMask m(w, h);
  for (int y = y0; y < y0 + rh; ++y)
    for (int x = x0; x < x0 + rw; ++x) m.set(x, y);
  return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "retina") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  [[nodiscard]] const fs::path& path() const noexcept { return path_; }
  [[nodiscard]] fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  fs::create_directories(p.parent_path());
  retina::write_text_atomic(p, j.dump(2));
}

/// Expert/resident fixture on a 16x16 image: overlapping but different EX
/// and HA masks.
struct PairFixture {
  retina::BinaryMask expert_ex, resident_ex, expert_ha, resident_ha;
  double expert_conf = 0.9, resident_conf = 0.7;
  double expert_expertise = 1.0, resident_expertise = 0.6;
};

inline PairFixture expert_resident_fixture() {
  PairFixture f;
  f.expert_ex = rect_mask(16, 16, 2, 2, 6, 5);
  f.resident_ex = rect_mask(16, 16, 3, 3, 6, 5);
  f.expert_ha = rect_mask(16, 16, 9, 9, 4, 4);
  f.resident_ha = rect_mask(16, 16, 10, 9, 4, 5);
  return f;
}

/// Writes a small dataset: `good` sharp fundus images and `bad` degraded
/// ones, each with two annotators agreeing on an EX mask and an EX/HA
/// prediction. Returns the manifest path.
inline fs::path write_dataset(const fs::path& dir, int good, int bad, std::uint64_t seed, int size = 64) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  auto images = nlohmann::json::array();
  retina::Rng rng(seed);
  for (int k = 0; k < good + bad; ++k) {
    const bool is_good = k < good;
    const std::string id = (is_good ? "good_" : "bad_") + std::to_string(k);
    FundusParams fp;
    fp.size = size;
    auto img = fundus(fp, retina::splitmix64(seed + static_cast<std::uint64_t>(k)));
    if (!is_good) img = degrade(img, 2.5 + retina::uniform01(rng), 0.45 + 0.15 * retina::uniform01(rng));
    retina::save_image(dir / "images" / (id + ".png"), img);
    const auto ex = rect_mask(size, size, size / 3, size / 3, size / 6, size / 6);
    retina::save_mask(dir / "masks" / (id + ".ann_a.EX.png"), ex);
    retina::save_mask(dir / "masks" / (id + ".ann_b.EX.png"), ex);
    retina::save_mask(dir / "masks" / (id + ".pred.EX.png"), rect_mask(size, size, size / 4, size / 4, size / 3, size / 3));
    retina::save_mask(dir / "masks" / (id + ".pred.HA.png"), random_blobs(size, size, 4, rng));
    images.push_back({{"id", id},
                      {"path", "images/" + id + ".png"},
                      {"quality", is_good ? "good" : "bad"},
                      {"vlm_scores", nullptr},
                      {"annotations",
                       {{{"path", "masks/" + id + ".ann_a.EX.png"}, {"annotator", "ann_a"}, {"lesion", "EX"},
                         {"confidence", 0.9}, {"expertise", 1.0}},
                        {{"path", "masks/" + id + ".ann_b.EX.png"}, {"annotator", "ann_b"}, {"lesion", "EX"},
                         {"confidence", 0.8}, {"expertise", 0.6}}}},
                      {"predictions",
                       {{"EX", "masks/" + id + ".pred.EX.png"}, {"HA", "masks/" + id + ".pred.HA.png"}}}});
  }
  const auto manifest = dir / "manifest.json";
  write_json(manifest, {{"images", images}});
  return manifest;
}

}  // namespace synth
