#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <limits>

#include "retina/enhance.hpp"
#include "retina/features.hpp"
#include "support/synthetic.hpp"

using namespace retina;

namespace {

RasterImage ramp(int w, int h) {
  RasterImage img(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.at(x, y) = static_cast<std::uint8_t>((x * 255) / (w - 1));
  return img;
}

int max_abs_diff(const RasterImage& a, const RasterImage& b) {
  int worst = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i)
    worst = std::max(worst, std::abs(static_cast<int>(a.data()[i]) - static_cast<int>(b.data()[i])));
  return worst;
}

}  // namespace

TEST(Gamma, OneIsIdentity) {
  Rng rng(1);
  const auto img = synth::random_image(17, 9, 3, rng);
  EXPECT_EQ(gamma_correct(img, 1.0), img);
}

TEST(Gamma, HalfDoublesQuarterLevel) {
  RasterImage img(1, 1, 1, 64);
  EXPECT_EQ(gamma_correct(img, 0.5).at(0, 0), 128);
}

TEST(Gamma, FixedPointsAndMonotone) {
  for (double g : {0.1, 0.5, 0.8, 1.0, 1.7, 4.0}) {
    const auto t = gamma_table(g);
    EXPECT_EQ(t[0], 0);
    EXPECT_EQ(t[255], 255);
    for (std::size_t v = 1; v < 256; ++v) EXPECT_LE(t[v - 1], t[v]);
    for (std::size_t v = 0; v < 256; ++v)
      EXPECT_EQ(t[v], static_cast<int>(std::lround(255.0 * std::pow(static_cast<double>(v) / 255.0, g))));
  }
}

TEST(Gamma, BelowOneBrightens) {
  const auto t = gamma_table(0.8);
  for (std::size_t v = 0; v < 256; ++v) EXPECT_GE(t[v], v);
}

TEST(Gamma, RejectsNonPositive) {
  RasterImage img(2, 2, 1);
  EXPECT_THROW((void)gamma_correct(img, 0.0), InvalidArgument);
  EXPECT_THROW((void)gamma_correct(img, -1.0), InvalidArgument);
}

TEST(Clahe, FlattenedHistogramOnRampIsIdentity) {
  const auto img = ramp(256, 64);
  for (auto [c, r] : {std::pair{1, 1}, {8, 8}, {4, 2}}) {
    const auto out = clahe(img, {1.0, c, r});
    EXPECT_LE(max_abs_diff(out, img), 1) << c << "x" << r;
  }
}

TEST(Clahe, UnclippedConstantTileMapsToZero) {
  RasterImage img(16, 16, 1, 173);
  const ClaheParams p{std::numeric_limits<double>::infinity(), 2, 2};
  const ClaheMapping m(img, p);
  for (int t = 0; t < 4; ++t) EXPECT_EQ(m.tile(t % 2, t / 2)[173], 0);
  const auto out = clahe(img, p);
  for (auto v : out.data()) EXPECT_EQ(v, 0);
}

TEST(Clahe, ClippedConstantTileMatchesFormula) {
  // 64-pixel tiles, limit 3 * 64 / 256 = 0.75, excess spread over 256 bins.
  RasterImage img(16, 16, 1, 173);
  const ClaheMapping m(img, {3.0, 2, 2});
  const double e = (64.0 - 0.75) / 256.0;
  const auto expected = static_cast<int>(std::lround(255.0 * (174.0 * e + 0.75 - e) / (64.0 - e)));
  EXPECT_EQ(expected, 174);
  for (int t = 0; t < 4; ++t) {
    EXPECT_EQ(m.tile(t % 2, t / 2)[173], expected);
    EXPECT_EQ(m.tile(t % 2, t / 2)[0], 0);
  }
}

TEST(Clahe, TileMappingsNonDecreasingOnRandomImages) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const int w = 16 + static_cast<int>(uniform_index(rng, 50)), h = 16 + static_cast<int>(uniform_index(rng, 50));
    const auto img = synth::random_image(w, h, 1, rng);
    const double clip = 1.0 + 5.0 * uniform01(rng);
    const ClaheMapping m(img, {clip, 4, 3});
    for (int ty = 0; ty < m.rows(); ++ty)
      for (int tx = 0; tx < m.cols(); ++tx) {
        const auto& t = m.tile(tx, ty);
        for (std::size_t v = 1; v < 256; ++v) EXPECT_LE(t[v - 1], t[v]);
      }
  }
}

TEST(Clahe, ClipHistogramConservesMass) {
  std::array<double, 256> h{};
  h[10] = 900;
  h[11] = 100;
  h[200] = 24;
  const auto c = clip_histogram(h, 50.0);
  double total = 0;
  for (double v : c) {
    EXPECT_LE(v, 50.0 + 1e-9);
    total += v;
  }
  EXPECT_NEAR(total, 1024.0, 1e-9);
}

TEST(Clahe, UnclippedSingleTileIsGlobalEqualization) {
  RasterImage img(4, 4, 1);
  const std::uint8_t vals[16] = {10, 10, 10, 10, 20, 20, 20, 20, 30, 30, 30, 30, 40, 40, 40, 40};
  for (int i = 0; i < 16; ++i) img.data()[static_cast<std::size_t>(i)] = vals[i];
  const auto out = equalize_histogram(img);
  // cdf = 4, 8, 12, 16 with cdf_min 4: m = round(255 * (cdf - 4) / 12)
  EXPECT_EQ(out.at(0, 0), 0);
  EXPECT_EQ(out.at(0, 1), 85);
  EXPECT_EQ(out.at(0, 2), 170);
  EXPECT_EQ(out.at(0, 3), 255);
}

TEST(Clahe, RejectsBadInput) {
  EXPECT_THROW((void)clahe(RasterImage(4, 4, 3), {}), InvalidArgument);
  EXPECT_THROW((void)clahe(RasterImage(4, 4, 1), {0.5, 1, 1}), InvalidArgument);
  EXPECT_THROW((void)clahe(RasterImage(4, 4, 1), {2.0, 8, 8}), InvalidArgument);
  EXPECT_THROW((void)clahe(RasterImage(6, 6, 1), {2.0, 4, 4}), InvalidArgument);
  EXPECT_THROW((void)clahe(RasterImage(4, 4, 1), {2.0, 0, 1}), InvalidArgument);
}

TEST(Enhance, AllBlackStaysBlack) {
  const RasterImage img(32, 24, 3);
  const auto out = enhance(img);
  EXPECT_EQ(out.width(), 32);
  EXPECT_EQ(out.height(), 24);
  for (auto v : out.data()) EXPECT_EQ(v, 0);
}

TEST(Enhance, FlatClaheAndUnitGammaReproduceCrop) {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    auto img = synth::random_image(40, 32, 3, rng);
    for (auto& v : img.data()) v = static_cast<std::uint8_t>(16 + v * 239 / 255);
    EnhancementParams p;
    p.clahe_clip = 1.0;
    p.gamma = 1.0;
    const auto out = enhance(img, p);
    ASSERT_EQ(out.width(), img.width());
    EXPECT_LE(max_abs_diff(out, img), 1);
  }
}

TEST(Enhance, RaisesSharpnessOfLowContrastFundus) {
  synth::FundusParams fp;
  fp.vessel_delta = 10.0;
  fp.illumination = 0.6;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto img = synth::fundus(fp, seed);
    const auto cropped = crop_black_margins(img).image;
    const auto out = enhance(img);
    EXPECT_GT(sharpness(out), sharpness(cropped)) << "seed " << seed;
  }
}

TEST(Enhance, DimensionsMatchCropAndAreStable) {
  const auto img = synth::fundus({}, 3);
  const auto box = crop_black_margins(img).box;
  const auto once = enhance(img);
  EXPECT_EQ(once.width(), box.width);
  EXPECT_EQ(once.height(), box.height);
  const auto twice = enhance(once);
  EXPECT_EQ(twice.width(), once.width());
  EXPECT_EQ(twice.height(), once.height());
  EXPECT_EQ(enhance(img), once);
}

TEST(Enhance, GrayInputSkipsColourConversion) {
  const auto gray = to_gray(synth::fundus({}, 2));
  const auto out = enhance(gray);
  EXPECT_EQ(out.channels(), 1);
}

TEST(Enhance, ValidatesParams) {
  const RasterImage img(16, 16, 3, 100);
  EXPECT_THROW((void)enhance(img, {0.9, 8, 8, 0.8, 15}), InvalidArgument);
  EXPECT_THROW((void)enhance(img, {3.0, 0, 8, 0.8, 15}), InvalidArgument);
  EXPECT_THROW((void)enhance(img, {3.0, 8, 8, 0.0, 15}), InvalidArgument);
}
