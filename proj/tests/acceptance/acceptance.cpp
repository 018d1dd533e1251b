// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "retina/agreement.hpp"
#include "retina/classifier.hpp"
#include "retina/cli.hpp"
#include "retina/enhance.hpp"
#include "retina/features.hpp"
#include "retina/pipeline.hpp"
#include "retina/postprocess.hpp"
#include "retina/shapley.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using namespace retina;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;

void criterion(const std::string& name, const std::function<Outcome()>& body) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS " : "FAIL ") << name << "  " << o.detail << std::endl;
}

std::string fmt(double v, int digits = 6) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

Annotation ann(std::string who, LesionType t, BinaryMask m, double conf = 1.0, double exp = 1.0) {
  return {std::move(who), "img", t, std::move(m), conf, exp};
}

// ---------------------------------------------------------------------------

Outcome kappa_oracle() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const int w = 1 + static_cast<int>(uniform_index(rng, 64)), h = 1 + static_cast<int>(uniform_index(rng, 64));
    const auto mi = synth::random_mask(w, h, uniform01(rng), rng);
    const auto mj = synth::random_mask(w, h, uniform01(rng), rng);
    const double pi = uniform01(rng), pj = uniform01(rng);
    const auto got = weighted_confusion(mi, pi, mj, pj);
    const auto want = oracle::pixel_sums(mi, pi, mj, pj);
    const auto plain = confusion(mi, mj);
    const auto plain_want = oracle::pixel_sums(mi, 1.0, mj, 1.0);
    for (double d : {got.a - want.a, got.b - want.b, got.c - want.c, got.d - want.d,
                     cohen_kappa(got).value - oracle::kappa(want), cohen_kappa(plain).value - oracle::kappa(plain_want),
                     dice(got) - oracle::dice(want), dice(plain) - oracle::dice(plain_want)})
      worst = std::max(worst, std::fabs(d));
  }
  const double k1 = cohen_kappa({1, 1, 1, 6}).value;
  const double k2 = cohen_kappa({0.48, 0.8, 0.6, 6}).value;
  const double secs = seconds_since(t0);
  const bool ok = worst <= 1e-9 && std::fabs(k1 - 10.0 / 28.0) <= 1e-4 && std::fabs(k2 - 0.3032) <= 1e-4 && secs < 10;
  return {ok, "max|diff|=" + fmt(worst) + " K(1,1,1,6)=" + fmt(k1) + " K(.48,.8,.6,6)=" + fmt(k2) +
                  " time=" + fmt(secs, 3) + "s"};
}

Outcome reduction_law() {
  Rng rng(7);
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int w = 1 + static_cast<int>(uniform_index(rng, 64)), h = 1 + static_cast<int>(uniform_index(rng, 64));
    const auto a = ann("a", LesionType::EX, synth::random_mask(w, h, uniform01(rng), rng));
    const auto b = ann("b", LesionType::EX, synth::random_mask(w, h, uniform01(rng), rng));
    const auto m = pair_metrics(a, b);
    if (m.kappa != m.w_kappa || m.dsc != m.w_dsc) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + "/100 instances differ"};
}

Outcome weighted_dsc_strict() {
  Rng rng(8);
  int checked = 0, violations = 0, skipped_disjoint = 0;
  while (checked < 100) {
    const int w = 2 + static_cast<int>(uniform_index(rng, 63)), h = 2 + static_cast<int>(uniform_index(rng, 63));
    const auto a = ann("a", LesionType::HA, synth::random_blobs(w, h, 4, rng), 0.05 + 0.9 * uniform01(rng),
                       0.05 + 0.9 * uniform01(rng));
    const auto b = ann("b", LesionType::HA, synth::random_blobs(w, h, 4, rng), 0.05 + 0.9 * uniform01(rng),
                       0.05 + 0.9 * uniform01(rng));
    const auto s = confusion(a.mask, b.mask);
    if (s.b + s.c == 0) continue;
    // With no overlap both scores are exactly 0, so strictness needs A > 0.
    if (s.a == 0) {
      ++skipped_disjoint;
      continue;
    }
    if (!(weighted_dsc(a, b) < dsc(a.mask, b.mask))) ++violations;
    ++checked;
  }
  return {violations == 0, std::to_string(violations) + "/100 violations (" + std::to_string(skipped_disjoint) +
                               " overlap-free draws set aside)"};
}

Outcome protocol_end_to_end() {
  const auto base = synth::rect_mask(32, 32, 6, 6, 12, 10);
  auto second = base;
  second.set(18, 6);
  second.set(18, 7);
  const auto adversary = synth::rect_mask(32, 32, 22, 20, 8, 8);
  auto ha1 = synth::rect_mask(32, 32, 2, 24, 6, 5), ha2 = ha1;
  ha2.set(8, 24);
  const std::vector<Annotation> three{ann("alice", LesionType::EX, base, 0.9, 1.0),
                                      ann("bob", LesionType::EX, second, 0.8, 0.6),
                                      ann("mallory", LesionType::EX, adversary, 0.9, 1.0),
                                      ann("alice", LesionType::HA, ha1, 0.9, 1.0),
                                      ann("bob", LesionType::HA, ha2, 0.8, 0.6),
                                      ann("mallory", LesionType::HA, BinaryMask(32, 32), 0.9, 1.0)};
  const auto r3 = report("three", three);
  const std::vector<Annotation> two{ann("a", LesionType::EX, synth::rect_mask(32, 32, 0, 0, 8, 8), 0.9, 1.0),
                                    ann("b", LesionType::EX, synth::rect_mask(32, 32, 20, 20, 8, 8), 0.9, 1.0)};
  const auto r2 = report("two", two);
  const bool ok = r3.discarded_annotators == std::vector<std::string>{"mallory"} && r3.verdict == Verdict::keep &&
                  r2.verdict == Verdict::discard;
  std::string discarded;
  for (const auto& d : r3.discarded_annotators) discarded += (discarded.empty() ? "" : ",") + d;
  return {ok, "3-annotator: discarded=[" + discarded + "] verdict=" + std::string(to_string(r3.verdict)) +
                  " score=" + fmt(r3.score.value_or(-9), 4) + "; 2-annotator disjoint: verdict=" +
                  std::string(to_string(r2.verdict)) + " score=" + fmt(r2.score.value_or(-9), 4)};
}

Outcome feature_analytics() {
  bool ok = true;
  std::string detail;
  for (int level : {16, 77, 128, 255}) {
    const auto f = extract_features(RasterImage(40, 30, 3, static_cast<std::uint8_t>(level)));
    const std::vector<double> want{static_cast<double>(level), 0, 0, 0, 1};
    if (f.to_vector() != want) {
      ok = false;
      detail += "constant " + std::to_string(level) + " mismatch; ";
    }
  }
  RasterImage bimodal(16, 16, 1);
  for (int y = 8; y < 16; ++y)
    for (int x = 0; x < 16; ++x) bimodal.at(x, y) = 200;
  const double e2 = entropy(bimodal);
  RasterImage uniform(16, 16, 1);
  for (int i = 0; i < 256; ++i) uniform.at(i % 16, i / 16) = static_cast<std::uint8_t>(i);
  const double e8 = entropy(uniform);
  RasterImage spike(16, 16, 1);
  spike.at(5, 9) = 255;
  const double ptm = *peak_to_mean(spike);
  ok = ok && std::fabs(e2 - 1.0) <= 1e-9 && std::fabs(e8 - 8.0) <= 1e-9 && ptm == 256.0;
  return {ok, detail + "constant vectors checked for 4 levels; H(bimodal)=" + fmt(e2, 12) + " H(uniform)=" +
                  fmt(e8, 12) + " peak_to_mean(spike)=" + fmt(ptm, 12)};
}

// Shared by the classifier and Shapley criteria.
struct Corpus {
  std::vector<FeatureRow> rows;
  TrainOutcome outcome;
  double feature_secs = 0;
  double train_secs = 0;
};

Corpus& corpus() {
  static Corpus c = [] {
    Corpus c;
    auto t0 = Clock::now();
    Rng rng(99);
    for (int k = 0; k < 200; ++k) {
      synth::FundusParams fp;
      fp.size = 96;
      const auto sharp = synth::fundus(fp, splitmix64(1000 + static_cast<std::uint64_t>(k)));
      const auto blurred = synth::degrade(sharp, 2.0 + 1.5 * uniform01(rng), 0.45 + 0.25 * uniform01(rng));
      c.rows.push_back({"sharp_" + std::to_string(k), extract_features(sharp), QualityLabel::good});
      c.rows.push_back({"blurred_" + std::to_string(k), extract_features(blurred), QualityLabel::bad});
    }
    c.feature_secs = seconds_since(t0);
    t0 = Clock::now();
    c.outcome = run_training(c.rows, TrainConfig{}, 42, 1);
    c.train_secs = seconds_since(t0);
    return c;
  }();
  return c;
}

Outcome classifier_sanity() {
  auto& c = corpus();
  const auto& t = c.outcome.test;
  const double secs = c.feature_secs + c.train_secs;
  const bool ok = t.f2 >= 0.95 && t.accuracy >= 0.95 && secs < 120 && c.outcome.model.kind == ModelKind::forest;
  return {ok, "400 images, " + c.outcome.search.best.describe() + ", held-out n=" + std::to_string(t.total()) +
                  " F2=" + fmt(t.f2, 4) + " accuracy=" + fmt(t.accuracy, 4) + " time=" + fmt(secs, 3) + "s"};
}

Outcome shapley_axioms() {
  auto& c = corpus();
  const auto& model = c.outcome.model;
  FeatureMatrix X;
  for (const auto& r : c.rows) X.push_back(feature_vector(r, model.schema));
  const auto background = sample_background(X, 50, 3);
  double base = 0;
  for (const auto& b : background) base += model.predict_proba(b) / static_cast<double>(background.size());
  double worst_eff = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto& x = X[i * 4 % X.size()];
    const auto e = explain_shapley(model, x, background);
    const double sum = std::accumulate(e.phi.begin(), e.phi.end(), base);
    worst_eff = std::max(worst_eff, std::fabs(sum - model.predict_proba(x)));
  }
  // Model that ignores feature 2 entirely.
  const ModelFn dummy_f = [&](std::span<const double> x) {
    std::vector<double> y(x.begin(), x.end());
    y[2] = 0.0;
    return model.predict_proba(y);
  };
  double dummy_phi = 0;
  for (std::size_t i = 0; i < 20; ++i)
    dummy_phi = std::max(dummy_phi, std::fabs(explain_shapley(dummy_f, X[i * 7 % X.size()], background).phi[2]));
  const ModelFn sym = [](std::span<const double> x) { return std::tanh(x[0] + x[1]) + 0.3 * x[2]; };
  Rng rng(5);
  double sym_gap = 0;
  for (int i = 0; i < 20; ++i) {
    FeatureMatrix bg;
    const double b0 = normal01(rng), v0 = normal01(rng);
    for (int k = 0; k < 5; ++k) bg.push_back({b0, b0, normal01(rng)});
    const auto e = explain_shapley(sym, std::vector<double>{v0, v0, normal01(rng)}, bg);
    sym_gap = std::max(sym_gap, std::fabs(e.phi[0] - e.phi[1]));
  }
  const bool ok = worst_eff <= 1e-6 && dummy_phi == 0.0 && sym_gap <= 1e-9;
  return {ok, "efficiency max=" + fmt(worst_eff) + " over 100; dummy max|phi|=" + fmt(dummy_phi) +
                  "; symmetric max gap=" + fmt(sym_gap)};
}

Outcome enhancement() {
  RasterImage levels(256, 1, 1);
  for (int v = 0; v < 256; ++v) levels.at(v, 0) = static_cast<std::uint8_t>(v);
  const bool identity = gamma_correct(levels, 1.0) == levels;
  bool monotone = true;
  for (double g : {0.25, 0.5, 0.8, 1.0, 1.5, 2.2, 4.0}) {
    const auto t = gamma_table(g);
    for (std::size_t v = 1; v < 256; ++v) monotone = monotone && t[v - 1] <= t[v];
  }
  RasterImage ramp(256, 64, 1);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 256; ++x) ramp.at(x, y) = static_cast<std::uint8_t>(x);
  int ramp_err = 0;
  for (auto [c, r] : {std::pair{1, 1}, {8, 8}}) {
    const auto out = clahe(ramp, {1.0, c, r});
    for (std::size_t i = 0; i < out.data().size(); ++i)
      ramp_err = std::max(ramp_err, std::abs(static_cast<int>(out.data()[i]) - static_cast<int>(ramp.data()[i])));
  }
  synth::FundusParams fp;
  fp.vessel_delta = 10.0;
  fp.illumination = 0.6;
  int sharper = 0;
  double before = 0, after = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto img = synth::fundus(fp, seed);
    const double s0 = sharpness(crop_black_margins(img).image), s1 = sharpness(enhance(img));
    sharper += s1 > s0;
    before += s0 / 10;
    after += s1 / 10;
  }
  const bool ok = identity && monotone && ramp_err <= 1 && sharper == 10;
  return {ok, std::string("gamma=1 identity ") + (identity ? "yes" : "no") + "; monotone " + (monotone ? "yes" : "no") +
                  "; flattened CLAHE ramp max err=" + std::to_string(ramp_err) + "; sharpness rose on " +
                  std::to_string(sharper) + "/10 low-contrast fundi (mean " + fmt(before, 4) + " -> " + fmt(after, 4) +
                  ")"};
}

Outcome postprocessing() {
  Rng rng(11);
  const auto img = synth::fundus({64, -45, 6, 1, 2}, 4);
  int not_contractive = 0, not_idempotent = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto mask = trial % 2 ? synth::random_mask(64, 64, 0.3, rng) : synth::random_blobs(64, 64, 6, rng);
    for (auto lesion : kAllLesions)
      if (!postprocess(img, mask, lesion).subset_of(mask)) ++not_contractive;
    if (!morphological_open(mask, 1).subset_of(mask) || !remove_small_components(mask, 5).subset_of(mask))
      ++not_contractive;
    const int r = 1 + trial % 3;
    const auto once = morphological_open(mask, r);
    if (morphological_open(once, r) != once) ++not_idempotent;
  }
  int boundary_errors = 0;
  for (int min_area = 1; min_area <= 20; ++min_area) {
    BinaryMask below(32, 32), at(32, 32);
    for (int k = 0; k < min_area - 1; ++k) below.set(k % 8, k / 8);
    for (int k = 0; k < min_area; ++k) at.set(k % 8, k / 8);
    if (remove_small_components(below, min_area).count() != 0) ++boundary_errors;
    if (remove_small_components(at, min_area) != at) ++boundary_errors;
  }
  const bool ok = not_contractive == 0 && not_idempotent == 0 && boundary_errors == 0;
  return {ok, "contractivity violations=" + std::to_string(not_contractive) + " over 200 masks x 6 filters; "
              "opening idempotence violations=" + std::to_string(not_idempotent) + "; min_area boundary errors=" +
              std::to_string(boundary_errors) + " (min_area 1..20)"};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) {
      std::ifstream in(e.path(), std::ios::binary);
      std::ostringstream s;
      s << in.rdbuf();
      files[fs::relative(e.path(), root).generic_string()] = s.str();
    }
  return files;
}

Outcome cli_determinism() {
  synth::TempDir dir("retina-acceptance");
  const auto manifest = synth::write_dataset(dir.path(), 10, 10, 77);
  auto pipeline = [&](const std::string& name) {
    const auto out = (dir / name).string();
    for (std::string stage : {"features", "train", "assess", "enhance", "postprocess", "agree"}) {
      std::vector<std::string> args{"retina_curator", stage, "--out", out, "--seed", "17"};
      if (stage != "train") args.insert(args.end(), {"--manifest", manifest.string()});
      if (stage == "assess") args.push_back("--explain");
      std::vector<const char*> argv;
      for (const auto& a : args) argv.push_back(a.c_str());
      std::ostringstream o, e;
      if (run_cli(static_cast<int>(argv.size()), argv.data(), o, e) != kExitOk)
        throw Error(stage + " failed: " + e.str());
    }
    return tree(dir / name);
  };
  const auto a = pipeline("run1");
  const auto b = pipeline("run2");
  std::size_t differing = 0;
  for (const auto& [k, v] : a)
    if (!b.count(k) || b.at(k) != v) ++differing;
  const bool ok = a.size() == b.size() && differing == 0 && !a.empty();
  return {ok, std::to_string(a.size()) + " artifacts per run, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main() {
  criterion("kappa-oracle", kappa_oracle);
  criterion("reduction-law", reduction_law);
  criterion("weighted-dsc-strict", weighted_dsc_strict);
  criterion("protocol-end-to-end", protocol_end_to_end);
  criterion("feature-analytics", feature_analytics);
  criterion("classifier-sanity", classifier_sanity);
  criterion("shapley-axioms", shapley_axioms);
  criterion("enhancement", enhancement);
  criterion("post-processing", postprocessing);
  criterion("cli-determinism", cli_determinism);
  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
