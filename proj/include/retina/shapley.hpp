#pragma once

// Exact interventional Shapley attributions for small feature counts.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retina/classifier.hpp"
#include "retina/error.hpp"
#include "retina/format.hpp"
#include "retina/random.hpp"

namespace retina {

inline constexpr std::size_t kMaxShapleyFeatures = 12;

struct ShapExplanation {
  std::string instance_id;
  std::vector<std::string> schema;
  std::vector<double> features;
  double base_value = 0.0;  ///< mean model output over the background set
  std::vector<double> phi;  ///< one attribution per schema entry
  double prediction = 0.0;  ///< f(x)
};

using ModelFn = std::function<double(std::span<const double>)>;

/// v(S) = mean_b f(x_S, b_notS) for every coalition S, then
/// phi_k = sum_{S not containing k} |S|!(d-|S|-1)!/d! (v(S+k) - v(S)).
[[nodiscard]] inline ShapExplanation explain_shapley(const ModelFn& f, std::span<const double> instance,
                                                     const FeatureMatrix& background,
                                                     std::vector<std::string> schema = {}) {
  const std::size_t d = instance.size();
  if (d == 0) throw InvalidArgument("cannot explain an empty feature vector");
  if (d > kMaxShapleyFeatures)
    throw InvalidArgument("exact Shapley enumeration supports at most " + std::to_string(kMaxShapleyFeatures) +
                          " features; subsample features first");
  if (background.empty()) throw InvalidArgument("background set is empty");
  for (const auto& b : background)
    if (b.size() != d) throw SchemaMismatch("background row length differs from instance");

  const std::size_t coalitions = std::size_t{1} << d;
  std::vector<double> value(coalitions, 0.0);
  std::vector<double> hybrid(d);
  for (std::size_t s = 0; s < coalitions; ++s) {
    double sum = 0.0;
    for (const auto& b : background) {
      for (std::size_t k = 0; k < d; ++k) hybrid[k] = (s >> k) & 1u ? instance[k] : b[k];
      sum += f(hybrid);
    }
    value[s] = sum / static_cast<double>(background.size());
  }

  // weight[m] = m!(d-m-1)!/d!
  std::vector<double> weight(d);
  for (std::size_t m = 0; m < d; ++m) {
    double binom = 1.0;  // C(d-1, m)
    for (std::size_t i = 0; i < m; ++i)
      binom = binom * static_cast<double>(d - 1 - i) / static_cast<double>(i + 1);
    weight[m] = 1.0 / (static_cast<double>(d) * binom);
  }

  ShapExplanation ex;
  ex.schema = schema.empty() ? std::vector<std::string>(d) : std::move(schema);
  if (ex.schema.size() != d) throw SchemaMismatch("schema length differs from instance");
  ex.features.assign(instance.begin(), instance.end());
  ex.base_value = value[0];
  ex.prediction = value[coalitions - 1];
  ex.phi.assign(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const std::size_t bit = std::size_t{1} << k;
    double phi = 0.0;
    for (std::size_t s = 0; s < coalitions; ++s) {
      if (s & bit) continue;
      phi += weight[static_cast<std::size_t>(std::popcount(s))] * (value[s | bit] - value[s]);
    }
    ex.phi[k] = phi;
  }
  return ex;
}

[[nodiscard]] inline ShapExplanation explain_shapley(const ClassifierModel& model, std::span<const double> instance,
                                                     const FeatureMatrix& background) {
  model.check_schema(instance.size());
  return explain_shapley([&](std::span<const double> x) { return model.predict_proba(x); }, instance, background,
                         model.schema);
}

/// Up to `limit` rows drawn without replacement under a fixed seed.
[[nodiscard]] inline FeatureMatrix sample_background(const FeatureMatrix& rows, std::size_t limit = 100,
                                                     std::uint64_t seed = 0) {
  if (rows.size() <= limit) return rows;
  std::vector<std::size_t> idx(rows.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  shuffle(idx, rng);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  FeatureMatrix out;
  for (auto i : idx) out.push_back(rows[i]);
  return out;
}

struct FeatureImportance {
  std::string feature;
  double mean_abs_phi = 0.0;
};

struct ExplanationSummary {
  std::vector<FeatureImportance> ranking;  ///< by mean |phi|, descending; ties keep schema order
  std::vector<ShapExplanation> instances;
};

/// Indices of `phi` ordered by |phi| descending, ties by index.
[[nodiscard]] inline std::vector<std::size_t> order_by_magnitude(const std::vector<double>& phi) {
  std::vector<std::size_t> idx(phi.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return std::fabs(phi[a]) > std::fabs(phi[b]); });
  return idx;
}

[[nodiscard]] inline ExplanationSummary summarize_explanations(std::vector<ShapExplanation> set) {
  if (set.empty()) throw InvalidArgument("no explanations to render");
  const auto& schema = set.front().schema;
  std::vector<double> mean_abs(schema.size(), 0.0);
  for (const auto& e : set) {
    if (e.schema != schema) throw SchemaMismatch("explanations use different schemas");
    for (std::size_t k = 0; k < schema.size(); ++k) mean_abs[k] += std::fabs(e.phi[k]);
  }
  for (double& v : mean_abs) v /= static_cast<double>(set.size());
  ExplanationSummary s;
  for (auto k : order_by_magnitude(mean_abs)) s.ranking.push_back({schema[k], mean_abs[k]});
  s.instances = std::move(set);
  return s;
}

[[nodiscard]] inline nlohmann::json explanation_to_json(const ShapExplanation& e) {
  nlohmann::json j;
  j["image_id"] = e.instance_id;
  j["base_value"] = e.base_value;
  j["prediction"] = e.prediction;
  auto contrib = nlohmann::json::array();
  for (auto k : order_by_magnitude(e.phi))
    contrib.push_back({{"feature", e.schema[k]}, {"value", e.features[k]}, {"phi", e.phi[k]}});
  j["contributions"] = std::move(contrib);
  return j;
}

[[nodiscard]] inline nlohmann::json render_explanation_json(const ExplanationSummary& s) {
  nlohmann::json j;
  auto ranking = nlohmann::json::array();
  for (const auto& r : s.ranking) ranking.push_back({{"feature", r.feature}, {"mean_abs_phi", r.mean_abs_phi}});
  j["ranking"] = std::move(ranking);
  auto inst = nlohmann::json::array();
  for (const auto& e : s.instances) inst.push_back(explanation_to_json(e));
  j["instances"] = std::move(inst);
  return j;
}

[[nodiscard]] inline std::string render_explanation_text(const ExplanationSummary& s) {
  std::string out = "feature importance (mean |phi|)\n";
  for (const auto& r : s.ranking) out += "  " + r.feature + "  " + format_fixed(r.mean_abs_phi, 4) + "\n";
  for (const auto& e : s.instances) {
    out += "\n" + (e.instance_id.empty() ? std::string("instance") : e.instance_id) +
           "  f(x)=" + format_fixed(e.prediction, 4) + "  base=" + format_fixed(e.base_value, 4) + "\n";
    for (auto k : order_by_magnitude(e.phi)) {
      out += "  " + e.schema[k] + "  " + (e.phi[k] >= 0 ? "+" : "") + format_fixed(e.phi[k], 4) + "\n";
    }
  }
  return out;
}

}  // namespace retina
