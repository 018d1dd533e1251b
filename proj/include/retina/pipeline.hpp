#pragma once

// Stage runners shared by the batch CLI and the HTTP service.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retina/agreement.hpp"
#include "retina/classifier.hpp"
#include "retina/enhance.hpp"
#include "retina/error.hpp"
#include "retina/features.hpp"
#include "retina/io.hpp"
#include "retina/manifest.hpp"
#include "retina/parallel.hpp"
#include "retina/postprocess.hpp"

namespace retina {

struct TrainConfig {
  ModelKind kind = ModelKind::forest;
  double ratio = 0.7;
  int folds = 5;
  ForestGrid forest_grid;
  LogisticGrid logistic_grid;
  ForestParams forest_base;
  LogisticParams logistic_base;
};

struct PipelineConfig {
  FeatureConfig features;
  EnhancementParams enhance;
  PostprocessParams postprocess;
  ProtocolThresholds agreement;
  TrainConfig train;

  void validate() const {
    enhance.validate();
    postprocess.validate();
    agreement.validate();
    if (!(train.ratio > 0.0 && train.ratio < 1.0)) throw InvalidArgument("train.ratio must lie in (0,1)");
    if (train.folds < 2) throw InvalidArgument("train.folds must be >= 2");
    if (features.dark_threshold < 0 || features.dark_threshold > 255)
      throw InvalidArgument("features.dark_threshold must lie in [0,255]");
  }
};

namespace detail {

// Reads `key` into `out` when present; unknown keys in a section are errors.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw SchemaMismatch("config section '" + name_ + "' must be an object");
  }

  template <class T>
  Section& get(const char* key, T& out) {
    seen_.push_back(key);
    if (!j_.contains(key)) return *this;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw SchemaMismatch("config " + name_ + "." + key + " has the wrong type");
    }
    return *this;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end())
        throw SchemaMismatch("unknown config key " + name_ + "." + k);
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::vector<std::string> seen_;
};

}  // namespace detail

/// Overlays a JSON config document onto `cfg`.
inline void apply_config(PipelineConfig& cfg, const nlohmann::json& doc) {
  if (!doc.is_object()) throw SchemaMismatch("config must be a JSON object");
  for (const auto& [k, v] : doc.items())
    if (k != "features" && k != "enhance" && k != "postprocess" && k != "agreement" && k != "train")
      throw SchemaMismatch("unknown config section '" + k + "'");
  if (doc.contains("features")) {
    detail::Section s(doc["features"], "features");
    s.get("dark_threshold", cfg.features.dark_threshold)
        .get("vessel_scales", cfg.features.vessel.scales)
        .get("tophat_radius", cfg.features.vessel.tophat_radius)
        .get("beta", cfg.features.vessel.beta)
        .finish();
  }
  if (doc.contains("enhance")) {
    detail::Section s(doc["enhance"], "enhance");
    s.get("clahe_clip", cfg.enhance.clahe_clip)
        .get("grid_cols", cfg.enhance.grid_cols)
        .get("grid_rows", cfg.enhance.grid_rows)
        .get("gamma", cfg.enhance.gamma)
        .get("dark_threshold", cfg.enhance.dark_threshold)
        .finish();
  }
  if (doc.contains("postprocess")) {
    auto& p = cfg.postprocess;
    detail::Section s(doc["postprocess"], "postprocess");
    s.get("window", p.window)
        .get("k_bright", p.k_bright)
        .get("k_dark", p.k_dark)
        .get("hue_lo", p.hue_lo)
        .get("hue_hi", p.hue_hi)
        .get("sat_max", p.sat_max)
        .get("open_radius_ma", p.open_radius_ma)
        .get("open_radius_ha", p.open_radius_ha)
        .get("min_area", p.min_area)
        .finish();
  }
  if (doc.contains("agreement")) {
    auto& t = cfg.agreement;
    int outlier = t.outlier_count.value_or(0);
    detail::Section s(doc["agreement"], "agreement");
    s.get("pairwise_low", t.pairwise_low)
        .get("overall_discard", t.overall_discard)
        .get("per_lesion_slight", t.per_lesion_slight)
        .get("outlier_count", outlier)
        .finish();
    if (doc["agreement"].contains("outlier_count")) t.outlier_count = outlier;
  }
  if (doc.contains("train")) {
    auto& t = cfg.train;
    std::string model = std::string(to_string(t.kind));
    detail::Section s(doc["train"], "train");
    s.get("model", model)
        .get("ratio", t.ratio)
        .get("folds", t.folds)
        .get("trees", t.forest_grid.trees)
        .get("max_depth", t.forest_grid.max_depth)
        .get("min_leaf", t.forest_grid.min_leaf)
        .get("l2", t.logistic_grid.l2)
        .get("epochs", t.logistic_grid.epochs)
        .get("lr", t.logistic_grid.lr)
        .get("class_weighted", t.forest_base.class_weighted)
        .finish();
    t.logistic_base.class_weighted = t.forest_base.class_weighted;
    if (model == "forest") {
      t.kind = ModelKind::forest;
    } else if (model == "logistic") {
      t.kind = ModelKind::logistic;
    } else {
      throw SchemaMismatch("train.model must be 'forest' or 'logistic'");
    }
  }
  cfg.validate();
}

[[nodiscard]] inline PipelineConfig load_config(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(IoError::Kind::corrupt_data, path.string() + ": " + e.what());
  }
  PipelineConfig cfg;
  apply_config(cfg, doc);
  return cfg;
}

struct StageFailure {
  std::string image_id;
  std::string message;
};

// ---------------------------------------------------------------------------
// Features

struct FeatureStageResult {
  std::vector<FeatureRow> rows;  ///< sorted by image id
  std::vector<StageFailure> failures;
};

[[nodiscard]] inline FeatureRow features_for_entry(const DatasetManifest& m, const ManifestEntry& e,
                                                   const FeatureConfig& cfg) {
  std::optional<VlmScores> scores;
  if (e.vlm_scores) {
    const auto map = ingest_vlm_scores(m.resolve(*e.vlm_scores));
    const auto it = map.find(e.id);
    if (it == map.end())
      throw MissingArtifact("vlm score sidecar " + *e.vlm_scores + " has no entry for '" + e.id + "'");
    scores = it->second;
  }
  return {e.id, extract_features(load_image(m.resolve(e.path)), cfg, scores), e.quality};
}

[[nodiscard]] inline FeatureStageResult compute_features(const DatasetManifest& m, const FeatureConfig& cfg,
                                                         int jobs = 1) {
  const auto entries = m.sorted();
  std::vector<std::optional<FeatureRow>> rows(entries.size());
  std::vector<std::optional<std::string>> errors(entries.size());
  parallel_for(entries.size(), jobs, [&](std::size_t i) {
    try {
      rows[i] = features_for_entry(m, *entries[i], cfg);
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  });
  FeatureStageResult r;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (rows[i]) r.rows.push_back(std::move(*rows[i]));
    if (errors[i]) r.failures.push_back({entries[i]->id, *errors[i]});
  }
  return r;
}

/// Schema for a set of rows: the five image descriptors, plus the two VLM
/// scores when every row carries them.
[[nodiscard]] inline std::vector<std::string> schema_for(const std::vector<FeatureRow>& rows) {
  bool vlm = !rows.empty();
  for (const auto& r : rows) vlm = vlm && r.features.has_vlm();
  std::vector<std::string> s;
  for (std::size_t k = 0; k < (vlm ? 7u : 5u); ++k) s.emplace_back(kFeatureNames[k]);
  return s;
}

/// Feature values of one row in `schema` order.
[[nodiscard]] inline std::vector<double> feature_vector(const FeatureRow& r, const std::vector<std::string>& schema) {
  std::vector<double> v;
  v.reserve(schema.size());
  const auto& f = r.features;
  for (const auto& name : schema) {
    if (name == "brightness") {
      v.push_back(f.brightness);
    } else if (name == "vesselness") {
      v.push_back(f.vesselness);
    } else if (name == "sharpness") {
      v.push_back(f.sharpness);
    } else if (name == "entropy") {
      v.push_back(f.entropy);
    } else if (name == "peak_to_mean") {
      v.push_back(f.peak_to_mean);
    } else if (name == "blurry" || name == "artifacts") {
      const auto& opt = name == "blurry" ? f.blurry : f.artifacts;
      if (!opt) throw SchemaMismatch("row '" + r.image_id + "' lacks feature '" + name + "' required by the model");
      v.push_back(*opt);
    } else {
      throw SchemaMismatch("unknown feature '" + name + "' in schema");
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOutcome {
  ClassifierModel model;
  GridSearchResult search;
  Split split;
  EvalReport test;
};

/// Stratified split, k-fold grid search on the training part, refit of the
/// best cell on the whole training part, evaluation on the held-out part.
[[nodiscard]] inline TrainOutcome run_training(const std::vector<FeatureRow>& rows, const TrainConfig& cfg,
                                               std::uint64_t seed, int jobs = 1) {
  std::vector<LabeledId> items;
  std::map<std::string, const FeatureRow*> by_id;
  for (const auto& r : rows) {
    if (!r.label) throw InvalidArgument("row '" + r.image_id + "' has no quality label");
    items.push_back({r.image_id, *r.label == QualityLabel::good ? 1 : 0});
    by_id[r.image_id] = &r;
  }
  const auto schema = schema_for(rows);
  TrainOutcome out;
  out.split = split_dataset(items, cfg.ratio, seed);
  auto gather = [&](const std::vector<std::string>& ids, FeatureMatrix& X, Labels& y) {
    for (const auto& id : ids) {
      const auto* r = by_id.at(id);
      X.push_back(feature_vector(*r, schema));
      y.push_back(*r->label == QualityLabel::good ? 1 : 0);
    }
  };
  FeatureMatrix Xtr, Xte;
  Labels ytr, yte;
  gather(out.split.train, Xtr, ytr);
  gather(out.split.test, Xte, yte);

  ForestParams fbase = cfg.forest_base;
  fbase.seed = seed;
  const auto grid = cfg.kind == ModelKind::forest ? expand_grid(cfg.forest_grid, fbase)
                                                  : expand_grid(cfg.logistic_grid, cfg.logistic_base);
  out.search = grid_search(grid, Xtr, ytr, cfg.folds, seed, jobs);
  auto best = out.search.best;
  best.forest.seed = seed;
  out.model = train(best, Xtr, ytr, schema, jobs);
  out.test = evaluate(out.model, Xte, yte);
  return out;
}

[[nodiscard]] inline nlohmann::json eval_to_json(const EvalReport& r) {
  return {{"tp", r.tp},
          {"fp", r.fp},
          {"fn", r.fn},
          {"tn", r.tn},
          {"precision", r.precision},
          {"recall", r.recall},
          {"f2", r.f2},
          {"accuracy", r.accuracy}};
}

// ---------------------------------------------------------------------------
// Enhancement, suggestions, agreement

[[nodiscard]] inline RasterImage enhance_entry(const DatasetManifest& m, const ManifestEntry& e,
                                               const EnhancementParams& p) {
  return enhance(load_image(m.resolve(e.path)), p);
}

/// Post-processed prediction mask for one lesion type.
[[nodiscard]] inline BinaryMask suggestion_for(const DatasetManifest& m, const ManifestEntry& e, LesionType lesion,
                                               const PostprocessParams& p) {
  const auto it = e.predictions.find(lesion);
  if (it == e.predictions.end())
    throw MissingArtifact("missing predictions: image '" + e.id + "' has no " + std::string(to_string(lesion)) +
                          " prediction mask");
  const auto img = load_image(m.resolve(e.path));
  return postprocess(img, load_mask(m.resolve(it->second)), lesion, p);
}

/// Full protocol report for one manifest entry. Masks must match the image size.
[[nodiscard]] inline AgreementReport agreement_for_entry(const DatasetManifest& m, const ManifestEntry& e,
                                                         const ProtocolThresholds& t) {
  auto annotations = load_annotations(m, e);
  for (std::size_t k = 1; k < annotations.size(); ++k)
    if (!annotations[k].mask.same_shape(annotations[0].mask))
      throw DimensionMismatch("annotations of '" + e.id + "' differ in size");
  return report(e.id, annotations, t);
}

[[nodiscard]] inline nlohmann::json agreement_summary(const std::vector<AgreementReport>& reports,
                                                      const std::vector<StageFailure>& failures) {
  std::size_t keep = 0, discard = 0, insufficient = 0;
  auto images = nlohmann::json::array();
  for (const auto& r : reports) {
    switch (r.verdict) {
      case Verdict::keep: ++keep; break;
      case Verdict::discard: ++discard; break;
      case Verdict::insufficient: ++insufficient; break;
    }
    images.push_back({{"image_id", r.image_id},
                      {"verdict", std::string(to_string(r.verdict))},
                      {"score", r.score ? nlohmann::json(*r.score) : nlohmann::json(nullptr)},
                      {"discarded_annotators", r.discarded_annotators}});
  }
  auto failed = nlohmann::json::array();
  for (const auto& f : failures) failed.push_back({{"image_id", f.image_id}, {"error", f.message}});
  return {{"kept", keep},
          {"discarded", discard},
          {"insufficient", insufficient},
          {"failed", failures.size()},
          {"images", std::move(images)},
          {"failures", std::move(failed)}};
}

}  // namespace retina
