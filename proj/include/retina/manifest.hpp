#pragma once

// Dataset manifest: one JSON document per dataset directory listing images,
// quality labels, VLM score sidecars, annotations and prediction masks.
// Relative paths resolve against the manifest's directory.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retina/error.hpp"
#include "retina/features.hpp"
#include "retina/image.hpp"
#include "retina/io.hpp"

namespace retina {

namespace fs = std::filesystem;

struct AnnotationRecord {
  std::string path;
  std::string annotator;
  LesionType lesion = LesionType::EX;
  double confidence = 1.0;
  double expertise = 1.0;
};

struct ManifestEntry {
  std::string id;
  std::string path;
  std::optional<QualityLabel> quality;
  std::optional<std::string> vlm_scores;
  std::vector<AnnotationRecord> annotations;
  std::map<LesionType, std::string> predictions;
};

class DatasetManifest {
 public:
  DatasetManifest() = default;
  DatasetManifest(fs::path root, std::vector<ManifestEntry> entries) : root_(std::move(root)), entries_(std::move(entries)) {
    check_unique();
  }

  [[nodiscard]] const fs::path& root() const noexcept { return root_; }
  void set_root(fs::path root) { root_ = std::move(root); }
  [[nodiscard]] const std::vector<ManifestEntry>& entries() const noexcept { return entries_; }
  [[nodiscard]] std::vector<ManifestEntry>& entries() noexcept { return entries_; }

  [[nodiscard]] fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : root_ / path;
  }

  [[nodiscard]] const ManifestEntry* find(std::string_view id) const {
    for (const auto& e : entries_)
      if (e.id == id) return &e;
    return nullptr;
  }
  [[nodiscard]] ManifestEntry* find(std::string_view id) {
    for (auto& e : entries_)
      if (e.id == id) return &e;
    return nullptr;
  }

  /// Entries ordered by id.
  [[nodiscard]] std::vector<const ManifestEntry*> sorted() const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries_) out.push_back(&e);
    std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->id < b->id; });
    return out;
  }

  void check_unique() const {
    std::set<std::string> seen;
    for (const auto& e : entries_)
      if (!seen.insert(e.id).second) throw SchemaMismatch("duplicate image id '" + e.id + "' in manifest");
  }

  /// Every referenced file must exist.
  void check_paths() const {
    auto need = [&](const std::string& p, const std::string& what) {
      std::error_code ec;
      if (!fs::is_regular_file(resolve(p), ec))
        throw IoError(IoError::Kind::missing_file, what + ": " + resolve(p).string());
    };
    for (const auto& e : entries_) {
      need(e.path, "image '" + e.id + "'");
      if (e.vlm_scores) need(*e.vlm_scores, "vlm scores of '" + e.id + "'");
      for (const auto& a : e.annotations) need(a.path, "annotation of '" + e.id + "'");
      for (const auto& [lesion, p] : e.predictions)
        need(p, std::string("prediction ") + std::string(to_string(lesion)) + " of '" + e.id + "'");
    }
  }

 private:
  fs::path root_;
  std::vector<ManifestEntry> entries_;
};

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw SchemaMismatch(where + ": missing field '" + key + "'");
  return j.at(key);
}

inline std::string require_string(const nlohmann::json& j, const char* key, const std::string& where) {
  const auto& v = require(j, key, where);
  if (!v.is_string()) throw SchemaMismatch(where + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}

inline double require_unit(const nlohmann::json& j, const char* key, const std::string& where) {
  const auto& v = require(j, key, where);
  if (!v.is_number()) throw SchemaMismatch(where + ": field '" + key + "' must be a number");
  const double x = v.get<double>();
  if (!(x >= 0.0 && x <= 1.0)) throw InvalidArgument(where + ": field '" + key + "' must lie in [0,1]");
  return x;
}

}  // namespace detail

/// Parses a manifest document. `root` is the directory paths resolve against.
[[nodiscard]] inline DatasetManifest parse_manifest(const nlohmann::json& doc, const fs::path& root) {
  const auto& images = detail::require(doc, "images", "manifest");
  if (!images.is_array()) throw SchemaMismatch("manifest: 'images' must be an array");
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& ij = images[i];
    std::string where = "manifest images[" + std::to_string(i) + "]";
    ManifestEntry e;
    e.id = detail::require_string(ij, "id", where);
    if (e.id.empty()) throw SchemaMismatch(where + ": empty id");
    where += " ('" + e.id + "')";
    e.path = detail::require_string(ij, "path", where);
    if (ij.contains("quality") && !ij["quality"].is_null()) {
      if (!ij["quality"].is_string()) throw SchemaMismatch(where + ": 'quality' must be a string or null");
      e.quality = parse_quality(ij["quality"].get<std::string>());
    }
    if (ij.contains("vlm_scores") && !ij["vlm_scores"].is_null()) e.vlm_scores = detail::require_string(ij, "vlm_scores", where);
    if (ij.contains("annotations")) {
      const auto& aj = ij["annotations"];
      if (!aj.is_array()) throw SchemaMismatch(where + ": 'annotations' must be an array");
      for (const auto& a : aj) {
        AnnotationRecord r;
        r.path = detail::require_string(a, "path", where);
        r.annotator = detail::require_string(a, "annotator", where);
        r.lesion = parse_lesion(detail::require_string(a, "lesion", where));
        r.confidence = detail::require_unit(a, "confidence", where);
        r.expertise = detail::require_unit(a, "expertise", where);
        e.annotations.push_back(std::move(r));
      }
    }
    if (ij.contains("predictions") && !ij["predictions"].is_null()) {
      const auto& pj = ij["predictions"];
      if (!pj.is_object()) throw SchemaMismatch(where + ": 'predictions' must be an object");
      for (const auto& [k, v] : pj.items()) {
        if (!v.is_string()) throw SchemaMismatch(where + ": prediction path must be a string");
        e.predictions[parse_lesion(k)] = v.get<std::string>();
      }
    }
    entries.push_back(std::move(e));
  }
  return DatasetManifest(root, std::move(entries));
}

/// Loads and validates a manifest file, including existence of every path.
[[nodiscard]] inline DatasetManifest load_manifest(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(IoError::Kind::corrupt_data, path.string() + ": " + e.what());
  }
  auto m = parse_manifest(doc, fs::absolute(path).parent_path());
  m.check_paths();
  return m;
}

[[nodiscard]] inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  auto images = nlohmann::json::array();
  for (const auto& e : m.entries()) {
    nlohmann::json ij;
    ij["id"] = e.id;
    ij["path"] = e.path;
    ij["quality"] = e.quality ? nlohmann::json(std::string(to_string(*e.quality))) : nlohmann::json(nullptr);
    ij["vlm_scores"] = e.vlm_scores ? nlohmann::json(*e.vlm_scores) : nlohmann::json(nullptr);
    auto anns = nlohmann::json::array();
    for (const auto& a : e.annotations)
      anns.push_back({{"path", a.path},
                      {"annotator", a.annotator},
                      {"lesion", std::string(to_string(a.lesion))},
                      {"confidence", a.confidence},
                      {"expertise", a.expertise}});
    ij["annotations"] = std::move(anns);
    auto preds = nlohmann::json::object();
    for (const auto& [lesion, p] : e.predictions) preds[std::string(to_string(lesion))] = p;
    ij["predictions"] = std::move(preds);
    images.push_back(std::move(ij));
  }
  return {{"images", std::move(images)}};
}

inline void save_manifest(const fs::path& path, const DatasetManifest& m) {
  write_text_atomic(path, manifest_to_json(m).dump(2) + "\n");
}

/// Same manifest with every path rewritten relative to `new_root`.
[[nodiscard]] inline DatasetManifest rebase_manifest(const DatasetManifest& m, const fs::path& new_root) {
  const auto target = fs::weakly_canonical(fs::absolute(new_root));
  auto rebase = [&](const std::string& p) {
    return fs::weakly_canonical(m.resolve(p)).lexically_relative(target).generic_string();
  };
  DatasetManifest out = m;
  out.set_root(target);
  for (auto& e : out.entries()) {
    e.path = rebase(e.path);
    if (e.vlm_scores) e.vlm_scores = rebase(*e.vlm_scores);
    for (auto& a : e.annotations) a.path = rebase(a.path);
    for (auto& [lesion, p] : e.predictions) p = rebase(p);
  }
  return out;
}

/// Loads every annotation mask of an entry.
[[nodiscard]] inline std::vector<Annotation> load_annotations(const DatasetManifest& m, const ManifestEntry& e) {
  std::vector<Annotation> out;
  for (const auto& r : e.annotations) {
    Annotation a;
    a.annotator_id = r.annotator;
    a.image_id = e.id;
    a.lesion = r.lesion;
    a.mask = load_mask(m.resolve(r.path));
    a.confidence = r.confidence;
    a.expertise = r.expertise;
    a.validate();
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace retina
