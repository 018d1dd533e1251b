#pragma once

// HTTP facade over a manifest directory: image listing, enhanced views,
// post-processed suggestions, annotator registration, annotation upload and
// live agreement reports. Store logic lives in CurationStore so it can be
// exercised without sockets; register_routes wires it into httplib.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "retina/agreement.hpp"
#include "retina/error.hpp"
#include "retina/io.hpp"
#include "retina/manifest.hpp"
#include "retina/pipeline.hpp"

namespace retina {

struct AnnotatorProfile {
  std::string id;
  std::string name;
  double expertise = 1.0;
  std::optional<std::string> band;
};

struct HttpResult {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::string etag;
};

/// 64-bit FNV-1a, hex encoded.
[[nodiscard]] inline std::string content_hash(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 15u];
  return out;
}

namespace detail {

inline bool safe_name(std::string_view s) {
  if (s.empty() || s.size() > 128 || s == "." || s == "..") return false;
  for (char c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  return true;
}

// Path component for an arbitrary image id.
inline std::string encode_component(std::string_view s) {
  static constexpr char digits[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '_' || c == '-') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += digits[c >> 4];
      out += digits[c & 15u];
    }
  }
  return out;
}

inline HttpResult json_result(int status, const nlohmann::json& j) { return {status, "application/json", j.dump(), {}}; }

inline HttpResult error_result(int status, const std::string& message) {
  return json_result(status, {{"error", message}});
}

inline HttpResult png_result(std::string bytes) {
  HttpResult r{200, "image/png", std::move(bytes), {}};
  r.etag = "\"" + content_hash(r.body) + "\"";
  return r;
}

// Run-length encoding: alternating background/foreground run lengths in
// row-major order, starting with background.
inline BinaryMask decode_rle(const nlohmann::json& j) {
  if (!j.contains("width") || !j.contains("height") || !j.contains("rle"))
    throw InvalidArgument("RLE payload needs width, height and rle");
  const int w = j.at("width").get<int>(), h = j.at("height").get<int>();
  if (w < 1 || h < 1) throw InvalidArgument("RLE dimensions must be >= 1");
  BinaryMask m(w, h);
  std::size_t pos = 0;
  const std::size_t total = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  bool fg = false;
  for (const auto& run : j.at("rle")) {
    const auto len = run.get<std::int64_t>();
    if (len < 0) throw InvalidArgument("negative RLE run");
    if (pos + static_cast<std::size_t>(len) > total) throw InvalidArgument("RLE runs exceed mask size");
    if (fg)
      for (std::size_t k = pos; k < pos + static_cast<std::size_t>(len); ++k)
        m.set(static_cast<int>(k % static_cast<std::size_t>(w)), static_cast<int>(k / static_cast<std::size_t>(w)));
    pos += static_cast<std::size_t>(len);
    fg = !fg;
  }
  if (pos != total) throw InvalidArgument("RLE runs cover " + std::to_string(pos) + " of " + std::to_string(total) + " pixels");
  return m;
}

}  // namespace detail

/// Thread-safe store backed by a manifest file and an annotators.json beside it.
class CurationStore {
 public:
  CurationStore(fs::path manifest_path, PipelineConfig cfg)
      : manifest_path_(fs::absolute(std::move(manifest_path))), cfg_(std::move(cfg)) {
    cfg_.validate();
    manifest_ = load_manifest(manifest_path_);
    load_profiles();
  }

  [[nodiscard]] const PipelineConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] fs::path profiles_path() const { return manifest_path_.parent_path() / "annotators.json"; }

  [[nodiscard]] HttpResult list_images() const {
    std::shared_lock lk(state_mu_);
    auto images = nlohmann::json::array();
    for (const auto* e : manifest_.sorted()) {
      auto anns = nlohmann::json::array();
      for (const auto& a : e->annotations)
        anns.push_back({{"annotator", a.annotator},
                        {"lesion", std::string(to_string(a.lesion))},
                        {"confidence", a.confidence},
                        {"expertise", a.expertise}});
      auto preds = nlohmann::json::array();
      for (const auto& [lesion, p] : e->predictions) preds.push_back(std::string(to_string(lesion)));
      images.push_back({{"id", e->id},
                        {"quality", e->quality ? nlohmann::json(std::string(to_string(*e->quality))) : nlohmann::json(nullptr)},
                        {"annotations", std::move(anns)},
                        {"predictions", std::move(preds)}});
    }
    return detail::json_result(200, {{"images", std::move(images)}});
  }

  [[nodiscard]] HttpResult enhanced(const std::string& id) {
    const auto entry = snapshot(id);
    if (!entry) return detail::error_result(404, "unknown image '" + id + "'");
    {
      std::lock_guard lk(cache_mu_);
      if (auto it = enhanced_cache_.find(id); it != enhanced_cache_.end()) return it->second;
    }
    auto res = detail::png_result(bytes_of(encode_png(enhance_entry(manifest_copy(), *entry, cfg_.enhance))));
    std::lock_guard lk(cache_mu_);
    return enhanced_cache_.emplace(id, std::move(res)).first->second;
  }

  [[nodiscard]] HttpResult suggestion(const std::string& id, const std::string& lesion_name) {
    LesionType lesion;
    try {
      lesion = parse_lesion(lesion_name);
    } catch (const Error& e) {
      return detail::error_result(400, e.what());
    }
    const auto entry = snapshot(id);
    if (!entry) return detail::error_result(404, "unknown image '" + id + "'");
    if (!entry->predictions.count(lesion))
      return detail::error_result(409, "no " + lesion_name + " prediction available for '" + id + "'");
    const auto key = std::make_pair(id, lesion);
    {
      std::lock_guard lk(cache_mu_);
      if (auto it = suggestion_cache_.find(key); it != suggestion_cache_.end()) return it->second;
    }
    auto res =
        detail::png_result(bytes_of(encode_mask_png(suggestion_for(manifest_copy(), *entry, lesion, cfg_.postprocess))));
    std::lock_guard lk(cache_mu_);
    return suggestion_cache_.emplace(key, std::move(res)).first->second;
  }

  [[nodiscard]] HttpResult list_annotators() const {
    std::shared_lock lk(state_mu_);
    return detail::json_result(200, profiles_json());
  }

  /// Registers or replaces a profile. Expertise may be given directly, as a
  /// band label (mapped to the band midpoint), or both when consistent.
  [[nodiscard]] HttpResult register_annotator(const std::string& body) {
    AnnotatorProfile p;
    try {
      const auto j = nlohmann::json::parse(body);
      if (!j.is_object() || !j.contains("id") || !j["id"].is_string()) throw InvalidArgument("field 'id' is required");
      p.id = j["id"].get<std::string>();
      if (!detail::safe_name(p.id)) throw InvalidArgument("annotator id must match [A-Za-z0-9._-]{1,128}");
      p.name = j.value("name", p.id);
      const bool has_exp = j.contains("expertise") && !j["expertise"].is_null();
      if (j.contains("band") && !j["band"].is_null()) p.band = j["band"].get<std::string>();
      if (!has_exp && !p.band) throw InvalidArgument("expertise or band is required");
      if (has_exp) {
        if (!j["expertise"].is_number()) throw InvalidArgument("expertise must be a number");
        p.expertise = j["expertise"].get<double>();
        if (!(p.expertise >= 0.0 && p.expertise <= 1.0)) throw InvalidArgument("expertise must lie in [0,1]");
      }
      if (p.band) {
        const auto band = find_band(kExpertiseBands, *p.band);
        if (!band) throw InvalidArgument("unknown expertise band '" + *p.band + "'");
        if (!has_exp) {
          p.expertise = band->midpoint();
        } else if (!band->contains(p.expertise)) {
          throw InvalidArgument("expertise " + format_double(p.expertise) + " lies outside band '" + *p.band + "'");
        }
      }
    } catch (const nlohmann::json::exception& e) {
      return detail::error_result(400, std::string("malformed annotator JSON: ") + e.what());
    } catch (const Error& e) {
      return detail::error_result(400, e.what());
    }
    std::unique_lock lk(state_mu_);
    const bool existed = profiles_.count(p.id) > 0;
    profiles_[p.id] = p;
    write_text_atomic(profiles_path(), profiles_json().dump(2) + "\n");
    return detail::json_result(existed ? 200 : 201, profile_json(p));
  }

  /// Stores one annotator's mask for one lesion of one image. `content_type`
  /// selects a PNG body (lesion and confidence from `query`) or a JSON body
  /// with an RLE mask.
  [[nodiscard]] HttpResult submit_annotation(const std::string& id, const std::string& annotator,
                                             const std::string& content_type, const std::string& body,
                                             const std::map<std::string, std::string>& query) {
    if (annotator.empty()) return detail::error_result(400, "missing X-Annotator-Id header");
    std::optional<AnnotatorProfile> profile;
    {
      std::shared_lock lk(state_mu_);
      if (auto it = profiles_.find(annotator); it != profiles_.end()) profile = it->second;
    }
    if (!profile) return detail::error_result(404, "unknown annotator '" + annotator + "'");
    const auto entry = snapshot(id);
    if (!entry) return detail::error_result(404, "unknown image '" + id + "'");

    LesionType lesion;
    double confidence = 0.0;
    BinaryMask mask;
    try {
      auto parse_confidence = [](const std::optional<std::string>& value, const std::optional<std::string>& band) {
        if (value) {
          const double c = parse_double(*value);
          if (!(c >= 0.0 && c <= 1.0)) throw InvalidArgument("confidence must lie in [0,1]");
          return c;
        }
        if (band) return confidence_from_label(*band);
        throw InvalidArgument("confidence is required");
      };
      auto q = [&](const char* k) -> std::optional<std::string> {
        if (auto it = query.find(k); it != query.end()) return it->second;
        return std::nullopt;
      };
      if (content_type.rfind("image/png", 0) == 0) {
        const auto lesion_q = q("lesion");
        if (!lesion_q) throw InvalidArgument("query parameter 'lesion' is required");
        lesion = parse_lesion(*lesion_q);
        confidence = parse_confidence(q("confidence"), q("confidence_band"));
        mask = decode_mask_png(std::span(reinterpret_cast<const std::uint8_t*>(body.data()), body.size()));
      } else if (content_type.rfind("application/json", 0) == 0) {
        const auto j = nlohmann::json::parse(body);
        lesion = parse_lesion(j.at("lesion").get<std::string>());
        std::optional<std::string> cv, cb;
        if (j.contains("confidence")) {
          if (!j["confidence"].is_number()) throw InvalidArgument("confidence must be a number");
          cv = format_double(j["confidence"].get<double>());
        }
        if (j.contains("confidence_band")) cb = j["confidence_band"].get<std::string>();
        confidence = parse_confidence(cv, cb);
        mask = detail::decode_rle(j);
      } else {
        return detail::error_result(415, "body must be image/png or application/json");
      }
      const auto dims = image_dims(*entry);
      if (mask.width() != dims.first || mask.height() != dims.second)
        throw DimensionMismatch("mask is " + std::to_string(mask.width()) + "x" + std::to_string(mask.height()) +
                                ", image is " + std::to_string(dims.first) + "x" + std::to_string(dims.second));
    } catch (const nlohmann::json::exception& e) {
      return detail::error_result(400, std::string("malformed annotation JSON: ") + e.what());
    } catch (const IoError& e) {
      return detail::error_result(400, e.what());
    } catch (const InvalidArgument& e) {
      return detail::error_result(400, e.what());
    } catch (const Error& e) {
      return detail::error_result(400, e.what());
    }

    std::lock_guard image_lock(image_mutex(id));
    const std::string rel = "annotations/" + detail::encode_component(id) + "/" + annotator + "." +
                            std::string(to_string(lesion)) + ".png";
    const auto abs = manifest_path_.parent_path() / rel;
    fs::create_directories(abs.parent_path());
    save_mask(abs, mask);
    AnnotationRecord record{rel, annotator, lesion, confidence, profile->expertise};
    {
      std::unique_lock lk(state_mu_);
      auto* e = manifest_.find(id);
      auto& anns = e->annotations;
      std::erase_if(anns, [&](const AnnotationRecord& a) { return a.annotator == annotator && a.lesion == lesion; });
      anns.push_back(record);
      save_manifest(manifest_path_, manifest_);
    }
    return detail::json_result(201, {{"image_id", id},
                                     {"annotator", annotator},
                                     {"lesion", std::string(to_string(lesion))},
                                     {"confidence", confidence},
                                     {"expertise", profile->expertise},
                                     {"path", rel}});
  }

  [[nodiscard]] HttpResult annotation_mask(const std::string& id, const std::string& annotator,
                                           const std::string& lesion_name) {
    const auto entry = snapshot(id);
    if (!entry) return detail::error_result(404, "unknown image '" + id + "'");
    LesionType lesion;
    try {
      lesion = parse_lesion(lesion_name);
    } catch (const Error& e) {
      return detail::error_result(400, e.what());
    }
    for (const auto& a : entry->annotations)
      if (a.annotator == annotator && a.lesion == lesion) {
        std::lock_guard image_lock(image_mutex(id));
        const auto bytes = read_file_bytes(manifest_copy().resolve(a.path));
        return detail::png_result(std::string(bytes.begin(), bytes.end()));
      }
    return detail::error_result(404, "no " + lesion_name + " annotation by '" + annotator + "' on '" + id + "'");
  }

  /// Recomputed on every call from the masks on disk; expertise comes from
  /// the annotator profile when one exists.
  [[nodiscard]] HttpResult agreement(const std::string& id) {
    auto entry = snapshot(id);
    if (!entry) return detail::error_result(404, "unknown image '" + id + "'");
    {
      std::shared_lock lk(state_mu_);
      for (auto& a : entry->annotations)
        if (auto it = profiles_.find(a.annotator); it != profiles_.end()) a.expertise = it->second.expertise;
    }
    try {
      std::lock_guard image_lock(image_mutex(id));
      return detail::json_result(200, report_to_json(agreement_for_entry(manifest_copy(), *entry, cfg_.agreement)));
    } catch (const Error& e) {
      return detail::error_result(422, e.what());
    }
  }

  /// Current manifest (paths relative to the store directory).
  [[nodiscard]] DatasetManifest manifest_copy() const {
    std::shared_lock lk(state_mu_);
    return manifest_;
  }

 private:
  static std::string bytes_of(const std::vector<std::uint8_t>& v) { return {v.begin(), v.end()}; }

  std::optional<ManifestEntry> snapshot(const std::string& id) const {
    std::shared_lock lk(state_mu_);
    if (const auto* e = manifest_.find(id)) return *e;
    return std::nullopt;
  }

  std::mutex& image_mutex(const std::string& id) {
    std::lock_guard lk(locks_mu_);
    auto& slot = image_locks_[id];
    if (!slot) slot = std::make_unique<std::mutex>();
    return *slot;
  }

  std::pair<int, int> image_dims(const ManifestEntry& e) {
    {
      std::lock_guard lk(cache_mu_);
      if (auto it = dims_cache_.find(e.id); it != dims_cache_.end()) return it->second;
    }
    const auto img = load_image(manifest_copy().resolve(e.path));
    std::lock_guard lk(cache_mu_);
    return dims_cache_[e.id] = {img.width(), img.height()};
  }

  static nlohmann::json profile_json(const AnnotatorProfile& p) {
    return {{"id", p.id},
            {"name", p.name},
            {"expertise", p.expertise},
            {"band", p.band ? nlohmann::json(*p.band) : nlohmann::json(nullptr)}};
  }

  nlohmann::json profiles_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& [id, p] : profiles_) arr.push_back(profile_json(p));
    return {{"annotators", std::move(arr)}};
  }

  void load_profiles() {
    std::error_code ec;
    if (!fs::exists(profiles_path(), ec)) return;
    const auto bytes = read_file_bytes(profiles_path());
    try {
      const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
      for (const auto& pj : j.at("annotators")) {
        AnnotatorProfile p;
        p.id = pj.at("id").get<std::string>();
        p.name = pj.value("name", p.id);
        p.expertise = pj.at("expertise").get<double>();
        if (pj.contains("band") && !pj["band"].is_null()) p.band = pj["band"].get<std::string>();
        profiles_[p.id] = p;
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError(IoError::Kind::corrupt_data, profiles_path().string() + ": " + e.what());
    }
  }

  fs::path manifest_path_;
  PipelineConfig cfg_;
  mutable std::shared_mutex state_mu_;
  DatasetManifest manifest_;
  std::map<std::string, AnnotatorProfile> profiles_;

  std::mutex locks_mu_;
  std::map<std::string, std::unique_ptr<std::mutex>> image_locks_;

  std::mutex cache_mu_;
  std::map<std::string, HttpResult> enhanced_cache_;
  std::map<std::pair<std::string, LesionType>, HttpResult> suggestion_cache_;
  std::map<std::string, std::pair<int, int>> dims_cache_;
};

namespace detail {

inline void send(httplib::Response& res, const httplib::Request& req, const HttpResult& r) {
  if (!r.etag.empty()) {
    res.set_header("ETag", r.etag);
    if (req.get_header_value("If-None-Match") == r.etag) {
      res.status = 304;
      return;
    }
  }
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

template <class Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      send(res, req, fn(req));
    } catch (const std::exception& e) {
      send(res, req, error_result(500, e.what()));
    }
  };
}

}  // namespace detail

inline void register_routes(httplib::Server& server, CurationStore& store) {
  using detail::guarded;
  using Req = httplib::Request;
  server.Get("/images", guarded([&](const Req&) { return store.list_images(); }));
  server.Get(R"(/images/([^/]+)/enhanced)", guarded([&](const Req& r) { return store.enhanced(r.matches[1]); }));
  server.Get(R"(/images/([^/]+)/suggestions/([^/]+))",
             guarded([&](const Req& r) { return store.suggestion(r.matches[1], r.matches[2]); }));
  server.Get("/annotators", guarded([&](const Req&) { return store.list_annotators(); }));
  server.Post("/annotators", guarded([&](const Req& r) { return store.register_annotator(r.body); }));
  server.Post(R"(/images/([^/]+)/annotations)", guarded([&](const Req& r) {
                std::map<std::string, std::string> query(r.params.begin(), r.params.end());
                return store.submit_annotation(r.matches[1], r.get_header_value("X-Annotator-Id"),
                                               r.get_header_value("Content-Type"), r.body, query);
              }));
  server.Get(R"(/images/([^/]+)/annotations/([^/]+)/([^/]+))",
             guarded([&](const Req& r) { return store.annotation_mask(r.matches[1], r.matches[2], r.matches[3]); }));
  server.Get(R"(/images/([^/]+)/agreement)", guarded([&](const Req& r) { return store.agreement(r.matches[1]); }));
}

}  // namespace retina
