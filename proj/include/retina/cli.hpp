#pragma once

// Batch driver. Every stage reads its inputs from files and writes its
// artifacts under <out>/<stage>/, so stages can be rerun independently.
// Exit codes: 0 all images processed, 1 usage or fatal error, 2 some images failed.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "retina/agreement.hpp"
#include "retina/classifier.hpp"
#include "retina/error.hpp"
#include "retina/io.hpp"
#include "retina/manifest.hpp"
#include "retina/pipeline.hpp"
#include "retina/service.hpp"
#include "retina/shapley.hpp"

namespace retina {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFatal = 1;
inline constexpr int kExitPartial = 2;

struct CliOptions {
  std::string manifest;
  std::string out = "out";
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string config;
  // train / assess
  std::string features;
  std::string model;
  std::optional<std::string> model_kind;
  std::optional<double> ratio;
  std::optional<int> folds;
  bool explain = false;
  std::size_t background = 100;
  // enhance
  std::optional<double> clip;
  std::optional<double> gamma;
  std::optional<int> grid;
  // postprocess
  std::optional<int> window;
  std::optional<int> min_area;
  // agree
  std::optional<double> pairwise_low;
  std::optional<double> overall_discard;
  std::optional<int> outlier_count;
  // serve
  std::string bind = "127.0.0.1";
  int port = 8080;
};

namespace detail {

inline void log_line(std::ostream& err, const std::string& stage, const std::string& msg) {
  err << "[" << stage << "] " << msg << "\n";
}

inline int report_failures(std::ostream& err, const std::string& stage, const std::vector<StageFailure>& failures) {
  for (const auto& f : failures) log_line(err, stage, "FAILED " + f.image_id + ": " + f.message);
  return failures.empty() ? kExitOk : kExitPartial;
}

inline PipelineConfig resolve_config(const CliOptions& o) {
  PipelineConfig cfg = o.config.empty() ? PipelineConfig{} : load_config(o.config);
  if (o.model_kind) {
    if (*o.model_kind == "forest") {
      cfg.train.kind = ModelKind::forest;
    } else if (*o.model_kind == "logistic") {
      cfg.train.kind = ModelKind::logistic;
    } else {
      throw InvalidArgument("--model-kind must be forest or logistic");
    }
  }
  if (o.ratio) cfg.train.ratio = *o.ratio;
  if (o.folds) cfg.train.folds = *o.folds;
  if (o.clip) cfg.enhance.clahe_clip = *o.clip;
  if (o.gamma) cfg.enhance.gamma = *o.gamma;
  if (o.grid) cfg.enhance.grid_cols = cfg.enhance.grid_rows = *o.grid;
  if (o.window) cfg.postprocess.window = *o.window;
  if (o.min_area) cfg.postprocess.min_area = *o.min_area;
  if (o.pairwise_low) cfg.agreement.pairwise_low = *o.pairwise_low;
  if (o.overall_discard) cfg.agreement.overall_discard = *o.overall_discard;
  if (o.outlier_count) cfg.agreement.outlier_count = *o.outlier_count;
  cfg.validate();
  return cfg;
}

inline DatasetManifest require_manifest(const CliOptions& o) {
  if (o.manifest.empty()) throw InvalidArgument("--manifest is required");
  return load_manifest(o.manifest);
}

inline std::vector<FeatureRow> read_features(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec))
    throw MissingArtifact("features table not found: " + path.string() + " (run the features stage first)");
  const auto bytes = read_file_bytes(path);
  return parse_features_csv(std::string(bytes.begin(), bytes.end()));
}

inline fs::path stage_dir(const CliOptions& o, const char* stage) {
  const auto dir = fs::path(o.out) / stage;
  fs::create_directories(dir);
  return dir;
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

}  // namespace detail

inline int cmd_features(const CliOptions& o, std::ostream& err) {
  const auto cfg = detail::resolve_config(o);
  const auto m = detail::require_manifest(o);
  const auto res = compute_features(m, cfg.features, o.jobs);
  const auto dir = detail::stage_dir(o, "features");
  write_text_atomic(dir / "features.csv", write_features_csv(res.rows));
  detail::log_line(err, "features", std::to_string(res.rows.size()) + " rows -> " + (dir / "features.csv").string());
  return detail::report_failures(err, "features", res.failures);
}

inline int cmd_train(const CliOptions& o, std::ostream& err) {
  const auto cfg = detail::resolve_config(o);
  const auto path = o.features.empty() ? fs::path(o.out) / "features" / "features.csv" : fs::path(o.features);
  const auto rows = detail::read_features(path);
  const auto outcome = run_training(rows, cfg.train, o.seed, o.jobs);
  const auto dir = detail::stage_dir(o, "train");
  write_text_atomic(dir / "model.json", detail::dump(model_to_json(outcome.model)));
  write_text_atomic(dir / "cv_table.csv", cv_table_csv(outcome.search));
  nlohmann::json eval = eval_to_json(outcome.test);
  eval["selected"] = outcome.search.best.describe();
  eval["train_ids"] = outcome.split.train;
  eval["test_ids"] = outcome.split.test;
  write_text_atomic(dir / "eval.json", detail::dump(eval));
  detail::log_line(err, "train",
                   outcome.search.best.describe() + "  test F2=" + format_fixed(outcome.test.f2, 4) +
                       " accuracy=" + format_fixed(outcome.test.accuracy, 4));
  return kExitOk;
}

inline int cmd_assess(const CliOptions& o, std::ostream& err) {
  const auto cfg = detail::resolve_config(o);
  auto m = detail::require_manifest(o);
  const auto features_path = o.features.empty() ? fs::path(o.out) / "features" / "features.csv" : fs::path(o.features);
  const auto model_path = o.model.empty() ? fs::path(o.out) / "train" / "model.json" : fs::path(o.model);
  std::error_code ec;
  if (!fs::is_regular_file(model_path, ec))
    throw MissingArtifact("model not found: " + model_path.string() + " (run the train stage first)");
  const auto model_bytes = read_file_bytes(model_path);
  ClassifierModel model;
  try {
    model = model_from_json(nlohmann::json::parse(model_bytes.begin(), model_bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(IoError::Kind::corrupt_data, model_path.string() + ": " + e.what());
  }
  const auto rows = detail::read_features(features_path);
  std::map<std::string, const FeatureRow*> by_id;
  for (const auto& r : rows) by_id[r.image_id] = &r;

  FeatureMatrix X;
  std::vector<std::string> ids;
  std::vector<StageFailure> failures;
  for (const auto* e : m.sorted()) {
    const auto it = by_id.find(e->id);
    if (it == by_id.end()) {
      failures.push_back({e->id, "no row in " + features_path.string()});
      continue;
    }
    auto x = feature_vector(*it->second, model.schema);
    model.check_schema(x.size());
    X.push_back(std::move(x));
    ids.push_back(e->id);
  }

  const auto dir = detail::stage_dir(o, "assess");
  std::string verdicts = "image_id,probability_good,verdict\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto p = predict(model, X[i]);
    verdicts += ids[i] + ',' + format_double(p.probability) + ',' + (p.good ? "good" : "bad") + '\n';
    m.find(ids[i])->quality = p.good ? QualityLabel::good : QualityLabel::bad;
  }
  write_text_atomic(dir / "verdicts.csv", verdicts);
  save_manifest(dir / "manifest.json", rebase_manifest(m, dir));

  if (o.explain && !X.empty()) {
    const auto background = sample_background(X, o.background, o.seed);
    std::vector<ShapExplanation> expl(X.size());
    parallel_for(X.size(), o.jobs, [&](std::size_t i) {
      expl[i] = explain_shapley(model, X[i], background);
      expl[i].instance_id = ids[i];
    });
    const auto edir = dir / "explanations";
    fs::create_directories(edir);
    for (const auto& e : expl)
      write_text_atomic(edir / (detail::encode_component(e.instance_id) + ".explanation.json"),
                        detail::dump(explanation_to_json(e)));
    const auto summary = summarize_explanations(expl);
    write_text_atomic(dir / "explanation.json", detail::dump(render_explanation_json(summary)));
    write_text_atomic(dir / "explanation.txt", render_explanation_text(summary));
  }
  detail::log_line(err, "assess", std::to_string(ids.size()) + " images assessed");
  return detail::report_failures(err, "assess", failures);
}

inline int cmd_enhance(const CliOptions& o, std::ostream& err) {
  const auto cfg = detail::resolve_config(o);
  const auto m = detail::require_manifest(o);
  const auto dir = detail::stage_dir(o, "enhance");
  const auto entries = m.sorted();
  std::vector<std::optional<std::string>> errors(entries.size());
  parallel_for(entries.size(), o.jobs, [&](std::size_t i) {
    try {
      save_image(dir / (detail::encode_component(entries[i]->id) + ".enhanced.png"),
                 enhance_entry(m, *entries[i], cfg.enhance));
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  std::vector<StageFailure> failures;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (errors[i]) failures.push_back({entries[i]->id, *errors[i]});
  detail::log_line(err, "enhance", std::to_string(entries.size() - failures.size()) + " images enhanced");
  return detail::report_failures(err, "enhance", failures);
}

inline int cmd_postprocess(const CliOptions& o, std::ostream& err) {
  const auto cfg = detail::resolve_config(o);
  const auto m = detail::require_manifest(o);
  struct Job {
    const ManifestEntry* entry;
    LesionType lesion;
  };
  std::vector<Job> jobs;
  std::vector<StageFailure> failures;
  for (const auto* e : m.sorted()) {
    if (e->predictions.empty()) {
      failures.push_back({e->id, "missing predictions: no prediction masks listed"});
      continue;
    }
    for (const auto& [lesion, path] : e->predictions) jobs.push_back({e, lesion});
  }
  const auto dir = detail::stage_dir(o, "postprocess");
  std::vector<std::optional<std::string>> errors(jobs.size());
  parallel_for(jobs.size(), o.jobs, [&](std::size_t i) {
    const auto& j = jobs[i];
    try {
      save_mask(dir / (detail::encode_component(j.entry->id) + "." + std::string(to_string(j.lesion)) + ".pp.png"),
                suggestion_for(m, *j.entry, j.lesion, cfg.postprocess));
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < jobs.size(); ++i)
    if (errors[i]) failures.push_back({jobs[i].entry->id, *errors[i]});
  detail::log_line(err, "postprocess", std::to_string(jobs.size()) + " prediction masks filtered");
  return detail::report_failures(err, "postprocess", failures);
}

inline int cmd_agree(const CliOptions& o, std::ostream& err) {
  const auto cfg = detail::resolve_config(o);
  const auto m = detail::require_manifest(o);
  const auto dir = detail::stage_dir(o, "agree");
  const auto entries = m.sorted();
  std::vector<std::optional<AgreementReport>> reports(entries.size());
  std::vector<std::optional<std::string>> errors(entries.size());
  parallel_for(entries.size(), o.jobs, [&](std::size_t i) {
    try {
      reports[i] = agreement_for_entry(m, *entries[i], cfg.agreement);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  std::vector<AgreementReport> done;
  std::vector<StageFailure> failures;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (errors[i]) {
      failures.push_back({entries[i]->id, *errors[i]});
      continue;
    }
    const auto& r = *reports[i];
    const auto stem = detail::encode_component(r.image_id);
    write_text_atomic(dir / (stem + ".agreement.json"), detail::dump(report_to_json(r)));
    write_text_atomic(dir / (stem + ".agreement.txt"), report_to_text(r));
    done.push_back(r);
  }
  const auto summary = agreement_summary(done, failures);
  write_text_atomic(dir / "summary.json", detail::dump(summary));
  detail::log_line(err, "agree",
                   "kept " + summary["kept"].dump() + ", discarded " + summary["discarded"].dump() + ", insufficient " +
                       summary["insufficient"].dump());
  return detail::report_failures(err, "agree", failures);
}

inline int cmd_serve(const CliOptions& o, std::ostream& err) {
  const auto cfg = detail::resolve_config(o);
  if (o.manifest.empty()) throw InvalidArgument("--manifest is required");
  CurationStore store(o.manifest, cfg);
  httplib::Server server;
  register_routes(server, store);
  detail::log_line(err, "serve", "listening on " + o.bind + ":" + std::to_string(o.port));
  if (!server.listen(o.bind, o.port)) throw Error("cannot bind " + o.bind + ":" + std::to_string(o.port));
  return kExitOk;
}

/// Parses argv and runs one subcommand. Diagnostics go to `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Curation toolkit for diabetic-retinopathy fundus photographs", "retina_curator"};
  app.require_subcommand(1);
  CliOptions o;

  auto common = [&](CLI::App* sub, bool manifest) {
    if (manifest) sub->add_option("--manifest", o.manifest, "dataset manifest.json");
    sub->add_option("--out", o.out, "output directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "random seed")->capture_default_str();
    sub->add_option("--jobs", o.jobs, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--config", o.config, "JSON config with per-stage parameters");
  };

  auto* features = app.add_subcommand("features", "extract quality features to features.csv");
  common(features, true);

  auto* train = app.add_subcommand("train", "grid-search, fit and evaluate the quality classifier");
  common(train, false);
  train->add_option("--features", o.features, "features.csv (default <out>/features/features.csv)");
  train->add_option("--model-kind", o.model_kind, "forest or logistic");
  train->add_option("--ratio", o.ratio, "training fraction of the stratified split");
  train->add_option("--folds", o.folds, "cross-validation folds");

  auto* assess = app.add_subcommand("assess", "label images good/bad with a trained model");
  common(assess, true);
  assess->add_option("--features", o.features, "features.csv (default <out>/features/features.csv)");
  assess->add_option("--model", o.model, "model.json (default <out>/train/model.json)");
  assess->add_flag("--explain", o.explain, "write Shapley explanations");
  assess->add_option("--background", o.background, "background rows for explanations")->capture_default_str();

  auto* enh = app.add_subcommand("enhance", "CLAHE on lightness plus gamma correction");
  common(enh, true);
  enh->add_option("--clip", o.clip, "CLAHE clip limit (multiple of the mean bin height)");
  enh->add_option("--gamma", o.gamma, "gamma exponent");
  enh->add_option("--grid", o.grid, "CLAHE tiles per side");

  auto* pp = app.add_subcommand("postprocess", "filter predicted lesion masks");
  common(pp, true);
  pp->add_option("--window", o.window, "local statistics window (odd)");
  pp->add_option("--min-area", o.min_area, "minimum component area");

  auto* agree = app.add_subcommand("agree", "inter-annotator agreement and keep/discard verdicts");
  common(agree, true);
  agree->add_option("--pairwise-low", o.pairwise_low, "low pairwise agreement threshold");
  agree->add_option("--overall-discard", o.overall_discard, "discard images scoring below this");
  agree->add_option("--outlier-count", o.outlier_count, "low-agreement peers tolerated per annotator");

  auto* serve = app.add_subcommand("serve", "HTTP service over a manifest directory");
  common(serve, true);
  serve->add_option("--bind", o.bind, "bind address")->capture_default_str();
  serve->add_option("--port", o.port, "TCP port")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*features) return cmd_features(o, err);
    if (*train) return cmd_train(o, err);
    if (*assess) return cmd_assess(o, err);
    if (*enh) return cmd_enhance(o, err);
    if (*pp) return cmd_postprocess(o, err);
    if (*agree) return cmd_agree(o, err);
    if (*serve) return cmd_serve(o, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFatal;
  }
  return kExitFatal;
}

}  // namespace retina
