#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "retina/cli.hpp"
#include "support/synthetic.hpp"

using namespace retina;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "retina_curator");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  return files;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, RequiresSubcommand) {
  EXPECT_NE(run({}).code, 0);
  EXPECT_NE(run({"bogus"}).code, 0);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, FeaturesOnThreeImages) {
  synth::TempDir dir;
  const auto manifest = synth::write_dataset(dir.path(), 2, 1, 11);
  const auto r = run({"features", "--manifest", manifest.string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  const auto csv = slurp(dir / "out/features/features.csv");
  EXPECT_EQ(lines(csv), 4u);
  EXPECT_EQ(csv.substr(0, kFeatureCsvHeader.size()), kFeatureCsvHeader);
  const auto rows = parse_features_csv(csv);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].image_id, "bad_2");
  EXPECT_EQ(rows[1].image_id, "good_0");
}

TEST(Cli, EmptyManifestWritesHeaderOnly) {
  synth::TempDir dir;
  synth::write_json(dir / "manifest.json", {{"images", nlohmann::json::array()}});
  const auto r = run({"features", "--manifest", (dir / "manifest.json").string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(slurp(dir / "out/features/features.csv"), std::string(kFeatureCsvHeader) + "\n");
}

TEST(Cli, CorruptImageIsPartialFailure) {
  synth::TempDir dir;
  const auto manifest = synth::write_dataset(dir.path(), 2, 1, 12);
  std::ofstream(dir / "images/good_1.png") << "not a png";
  const auto r = run({"features", "--manifest", manifest.string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitPartial);
  EXPECT_NE(r.err.find("good_1"), std::string::npos);
  EXPECT_EQ(parse_features_csv(slurp(dir / "out/features/features.csv")).size(), 2u);
}

TEST(Cli, MissingManifestIsFatal) {
  synth::TempDir dir;
  const auto r = run({"features", "--manifest", (dir / "nope.json").string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitFatal);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(Cli, TrainThenAssessLabelsImages) {
  synth::TempDir dir;
  const auto manifest = synth::write_dataset(dir.path(), 20, 20, 13);
  const auto out = (dir / "out").string();
  ASSERT_EQ(run({"features", "--manifest", manifest.string(), "--out", out}).code, kExitOk);
  const auto t = run({"train", "--out", out, "--seed", "3"});
  ASSERT_EQ(t.code, kExitOk) << t.err;
  for (auto f : {"model.json", "cv_table.csv", "eval.json"}) EXPECT_TRUE(fs::exists(dir / "out/train" / f)) << f;
  const auto eval = nlohmann::json::parse(slurp(dir / "out/train/eval.json"));
  EXPECT_EQ(eval["train_ids"].size() + eval["test_ids"].size(), 40u);
  EXPECT_EQ(lines(slurp(dir / "out/train/cv_table.csv")), 5u);

  const auto a = run({"assess", "--manifest", manifest.string(), "--out", out, "--explain"});
  ASSERT_EQ(a.code, kExitOk) << a.err;
  const auto verdicts = slurp(dir / "out/assess/verdicts.csv");
  EXPECT_EQ(lines(verdicts), 41u);
  std::istringstream in(verdicts);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "image_id,probability_good,verdict");
  int correct = 0;
  while (std::getline(in, line)) {
    const bool good_id = line.rfind("good_", 0) == 0;
    const bool good_verdict = line.substr(line.rfind(',') + 1) == "good";
    correct += good_id == good_verdict;
  }
  EXPECT_GE(correct, 38);

  const auto labeled = load_manifest(dir / "out/assess/manifest.json");
  EXPECT_EQ(labeled.entries().size(), 40u);
  for (const auto& e : labeled.entries()) EXPECT_TRUE(e.quality.has_value());

  EXPECT_TRUE(fs::exists(dir / "out/assess/explanation.json"));
  EXPECT_TRUE(fs::exists(dir / "out/assess/explanation.txt"));
  EXPECT_TRUE(fs::exists(dir / "out/assess/explanations/good_0.explanation.json"));
  const auto ex = nlohmann::json::parse(slurp(dir / "out/assess/explanations/good_0.explanation.json"));
  double sum = ex["base_value"].get<double>();
  for (const auto& c : ex["contributions"]) sum += c["phi"].get<double>();
  EXPECT_NEAR(sum, ex["prediction"].get<double>(), 1e-9);
}

TEST(Cli, AssessRejectsModelWithForeignSchema) {
  synth::TempDir dir;
  const auto manifest = synth::write_dataset(dir.path(), 3, 3, 14);
  const auto out = (dir / "out").string();
  ASSERT_EQ(run({"features", "--manifest", manifest.string(), "--out", out}).code, kExitOk);
  ClassifierModel m;
  m.schema = {"brightness", "redness"};
  m.mean = {0, 0};
  m.scale = {1, 1};
  m.weights = {0, 0};
  synth::write_json(dir / "model.json", model_to_json(m));
  const auto r = run({"assess", "--manifest", manifest.string(), "--out", out, "--model", (dir / "model.json").string()});
  EXPECT_EQ(r.code, kExitFatal);
  EXPECT_NE(r.err.find("redness"), std::string::npos);
}

TEST(Cli, AssessWithoutModelIsFatal) {
  synth::TempDir dir;
  const auto manifest = synth::write_dataset(dir.path(), 1, 1, 15);
  const auto r = run({"assess", "--manifest", manifest.string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitFatal);
  EXPECT_NE(r.err.find("model not found"), std::string::npos);
}

TEST(Cli, EnhanceWritesOnePng) {
  synth::TempDir dir;
  const auto manifest = synth::write_dataset(dir.path(), 1, 0, 16);
  const auto r = run({"enhance", "--manifest", manifest.string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  const auto files = tree(dir / "out/enhance");
  ASSERT_EQ(files.size(), 1u);
  EXPECT_EQ(files.begin()->first, "good_0.enhanced.png");
  const auto img = load_image(dir / "out/enhance/good_0.enhanced.png");
  EXPECT_EQ(img.channels(), 3);
}

TEST(Cli, PostprocessWithoutPredictionsReportsThem) {
  synth::TempDir dir;
  const auto manifest = synth::write_dataset(dir.path(), 2, 0, 17);
  auto j = nlohmann::json::parse(slurp(manifest));
  j["images"][1]["predictions"] = nlohmann::json::object();
  synth::write_json(manifest, j);
  const auto r = run({"postprocess", "--manifest", manifest.string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitPartial);
  EXPECT_NE(r.err.find("missing predictions"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "out/postprocess/good_0.EX.pp.png"));
  EXPECT_TRUE(fs::exists(dir / "out/postprocess/good_0.HA.pp.png"));
  EXPECT_FALSE(fs::exists(dir / "out/postprocess/good_1.EX.pp.png"));
  const auto pred = load_mask(dir / "masks/good_0.pred.EX.png");
  EXPECT_TRUE(load_mask(dir / "out/postprocess/good_0.EX.pp.png").subset_of(pred));
}

TEST(Cli, AgreeOnIdenticalAnnotationsKeeps) {
  synth::TempDir dir;
  const auto manifest = synth::write_dataset(dir.path(), 2, 0, 18);
  const auto r = run({"agree", "--manifest", manifest.string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  const auto rep = nlohmann::json::parse(slurp(dir / "out/agree/good_0.agreement.json"));
  EXPECT_EQ(rep["verdict"], "keep");
  EXPECT_DOUBLE_EQ(rep["rows"][0]["kappa"].get<double>(), 1.0);
  EXPECT_TRUE(fs::exists(dir / "out/agree/good_0.agreement.txt"));
  const auto summary = nlohmann::json::parse(slurp(dir / "out/agree/summary.json"));
  EXPECT_EQ(summary["kept"], 2);
  EXPECT_EQ(summary["discarded"], 0);
}

TEST(Cli, AgreeThresholdOverride) {
  synth::TempDir dir;
  const auto manifest = synth::write_dataset(dir.path(), 1, 0, 19);
  save_mask(dir / "masks/good_0.ann_b.EX.png", synth::rect_mask(64, 64, 21, 21, 13, 10));
  const auto r = run({"agree", "--manifest", manifest.string(), "--out", (dir / "out").string(),
                      "--overall-discard", "1.0"});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  const auto rep = nlohmann::json::parse(slurp(dir / "out/agree/good_0.agreement.json"));
  EXPECT_LT(rep["score"].get<double>(), 1.0);
  EXPECT_EQ(rep["verdict"], "discard");
}

TEST(Cli, ConfigFileAndUnknownKeys) {
  synth::TempDir dir;
  const auto manifest = synth::write_dataset(dir.path(), 1, 0, 20);
  save_mask(dir / "masks/good_0.ann_b.EX.png", synth::rect_mask(64, 64, 21, 21, 13, 10));
  synth::write_json(dir / "cfg.json", {{"agreement", {{"overall_discard", 1.0}}}});
  auto r = run({"agree", "--manifest", manifest.string(), "--out", (dir / "out").string(), "--config",
                (dir / "cfg.json").string()});
  EXPECT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "out/agree/good_0.agreement.json"))["verdict"], "discard");
  synth::write_json(dir / "bad.json", {{"agreement", {{"overall_discrad", 1.0}}}});
  r = run({"agree", "--manifest", manifest.string(), "--out", (dir / "out").string(), "--config",
           (dir / "bad.json").string()});
  EXPECT_EQ(r.code, kExitFatal);
  EXPECT_NE(r.err.find("overall_discrad"), std::string::npos);
}

TEST(Cli, SameSeedGivesIdenticalArtifacts) {
  synth::TempDir dir;
  const auto manifest = synth::write_dataset(dir.path(), 8, 8, 21);
  auto pipeline = [&](const std::string& name, const std::string& jobs) {
    const auto out = (dir / name).string();
    for (auto stage : {"features", "train", "assess", "enhance", "postprocess", "agree"}) {
      std::vector<std::string> args{stage, "--out", out, "--seed", "5", "--jobs", jobs};
      if (std::string(stage) != "train") {
        args.push_back("--manifest");
        args.push_back(manifest.string());
      }
      if (std::string(stage) == "assess") args.push_back("--explain");
      const auto r = run(args);
      EXPECT_EQ(r.code, kExitOk) << stage << ": " << r.err;
    }
    return tree(dir / name);
  };
  const auto a = pipeline("run_a", "1");
  const auto b = pipeline("run_b", "1");
  const auto c = pipeline("run_c", "3");
  EXPECT_GT(a.size(), 40u);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}
