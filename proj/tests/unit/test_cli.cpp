#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bayeslayers/parallel.hpp"
#include "commands.hpp"
#include "run_config.hpp"

using namespace bayeslayers;
using namespace bayeslayers::app;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path root;
  explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / ("bayeslayers_cli_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }

  fs::path config(const std::string& name, const json& doc) const {
    const fs::path path = root / (name + ".json");
    std::ofstream(path) << doc.dump(2);
    return path;
  }
  fs::path dir(const std::string& name) const {
    fs::create_directories(root / name);
    return root / name;
  }
};

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "bayeslayers");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  return json::parse(in);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json small_blobs(const std::string& out) {
  return {{"dataset", {{"generator", "blobs"}, {"seed", 0}, {"n_per_class", 60}}},
          {"architecture", "micro-mlp"},
          {"train", {{"epochs", 15}}},
          {"policy", "linear_all"},
          {"mc_samples", 8},
          {"seed", 0},
          {"out", out}};
}

}  // namespace

TEST_CASE("gen-data writes a reproducible manifest") {
  Workspace ws("gen");
  const auto cfg = ws.config("c", small_blobs("data"));
  ws.dir("data");
  REQUIRE(run({"gen-data", "--config", cfg.string()}) == 0);
  const json first = read_json(ws.root / "data" / "manifest.json");
  CHECK(first["provenance"]["seed"] == 0);
  REQUIRE(run({"gen-data", "--config", cfg.string()}) == 0);
  CHECK(read_json(ws.root / "data" / "manifest.json")["digest"] == first["digest"]);
  REQUIRE(run({"gen-data", "--config", cfg.string(), "--seed", "4"}) == 0);
  CHECK(read_json(ws.root / "data" / "manifest.json")["digest"] == first["digest"]);  // dataset seed is separate

  CHECK(run({"gen-data", "--config", cfg.string(), "--out", (ws.root / "nowhere").string()}) == kExitIo);
}

TEST_CASE("configuration problems exit with code 2") {
  Workspace ws("config");
  ws.dir("out");
  json bad_arch = small_blobs("out");
  bad_arch["architecture"] = "resnet-50";
  CHECK(run({"train", "--config", ws.config("a", bad_arch).string()}) == kExitConfig);
  json unknown = small_blobs("out");
  unknown["learning_rate"] = 0.1;
  CHECK(run({"train", "--config", ws.config("b", unknown).string()}) == kExitConfig);
  json bad_alpha = small_blobs("out");
  bad_alpha["alpha"] = -1;
  CHECK(run({"eval", "--config", ws.config("c", bad_alpha).string()}) == kExitConfig);
  json bad_policy = small_blobs("out");
  bad_policy["policy"] = "most";
  CHECK(run({"eval", "--config", ws.config("d", bad_policy).string()}) == kExitConfig);
  std::ofstream(ws.root / "broken.json") << "{ not json";
  CHECK(run({"train", "--config", (ws.root / "broken.json").string()}) == kExitConfig);
  CHECK(run({"train"}) == kExitConfig);
  CHECK(run({"frobnicate"}) == kExitConfig);
  CHECK(run({"train", "--config", (ws.root / "absent.json").string()}) == kExitIo);
}

TEST_CASE("train is deterministic and separates blobs") {
  Workspace ws("train");
  ws.dir("a");
  ws.dir("b");
  const auto cfg = ws.config("c", small_blobs("a"));
  REQUIRE(run({"train", "--config", cfg.string()}) == 0);
  REQUIRE(run({"train", "--config", cfg.string(), "--out", (ws.root / "b").string()}) == 0);
  CHECK(read_file(ws.root / "a" / "model.blyr") == read_file(ws.root / "b" / "model.blyr"));
  CHECK(read_json(ws.root / "a" / "train.json")["train_accuracy"].get<double>() >= 0.95);
  const std::string curve = read_file(ws.root / "a" / "loss_curve.csv");
  CHECK(curve.rfind("epoch,loss,accuracy\n", 0) == 0);
  CHECK(std::count(curve.begin(), curve.end(), '\n') == 16);
}

TEST_CASE("divergent training exits with code 4") {
  Workspace ws("diverge");
  ws.dir("out");
  json doc = small_blobs("out");
  doc["train"] = {{"learning_rate", 1e200}, {"epochs", 3}};
  CHECK(run({"train", "--config", ws.config("c", doc).string()}) == kExitDivergence);
}

TEST_CASE("eval: determinism across threads, baseline equivalence, exhaustion") {
  Workspace ws("eval");
  ws.dir("out");
  const auto cfg = ws.config("c", small_blobs("out"));
  REQUIRE(run({"train", "--config", cfg.string()}) == 0);

  REQUIRE(run({"eval", "--config", cfg.string(), "--threads", "1"}) == 0);
  const json one = read_json(ws.root / "out" / "report.json");
  REQUIRE(run({"eval", "--config", cfg.string(), "--threads", "8"}) == 0);
  const json eight = read_json(ws.root / "out" / "report.json");
  CHECK(one["metrics"].dump() == eight["metrics"].dump());
  CHECK(one["config"] == eight["config"]);
  for (const char* key : {"fpr95", "auroc", "id_accuracy", "gamma"}) CHECK(one["metrics"].contains(key));
  CHECK(one["metrics"]["box_iou_accuracy"].is_null());
  CHECK(one["timings"]["threads"] == 1);
  // Confident ID inputs saturate S at the largest double below 1, so only part of the set shows spread.
  CHECK(one["metrics"]["positive_score_std_fraction"].get<double>() > 0.0);

  const std::string scores = read_file(ws.root / "out" / "scores.csv");
  CHECK(std::count(scores.begin(), scores.end(), '\n') == 1 + 180 + 60);
  CHECK(read_file(ws.root / "out" / "roc.csv").rfind("threshold,tpr,fpr\ninf,0,0\n", 0) == 0);

  json none = small_blobs("out");
  none["policy"] = "none";
  none["mc_samples"] = 1;
  REQUIRE(run({"eval", "--config", ws.config("n1", none).string()}) == 0);
  const json t1 = read_json(ws.root / "out" / "report.json");
  none["mc_samples"] = 25;
  REQUIRE(run({"eval", "--config", ws.config("n25", none).string()}) == 0);
  const json t25 = read_json(ws.root / "out" / "report.json");
  CHECK(t1["metrics"].dump() == t25["metrics"].dump());
  CHECK(t1["metrics"]["positive_score_std_fraction"] == 0.0);

  json starved = small_blobs("out");
  starved["epsilon_quantile"] = 0.9;
  starved["max_rejection_attempts"] = 1;
  CHECK(run({"eval", "--config", ws.config("s", starved).string()}) == kExitSamplerExhausted);

  CHECK(run({"eval", "--config", cfg.string(), "--model", (ws.root / "none.blyr").string()}) == kExitIo);
  std::ofstream(ws.root / "junk.blyr") << "JUNKJUNKJUNK";
  CHECK(run({"eval", "--config", cfg.string(), "--model", (ws.root / "junk.blyr").string()}) == kExitIo);
}

TEST_CASE("thread count defaults to the environment") {
  ::setenv("BAYESLAYERS_THREADS", "3", 1);
  CHECK(default_thread_count() == 3);
  CHECK(parse_run_config(small_blobs("."), ".").threads == 3);
  ::unsetenv("BAYESLAYERS_THREADS");
  CHECK(default_thread_count() >= 1);
}

TEST_CASE("calibrate reports the threshold used by eval") {
  Workspace ws("calibrate");
  ws.dir("out");
  const auto cfg = ws.config("c", small_blobs("out"));
  REQUIRE(run({"train", "--config", cfg.string()}) == 0);
  REQUIRE(run({"calibrate", "--config", cfg.string()}) == 0);
  REQUIRE(run({"eval", "--config", cfg.string()}) == 0);
  CHECK(read_json(ws.root / "out" / "calibration.json")["gamma"] ==
        read_json(ws.root / "out" / "report.json")["metrics"]["gamma"]);
}

TEST_CASE("ablate-layers emits six rows in policy order") {
  Workspace ws("ablate");
  ws.dir("out");
  ws.dir("solo");
  json doc = small_blobs("out");
  doc["seed"] = 10;
  const auto cfg = ws.config("c", doc);
  REQUIRE(run({"train", "--config", cfg.string()}) == 0);
  REQUIRE(run({"ablate-layers", "--config", cfg.string()}) == 0);
  const json table = read_json(ws.root / "out" / "ablation.json");
  REQUIRE(table["rows"].size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(table["rows"][i]["policy"] == std::string(to_string(kAllPolicies[i])));
    CHECK(table["rows"][i]["seed"] == 10 + i);
  }
  const std::string csv = read_file(ws.root / "out" / "ablation.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);

  json none = doc;
  none["policy"] = "none";
  none["model"] = (ws.root / "out" / "model.blyr").string();
  REQUIRE(run({"eval", "--config", ws.config("n", none).string(), "--out", (ws.root / "solo").string()}) == 0);
  CHECK(read_json(ws.root / "solo" / "report.json")["metrics"] == table["rows"][0]["metrics"]);

  // Each row reruns on its own from the recorded seed.
  json linear = doc;
  linear["policy"] = "linear_all";
  linear["seed"] = table["rows"][4]["seed"];
  linear["model"] = none["model"];
  REQUIRE(run({"eval", "--config", ws.config("l", linear).string(), "--out", (ws.root / "solo").string()}) == 0);
  CHECK(read_json(ws.root / "solo" / "report.json")["metrics"] == table["rows"][4]["metrics"]);
}

TEST_CASE("report aggregates mean and sample standard deviation") {
  Workspace ws("report");
  const json config = {{"policy", "none"}};
  std::vector<std::string> paths;
  const std::vector<double> auroc{0.91, 0.93, 0.92, 0.95, 0.89};
  for (std::size_t i = 0; i < auroc.size(); ++i) {
    const json report = {{"schema", "bayeslayers.report/1"},
                         {"metrics", {{"auroc", auroc[i]}, {"fpr95", 0.1 * double(i)}, {"box_iou_accuracy", nullptr}}},
                         {"config", config},
                         {"seed", i},
                         {"timings", {{"total_seconds", 1.0 + double(i)}}}};
    paths.push_back(ws.config("r" + std::to_string(i), report).string());
  }
  std::vector<fs::path> fpaths(paths.begin(), paths.end());
  const json summary = cmd_report(fpaths, ws.root);
  double mean = 0.0;
  for (double v : auroc) mean += v;
  mean /= 5.0;
  double ss = 0.0;
  for (double v : auroc) ss += (v - mean) * (v - mean);
  CHECK(summary["metrics"]["auroc"]["mean"].get<double>() == doctest::Approx(mean).epsilon(1e-15));
  CHECK(summary["metrics"]["auroc"]["std"].get<double>() == doctest::Approx(std::sqrt(ss / 4.0)).epsilon(1e-15));
  CHECK(summary["metrics"]["auroc"]["values"] == json(auroc));
  CHECK(summary["metrics"]["box_iou_accuracy"]["mean"].is_null());
  CHECK_FALSE(summary["metrics"].contains("total_seconds"));
  CHECK(format_summary(summary).find("auroc") != std::string::npos);

  const json single = cmd_report({fpaths[0]}, ws.root);
  CHECK(single["metrics"]["auroc"]["std"] == 0.0);
  CHECK(single["metrics"]["auroc"]["mean"] == 0.91);

  std::vector<std::string> args{"report"};
  args.insert(args.end(), paths.begin(), paths.end());
  args.insert(args.end(), {"--out", ws.root.string()});
  CHECK(run(args) == 0);
  CHECK(read_file(ws.root / "summary.csv").rfind("metric,mean,std,n\n", 0) == 0);

  const json other = {{"schema", "bayeslayers.report/1"},
                      {"metrics", {{"auroc", 0.5}}},
                      {"config", {{"policy", "full"}}},
                      {"seed", 9}};
  CHECK(run({"report", paths[0], ws.config("other", other).string(), "--out", ws.root.string()}) == kExitConfig);
  CHECK(run({"report", ws.config("bogus", {{"schema", "x"}}).string(), "--out", ws.root.string()}) == kExitConfig);
}

TEST_CASE("report metrics survive aggregation exactly") {
  Workspace ws("roundtrip");
  ws.dir("out");
  const auto cfg = ws.config("c", small_blobs("out"));
  REQUIRE(run({"train", "--config", cfg.string()}) == 0);
  REQUIRE(run({"eval", "--config", cfg.string()}) == 0);
  const json report = read_json(ws.root / "out" / "report.json");
  const json summary = cmd_report({ws.root / "out" / "report.json"}, ws.root);
  for (const auto& [name, value] : report["metrics"].items()) {
    if (value.is_number()) CHECK(summary["metrics"][name]["values"][0] == value);
    if (value.is_number()) CHECK(summary["metrics"][name]["mean"].get<double>() == value.get<double>());
  }
}
