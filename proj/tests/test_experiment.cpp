#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include "tailseg/experiment.hpp"

using namespace tailseg;
namespace fs = std::filesystem;

namespace {

/// Tiny config that trains in milliseconds, for artifact plumbing tests.
ExperimentConfig tiny_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.scene.class_count = 3;
  cfg.scene.points_per_head = 30;
  cfg.scene.imbalance_ratio = 3.0;
  cfg.scene.default_sigma = 0.2;
  cfg.percent = 0.2;
  cfg.train.outer_iterations = 2;
  cfg.train.backbone_epochs = 2;
  cfg.train.classifier_epochs = 4;
  cfg.train.pretrain_epochs = 4;
  cfg.train.hidden_width = 8;
  cfg.train.knn_k = 4;
  cfg.seeds = {1, 2};
  cfg.output_dir = out_dir;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("tailseg_test_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("ablation names cover every switch combination uniquely") {
  std::set<std::string> seen;
  for (bool two_round : {true, false})
    for (bool focal : {true, false})
      for (bool decoupled : {true, false})
        for (ClassifierLabelMode mode :
             {ClassifierLabelMode::GroundTruth, ClassifierLabelMode::Pseudo,
              ClassifierLabelMode::GroundTruthAndPseudo}) {
          AblationSwitches a{two_round, focal, decoupled, mode};
          const std::string name = ablation_name(a);
          CHECK(seen.insert(name).second);

          // the name parses back to the same switches
          const AblationSwitches b = parse_ablation_row(name);
          CHECK(b.two_round == a.two_round);
          CHECK(b.focal == a.focal);
          CHECK(b.decoupled == a.decoupled);
          CHECK(b.label_mode == a.label_mode);
        }
  CHECK(seen.size() == 24);
  CHECK(seen.count("full") == 1);
  CHECK_THROWS_AS(parse_ablation_row("no-such-row"), std::invalid_argument);
}

TEST_CASE("config parsing fills defaults and names bad fields") {
  const ExperimentConfig cfg = config_from_json(nlohmann::json::object());
  CHECK(cfg.scene.class_count == 6);
  CHECK(cfg.scene.points_per_head == 2000);
  CHECK(cfg.scene.imbalance_ratio == 50.0);
  CHECK(cfg.percent == 0.01);
  CHECK(cfg.train.outer_iterations == 10);
  CHECK(cfg.train.backbone_epochs == 30);
  CHECK(cfg.train.classifier_epochs == 100);
  CHECK(cfg.train.pretrain_epochs == 100);
  CHECK(cfg.train.selector.delta_len == 0.1);
  CHECK(cfg.train.selector.delta_d == 0.5);
  CHECK(cfg.train.selector.beta == 0.5);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2, 3, 4, 5});

  const auto parsed = config_from_json(nlohmann::json::parse(R"({
    "scene": {"classes": 4, "points_per_head": 100, "imbalance_ratio": 10.0, "sigma": 0.3},
    "labeling": {"protocol": "one-point"},
    "train": {"outer_iterations": 3, "selector": {"beta": 0.25}},
    "ablation": {"focal": false},
    "seeds": [7],
    "output_dir": "out"
  })"));
  CHECK(parsed.scene.class_count == 4);
  CHECK(parsed.protocol == LabelProtocol::OnePoint);
  CHECK(parsed.train.outer_iterations == 3);
  CHECK(parsed.train.selector.beta == 0.25);
  CHECK_FALSE(parsed.ablation.focal);
  CHECK(parsed.seeds == std::vector<std::uint64_t>{7});
  CHECK(parsed.output_dir == "out");

  using Catch::Matchers::ContainsSubstring;
  CHECK_THROWS_WITH(
      config_from_json(nlohmann::json::parse(R"({"scene": {"clases": 4}})")),
      ContainsSubstring("unknown key 'clases'"));
  CHECK_THROWS_WITH(
      config_from_json(nlohmann::json::parse(R"({"train": {"inner_lr": "fast"}})")),
      ContainsSubstring("train.inner_lr"));
  CHECK_THROWS_WITH(
      config_from_json(nlohmann::json::parse(R"({"labeling": {"protocol": "all"}})")),
      ContainsSubstring("labeling.protocol"));
  CHECK_THROWS_WITH(config_from_json(nlohmann::json::parse(R"({"seeds": []})")),
                    ContainsSubstring("seeds"));
  CHECK_THROWS_WITH(
      config_from_json(nlohmann::json::parse(R"({"bogus": 1})")),
      ContainsSubstring("unknown key 'bogus'"));
}

TEST_CASE("joint training rejects a classifier label mode") {
  nlohmann::json j = nlohmann::json::parse(
      R"({"ablation": {"decoupled": false, "label_mode": "pseudo"}})");
  CHECK_THROWS_AS(config_from_json(j), std::invalid_argument);
  // joint alone is fine
  j["ablation"].erase("label_mode");
  CHECK_NOTHROW(config_from_json(j));
}

TEST_CASE("two-round switch maps onto the selector's beta") {
  ExperimentConfig cfg;
  cfg.ablation.two_round = false;
  const TrainConfig t = resolve_train_config(cfg, 9);
  CHECK(t.selector.beta == 0.0);
  CHECK(t.seed == 9);

  cfg.ablation.two_round = true;
  CHECK(resolve_train_config(cfg, 9).selector.beta == cfg.train.selector.beta);
}

TEST_CASE("config round-trips through canonical json") {
  ExperimentConfig cfg;
  cfg.scene.class_count = 4;
  cfg.percent = 0.05;
  cfg.train.outer_iterations = 7;
  cfg.ablation.focal = false;
  cfg.seeds = {3, 9};
  cfg.output_dir = "elsewhere";

  const ExperimentConfig back = config_from_json(config_to_json(cfg));
  CHECK(config_to_json(back) == config_to_json(cfg));
  CHECK(config_hash(back) == config_hash(cfg));
  cfg.train.inner_lr = 0.5;
  CHECK(config_hash(back) != config_hash(cfg));
}

TEST_CASE("overrides rewrite nested config fields") {
  nlohmann::json j = nlohmann::json::object();
  apply_override(j, "train.outer_iterations=4");
  apply_override(j, "train.selector.beta=0.125");
  apply_override(j, "ablation.focal=false");
  apply_override(j, "output_dir=custom");
  apply_override(j, "seeds=[11]");

  const ExperimentConfig cfg = config_from_json(j);
  CHECK(cfg.train.outer_iterations == 4);
  CHECK(cfg.train.selector.beta == 0.125);
  CHECK_FALSE(cfg.ablation.focal);
  CHECK(cfg.output_dir == "custom");
  CHECK(cfg.seeds == std::vector<std::uint64_t>{11});

  CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(j, "=5"), std::invalid_argument);
}

TEST_CASE("missing config files are reported by path") {
  CHECK_THROWS_WITH(
      load_config("/nonexistent/lab.json"),
      Catch::Matchers::ContainsSubstring("/nonexistent/lab.json"));
}

TEST_CASE("a seed run writes the full artifact set with manifest last") {
  TempDir tmp("seedrun");
  const ExperimentConfig cfg = tiny_config((tmp.path / "runs").string());
  const std::string dir = (tmp.path / "runs" / "full" / "seed1").string();

  const SeedRunResult result = run_experiment_seed(cfg, 1, dir);
  CHECK(result.seed == 1);
  CHECK(result.records.size() == 2);

  for (const char* name :
       {"scene.txt", "metrics.csv", "pseudo_labels.csv", "focus_stats.csv",
        "checkpoint_iter01.bin", "checkpoint_iter02.bin", "manifest.json"})
    CHECK(fs::exists(fs::path(dir) / name));

  const auto manifest = nlohmann::json::parse(slurp(fs::path(dir) / "manifest.json"));
  CHECK(manifest["ablation"] == "full");
  CHECK(manifest["seed"] == 1);
  CHECK(manifest["config"]["scene"]["classes"] == 3);
  CHECK(manifest["artifacts"].contains("metrics.csv"));
  CHECK(manifest["artifacts"].contains("checkpoint_iter02.bin"));
  CHECK(manifest["wall_seconds"].is_number());

  // recorded hashes match the files on disk
  for (const auto& [name, hex] : manifest["artifacts"].items()) {
    const std::string content = slurp(fs::path(dir) / name);
    char expect[20];
    std::snprintf(expect, sizeof expect, "%016llx",
                  static_cast<unsigned long long>(fnv1a64_str(content)));
    CHECK(hex.get<std::string>() == expect);
  }

  // metrics csv has the expected shape: header plus rows for 2 iterations
  const std::string metrics = slurp(fs::path(dir) / "metrics.csv");
  CHECK(metrics.rfind("iteration,kind,key,value\n", 0) == 0);
  CHECK(metrics.find("\n1,miou,,") != std::string::npos);
  CHECK(metrics.find("\n2,miou,,") != std::string::npos);
  CHECK(metrics.find("\n2,group_iou,tail,") != std::string::npos);

  // the final checkpoint reloads and reports the right iteration
  const auto info = run_checkpoint_from_bytes(
      read_file_bytes((fs::path(dir) / "checkpoint_iter02.bin").string()));
  CHECK(info.iteration == 2);
  CHECK(info.K == cfg.train.knn_k);
}

TEST_CASE("identical reruns produce byte-identical artifacts") {
  TempDir tmp("rerun");
  const ExperimentConfig cfg = tiny_config((tmp.path / "runs").string());

  const std::string a = (tmp.path / "a").string();
  const std::string b = (tmp.path / "b").string();
  run_experiment_seed(cfg, 2, a);
  run_experiment_seed(cfg, 2, b);

  for (const char* name : {"scene.txt", "metrics.csv", "pseudo_labels.csv",
                           "focus_stats.csv", "checkpoint_iter01.bin",
                           "checkpoint_iter02.bin"})
    CHECK(slurp(fs::path(a) / name) == slurp(fs::path(b) / name));

  // manifests may differ only in wall_seconds
  auto ma = nlohmann::json::parse(slurp(fs::path(a) / "manifest.json"));
  auto mb = nlohmann::json::parse(slurp(fs::path(b) / "manifest.json"));
  ma.erase("wall_seconds");
  mb.erase("wall_seconds");
  CHECK(ma == mb);
}

TEST_CASE("run_experiment lays out one directory per seed") {
  TempDir tmp("multi");
  ExperimentConfig cfg = tiny_config((tmp.path / "runs").string());
  cfg.train.outer_iterations = 1;

  const auto results = run_experiment(cfg);
  REQUIRE(results.size() == 2);
  CHECK(fs::exists(tmp.path / "runs" / "full" / "seed1" / "manifest.json"));
  CHECK(fs::exists(tmp.path / "runs" / "full" / "seed2" / "manifest.json"));
}

TEST_CASE("ablation sweep writes one summary row per requested combo") {
  TempDir tmp("ablate");
  ExperimentConfig cfg = tiny_config((tmp.path / "runs").string());
  cfg.train.outer_iterations = 1;
  cfg.train.classifier_epochs = 2;
  cfg.seeds = {1, 2, 3};

  const auto summaries = run_ablation(cfg, {"full", "no-focal"});
  REQUIRE(summaries.size() == 2);
  CHECK(summaries[0].name == "full");
  CHECK(summaries[1].name == "no-focal");
  CHECK(summaries[0].seed_count == 3);
  CHECK(summaries[0].miou_min <= summaries[0].miou_mean);
  CHECK(summaries[0].miou_mean <= summaries[0].miou_max);

  // 2 combos x 3 seeds = 6 run directories and a 2-row summary file
  std::size_t manifests = 0;
  for (const auto& entry : fs::recursive_directory_iterator(tmp.path / "runs"))
    if (entry.path().filename() == "manifest.json") ++manifests;
  CHECK(manifests == 6);

  const std::string csv = slurp(tmp.path / "runs" / "summary.csv");
  CHECK(csv.rfind(summary_csv_header(), 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 rows
  CHECK(csv.find("\nfull,3,") != std::string::npos);
  CHECK(csv.find("\nno-focal,3,") != std::string::npos);
}

TEST_CASE("relative output directories nest under the env root") {
  TempDir tmp("envroot");
  REQUIRE(setenv(kOutputRootEnv, tmp.path.c_str(), 1) == 0);
  CHECK(resolve_output_dir("runs") == (tmp.path / "runs").string());
  CHECK(resolve_output_dir("/abs/path") == "/abs/path");
  REQUIRE(unsetenv(kOutputRootEnv) == 0);
  CHECK(resolve_output_dir("runs") == "runs");
}
