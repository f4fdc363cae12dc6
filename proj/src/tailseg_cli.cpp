// Command-line front end for the segmentation lab. Verbs:
//   run       train every configured seed of one ablation row
//   ablate    train several rows and print a summary table
//   inspect   describe a saved checkpoint
//   gen-data  write a synthetic scene as text
//
// Exit codes: 0 success, 1 runtime failure (IO, corrupt data), 2 usage or
// config errors.

#include <CLI11.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "tailseg/experiment.hpp"
#include "tailseg/model.hpp"
#include "tailseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace tailseg;

namespace {

nlohmann::json load_raw_config(const std::string& path) {
  if (!fs::exists(path))
    throw std::invalid_argument("config file not found: " + path);
  const auto bytes = read_file_bytes(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path + ": " + e.what());
  }
}

ExperimentConfig resolve_config(const std::string& path,
                                const std::vector<std::string>& sets,
                                const std::string& output_override) {
  nlohmann::json j = load_raw_config(path);
  for (const std::string& s : sets) apply_override(j, s);
  ExperimentConfig cfg = config_from_json(j);
  if (!output_override.empty()) cfg.output_dir = output_override;
  return cfg;
}

void print_seed_result(const std::string& row, const SeedRunResult& r) {
  std::printf("[%s seed %llu] miou=%.4f oa=%.4f head=%.4f waist=%.4f tail=%.4f\n",
              row.c_str(), static_cast<unsigned long long>(r.seed),
              r.final_metrics.miou, r.final_metrics.oa, r.final_metrics.head_iou,
              r.final_metrics.waist_iou, r.final_metrics.tail_iou);
  for (const std::string& w : r.warnings)
    std::printf("  warning: %s\n", w.c_str());
}

int do_run(const std::string& config_path, const std::vector<std::string>& sets,
           const std::string& output_override) {
  const ExperimentConfig cfg = resolve_config(config_path, sets, output_override);
  const std::string row = ablation_name(cfg.ablation);
  const auto results = run_experiment(cfg);
  for (const SeedRunResult& r : results) print_seed_result(row, r);
  std::printf("wrote %zu runs under %s\n", results.size(),
              resolve_output_dir(cfg.output_dir).c_str());
  return 0;
}

int do_ablate(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& output_override, const std::string& rows_arg) {
  const ExperimentConfig cfg = resolve_config(config_path, sets, output_override);

  std::vector<std::string> rows;
  std::size_t at = 0;
  while (at <= rows_arg.size()) {
    const std::size_t comma = rows_arg.find(',', at);
    const std::string row = rows_arg.substr(
        at, comma == std::string::npos ? std::string::npos : comma - at);
    if (!row.empty()) rows.push_back(row);
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  if (rows.empty()) throw std::invalid_argument("ablate: no rows given");
  for (const std::string& row : rows) parse_ablation_row(row);  // fail early

  const auto summaries = run_ablation(cfg, rows);
  std::printf("%-28s %5s  %-17s %-17s %8s\n", "ablation", "seeds",
              "miou (mean+-hr)", "oa (mean+-hr)", "tail iou");
  for (const AblationSummary& s : summaries) {
    char miou[32], oa[32];
    std::snprintf(miou, sizeof miou, "%.4f+-%.4f", s.miou_mean,
                  (s.miou_max - s.miou_min) / 2.0);
    std::snprintf(oa, sizeof oa, "%.4f+-%.4f", s.oa_mean,
                  (s.oa_max - s.oa_min) / 2.0);
    std::printf("%-28s %5zu  %-17s %-17s %8.4f\n", s.name.c_str(), s.seed_count,
                miou, oa, s.tail_mean);
  }
  std::printf("summary at %s/summary.csv\n",
              resolve_output_dir(cfg.output_dir).c_str());
  return 0;
}

void print_tensor_line(const char* name, const Tensor& t) {
  std::printf("  %-3s %-9s frobenius %.6g\n", name, t.shape().str().c_str(),
              t.frobenius_norm());
}

int do_inspect(const std::string& path) {
  const auto bytes = read_file_bytes(path);

  const auto starts_with = [&](std::string_view magic) {
    return bytes.size() >= magic.size() &&
           std::memcmp(bytes.data(), magic.data(), magic.size()) == 0;
  };

  ModelParams params;
  std::size_t K = 0;
  if (starts_with(kRunCheckpointMagic)) {
    const RunCheckpointInfo info = run_checkpoint_from_bytes(bytes);
    params = info.params;
    K = info.K;
    std::printf("run checkpoint %s\n", path.c_str());
    std::printf("  outer iteration  %zu\n", info.iteration);
    std::printf("  optimizer steps  backbone=%zu classifier=%zu\n",
                info.backbone_steps, info.classifier_steps);
  } else {
    params = checkpoint_from_bytes(bytes, &K);
    std::printf("model checkpoint %s\n", path.c_str());
  }
  std::printf("  classes %zu, hidden width %zu, knn K %zu\n",
              params.classifier.class_count(), params.backbone.hidden_width(), K);
  print_tensor_line("W1", params.backbone.W1);
  print_tensor_line("b1", params.backbone.b1);
  print_tensor_line("W2", params.backbone.W2);
  print_tensor_line("b2", params.backbone.b2);
  print_tensor_line("Wc", params.classifier.Wc);
  print_tensor_line("bc", params.classifier.bc);

  // a run directory's manifest carries the config identity
  const fs::path manifest = fs::path(path).parent_path() / "manifest.json";
  if (fs::exists(manifest)) {
    const auto m_bytes = read_file_bytes(manifest.string());
    const auto m = nlohmann::json::parse(m_bytes.begin(), m_bytes.end());
    if (m.contains("config_hash"))
      std::printf("  config hash %s\n", m["config_hash"].get<std::string>().c_str());
    if (m.contains("ablation"))
      std::printf("  ablation    %s\n", m["ablation"].get<std::string>().c_str());
  }
  return 0;
}

int do_gen_data(const std::string& config_path,
                const std::vector<std::string>& sets, std::uint64_t seed,
                bool seed_given, const std::string& out_path) {
  const ExperimentConfig cfg = resolve_config(config_path, sets, "");
  SceneConfig scene_cfg = cfg.scene;
  scene_cfg.seed = seed_given ? seed : cfg.seeds.front();

  const Scene scene = generate_scene(scene_cfg);
  const LabelMask mask =
      apply_labeling(scene, cfg.protocol, cfg.percent, scene_cfg.seed);
  write_file_text(out_path, scene_to_text(scene, mask));

  std::printf("wrote %s: %zu points, %zu classes, %zu labeled\n",
              out_path.c_str(), scene.point_count(), scene.class_count(),
              mask.labeled_indices.size());
  std::printf("  class sizes:");
  for (std::size_t n : scene.class_counts) std::printf(" %zu", n);
  std::printf("\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale lab for long-tail semi-supervised point segmentation"};
  app.require_subcommand(1);

  std::string config_path, output_override, checkpoint_path, out_path;
  std::string rows_arg = "full,no-focal";
  std::vector<std::string> sets;
  std::uint64_t seed = 0;

  CLI::App* run = app.add_subcommand("run", "train every seed of one ablation row");
  run->add_option("--config", config_path, "experiment config (json)")->required();
  run->add_option("--set", sets, "override a config field, e.g. train.knn_k=8");
  run->add_option("--output", output_override, "output directory override");

  CLI::App* ablate =
      app.add_subcommand("ablate", "train several ablation rows and summarize");
  ablate->add_option("--config", config_path, "experiment config (json)")->required();
  ablate->add_option("--set", sets, "override a config field");
  ablate->add_option("--output", output_override, "output directory override");
  ablate->add_option("--rows", rows_arg, "comma-separated ablation rows");

  CLI::App* inspect = app.add_subcommand("inspect", "describe a saved checkpoint");
  inspect->add_option("checkpoint", checkpoint_path, "checkpoint file")->required();

  CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic scene as text");
  gen->add_option("--config", config_path, "experiment config (json)")->required();
  CLI::Option* seed_opt =
      gen->add_option("--seed", seed, "scene seed (default: first config seed)");
  gen->add_option("--out", out_path, "destination file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // help/version exit clean, usage errors as 2
  }

  try {
    if (run->parsed()) return do_run(config_path, sets, output_override);
    if (ablate->parsed())
      return do_ablate(config_path, sets, output_override, rows_arg);
    if (inspect->parsed()) return do_inspect(checkpoint_path);
    if (gen->parsed())
      return do_gen_data(config_path, sets, seed, seed_opt->count() > 0, out_path);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
