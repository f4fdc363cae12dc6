#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tailseg/loss.hpp"
#include "tailseg/metrics.hpp"
#include "tailseg/pseudolabel.hpp"
#include "tailseg/serialize.hpp"
#include "tailseg/synthdata.hpp"
#include "tailseg/trainer.hpp"

namespace tailseg {

// Experiment driver: a JSON config describes one scene family, a labeling
// protocol, the training schedule, and a set of ablation switches. Each
// (ablation, seed) pair becomes one run directory full of artifacts, with a
// manifest written last so a complete directory always has one.

struct AblationSwitches {
  bool two_round = true;  // off forces the selector's beta to 0
  bool focal = true;      // off drops the focal branch from the backbone loss
  bool decoupled = true;  // off trains both groups jointly
  ClassifierLabelMode label_mode = ClassifierLabelMode::GroundTruth;
};

/// Canonical row name for a switch combination. The full method is "full";
/// anything else lists its deviations in a fixed order.
inline std::string ablation_name(const AblationSwitches& a) {
  std::vector<std::string> parts;
  if (!a.two_round) parts.push_back("single-round");
  if (!a.focal) parts.push_back("no-focal");
  if (!a.decoupled) parts.push_back("joint");
  if (a.label_mode == ClassifierLabelMode::Pseudo)
    parts.push_back("labels-pseudo");
  else if (a.label_mode == ClassifierLabelMode::GroundTruthAndPseudo)
    parts.push_back("labels-gt-pseudo");
  if (parts.empty()) return "full";
  std::string out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out += "+" + parts[i];
  return out;
}

/// Inverse of ablation_name; rejects unknown row names.
inline AblationSwitches parse_ablation_row(const std::string& name) {
  AblationSwitches a;
  if (name == "full") return a;
  std::size_t at = 0;
  while (at < name.size()) {
    const std::size_t plus = name.find('+', at);
    const std::string part =
        name.substr(at, plus == std::string::npos ? std::string::npos : plus - at);
    if (part == "single-round")
      a.two_round = false;
    else if (part == "no-focal")
      a.focal = false;
    else if (part == "joint")
      a.decoupled = false;
    else if (part == "labels-pseudo")
      a.label_mode = ClassifierLabelMode::Pseudo;
    else if (part == "labels-gt-pseudo")
      a.label_mode = ClassifierLabelMode::GroundTruthAndPseudo;
    else
      throw std::invalid_argument("unknown ablation row part: '" + part + "'");
    at = plus == std::string::npos ? name.size() : plus + 1;
  }
  return a;
}

struct ExperimentConfig {
  SceneConfig scene;  // per-run seed is substituted at run time
  LabelProtocol protocol = LabelProtocol::Percent;
  double percent = 0.01;
  TrainConfig train;
  AblationSwitches ablation;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string output_dir = "runs";

  void validate() const {
    if (seeds.empty())
      throw std::invalid_argument("config: seeds must not be empty");
    if (!ablation.decoupled &&
        ablation.label_mode != ClassifierLabelMode::GroundTruth)
      throw std::invalid_argument(
          "config: joint training refits no separate classifier, so a "
          "classifier label mode cannot be combined with it");
    train.validate();
  }
};

/// Training config with this experiment's ablation switches and the run seed
/// substituted in.
inline TrainConfig resolve_train_config(const ExperimentConfig& cfg,
                                        std::uint64_t seed) {
  TrainConfig t = cfg.train;
  t.seed = seed;
  t.use_focal_branch = cfg.ablation.focal;
  t.decoupled = cfg.ablation.decoupled;
  t.label_mode = cfg.ablation.label_mode;
  if (!cfg.ablation.two_round) t.selector.beta = 0.0;
  return t;
}

namespace detail {

using nlohmann::json;

inline void expect_object(const json& j, const std::string& where) {
  if (!j.is_object())
    throw std::invalid_argument("config: " + where + " must be an object");
}

/// Pulls one key out of the object (erasing it) so leftovers can be reported
/// as unknown keys afterwards.
inline json take(json& obj, const std::string& key) {
  auto it = obj.find(key);
  if (it == obj.end()) return json();
  json out = *it;
  obj.erase(it);
  return out;
}

inline void reject_unknown(const json& obj, const std::string& where) {
  if (!obj.empty())
    throw std::invalid_argument("config: unknown key '" +
                                obj.begin().key() + "' in " + where);
}

inline double take_double(json& obj, const std::string& key, double fallback,
                          const std::string& where) {
  const json v = take(obj, key);
  if (v.is_null()) return fallback;
  if (!v.is_number())
    throw std::invalid_argument("config: " + where + "." + key +
                                " must be a number");
  return v.get<double>();
}

inline std::size_t take_size(json& obj, const std::string& key,
                             std::size_t fallback, const std::string& where) {
  const json v = take(obj, key);
  if (v.is_null()) return fallback;
  if (!v.is_number_integer() || v.get<double>() < 0)
    throw std::invalid_argument("config: " + where + "." + key +
                                " must be a non-negative integer");
  return v.get<std::size_t>();
}

inline bool take_bool(json& obj, const std::string& key, bool fallback,
                      const std::string& where) {
  const json v = take(obj, key);
  if (v.is_null()) return fallback;
  if (!v.is_boolean())
    throw std::invalid_argument("config: " + where + "." + key +
                                " must be true or false");
  return v.get<bool>();
}

inline std::string take_string(json& obj, const std::string& key,
                               const std::string& fallback,
                               const std::string& where) {
  const json v = take(obj, key);
  if (v.is_null()) return fallback;
  if (!v.is_string())
    throw std::invalid_argument("config: " + where + "." + key +
                                " must be a string");
  return v.get<std::string>();
}

}  // namespace detail

/// Parses and validates an experiment config. Every field is optional and
/// falls back to the reference defaults; unknown keys are rejected by name.
inline ExperimentConfig config_from_json(const nlohmann::json& root) {
  using detail::take;
  detail::expect_object(root, "top level");
  nlohmann::json j = root;
  ExperimentConfig cfg;

  nlohmann::json scene = take(j, "scene");
  if (!scene.is_null()) {
    detail::expect_object(scene, "scene");
    cfg.scene.class_count = detail::take_size(scene, "classes", 6, "scene");
    cfg.scene.points_per_head =
        detail::take_size(scene, "points_per_head", 2000, "scene");
    cfg.scene.imbalance_ratio =
        detail::take_double(scene, "imbalance_ratio", 50.0, "scene");
    cfg.scene.default_sigma = detail::take_double(scene, "sigma", 0.40, "scene");
    cfg.scene.sigma_taper =
        detail::take_double(scene, "sigma_taper", 0.0, "scene");
    detail::reject_unknown(scene, "scene");
  }

  nlohmann::json lab = take(j, "labeling");
  if (!lab.is_null()) {
    detail::expect_object(lab, "labeling");
    const std::string protocol =
        detail::take_string(lab, "protocol", "percent", "labeling");
    if (protocol == "percent")
      cfg.protocol = LabelProtocol::Percent;
    else if (protocol == "one-point")
      cfg.protocol = LabelProtocol::OnePoint;
    else
      throw std::invalid_argument(
          "config: labeling.protocol must be 'percent' or 'one-point', got '" +
          protocol + "'");
    cfg.percent = detail::take_double(lab, "percent", 0.01, "labeling");
    detail::reject_unknown(lab, "labeling");
  }

  nlohmann::json train = take(j, "train");
  if (!train.is_null()) {
    detail::expect_object(train, "train");
    TrainConfig& t = cfg.train;
    t.outer_iterations =
        detail::take_size(train, "outer_iterations", t.outer_iterations, "train");
    t.backbone_epochs =
        detail::take_size(train, "backbone_epochs", t.backbone_epochs, "train");
    t.classifier_epochs = detail::take_size(train, "classifier_epochs",
                                            t.classifier_epochs, "train");
    t.pretrain_epochs =
        detail::take_size(train, "pretrain_epochs", t.pretrain_epochs, "train");
    t.pretrain_lr = detail::take_double(train, "pretrain_lr", t.pretrain_lr, "train");
    t.inner_lr = detail::take_double(train, "inner_lr", t.inner_lr, "train");
    t.inner_lr_decay =
        detail::take_double(train, "inner_lr_decay", t.inner_lr_decay, "train");
    t.batch_count = detail::take_size(train, "batch_count", t.batch_count, "train");
    t.hidden_width =
        detail::take_size(train, "hidden_width", t.hidden_width, "train");
    t.knn_k = detail::take_size(train, "knn_k", t.knn_k, "train");
    t.alpha_t = detail::take_double(train, "alpha_t", t.alpha_t, "train");
    t.gamma_scale =
        detail::take_double(train, "gamma_scale", t.gamma_scale, "train");
    t.unsup_weight =
        detail::take_double(train, "unsup_weight", t.unsup_weight, "train");

    nlohmann::json sel = take(train, "selector");
    if (!sel.is_null()) {
      detail::expect_object(sel, "train.selector");
      SelectorConfig& s = t.selector;
      s.delta_len =
          detail::take_double(sel, "delta_len", s.delta_len, "train.selector");
      s.delta_d = detail::take_double(sel, "delta_d", s.delta_d, "train.selector");
      s.beta = detail::take_double(sel, "beta", s.beta, "train.selector");
      s.tail_count =
          detail::take_size(sel, "tail_count", s.tail_count, "train.selector");
      const std::string rho =
          detail::take_string(sel, "rho_mode", "tail", "train.selector");
      if (rho == "tail")
        s.rho_mode = RhoMode::TailAnchored;
      else if (rho == "head")
        s.rho_mode = RhoMode::HeadAnchored;
      else
        throw std::invalid_argument(
            "config: train.selector.rho_mode must be 'tail' or 'head', got '" +
            rho + "'");
      detail::reject_unknown(sel, "train.selector");
    }
    detail::reject_unknown(train, "train");
  }

  nlohmann::json abl = take(j, "ablation");
  if (!abl.is_null()) {
    detail::expect_object(abl, "ablation");
    cfg.ablation.two_round = detail::take_bool(abl, "two_round", true, "ablation");
    cfg.ablation.focal = detail::take_bool(abl, "focal", true, "ablation");
    cfg.ablation.decoupled = detail::take_bool(abl, "decoupled", true, "ablation");
    const std::string mode = detail::take_string(abl, "label_mode", "gt", "ablation");
    if (mode == "gt")
      cfg.ablation.label_mode = ClassifierLabelMode::GroundTruth;
    else if (mode == "pseudo")
      cfg.ablation.label_mode = ClassifierLabelMode::Pseudo;
    else if (mode == "gt+pseudo")
      cfg.ablation.label_mode = ClassifierLabelMode::GroundTruthAndPseudo;
    else
      throw std::invalid_argument(
          "config: ablation.label_mode must be 'gt', 'pseudo' or 'gt+pseudo', "
          "got '" + mode + "'");
    detail::reject_unknown(abl, "ablation");
  }

  nlohmann::json seeds = take(j, "seeds");
  if (!seeds.is_null()) {
    if (!seeds.is_array())
      throw std::invalid_argument("config: seeds must be an array");
    cfg.seeds.clear();
    for (const auto& s : seeds) {
      if (!s.is_number_integer() || s.get<double>() < 0)
        throw std::invalid_argument(
            "config: seeds must be non-negative integers");
      cfg.seeds.push_back(s.get<std::uint64_t>());
    }
  }

  cfg.output_dir = detail::take_string(j, "output_dir", "runs", "top level");
  detail::reject_unknown(j, "the top level");

  cfg.validate();
  return cfg;
}

/// Resolved config back as canonical JSON (alphabetical keys, all defaults
/// filled in), used for the manifest and the config hash.
inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["scene"]["classes"] = cfg.scene.class_count;
  j["scene"]["points_per_head"] = cfg.scene.points_per_head;
  j["scene"]["imbalance_ratio"] = cfg.scene.imbalance_ratio;
  j["scene"]["sigma"] = cfg.scene.default_sigma;
  j["scene"]["sigma_taper"] = cfg.scene.sigma_taper;
  j["labeling"]["protocol"] =
      cfg.protocol == LabelProtocol::Percent ? "percent" : "one-point";
  j["labeling"]["percent"] = cfg.percent;
  const TrainConfig& t = cfg.train;
  j["train"]["outer_iterations"] = t.outer_iterations;
  j["train"]["backbone_epochs"] = t.backbone_epochs;
  j["train"]["classifier_epochs"] = t.classifier_epochs;
  j["train"]["pretrain_epochs"] = t.pretrain_epochs;
  j["train"]["pretrain_lr"] = t.pretrain_lr;
  j["train"]["inner_lr"] = t.inner_lr;
  j["train"]["inner_lr_decay"] = t.inner_lr_decay;
  j["train"]["batch_count"] = t.batch_count;
  j["train"]["hidden_width"] = t.hidden_width;
  j["train"]["knn_k"] = t.knn_k;
  j["train"]["alpha_t"] = t.alpha_t;
  j["train"]["gamma_scale"] = t.gamma_scale;
  j["train"]["unsup_weight"] = t.unsup_weight;
  j["train"]["selector"]["delta_len"] = t.selector.delta_len;
  j["train"]["selector"]["delta_d"] = t.selector.delta_d;
  j["train"]["selector"]["beta"] = t.selector.beta;
  j["train"]["selector"]["tail_count"] = t.selector.tail_count;
  j["train"]["selector"]["rho_mode"] =
      t.selector.rho_mode == RhoMode::TailAnchored ? "tail" : "head";
  j["ablation"]["two_round"] = cfg.ablation.two_round;
  j["ablation"]["focal"] = cfg.ablation.focal;
  j["ablation"]["decoupled"] = cfg.ablation.decoupled;
  j["ablation"]["label_mode"] =
      cfg.ablation.label_mode == ClassifierLabelMode::GroundTruth ? "gt"
      : cfg.ablation.label_mode == ClassifierLabelMode::Pseudo   ? "pseudo"
                                                                  : "gt+pseudo";
  j["seeds"] = cfg.seeds;
  j["output_dir"] = cfg.output_dir;
  return j;
}

inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
  return fnv1a64_str(config_to_json(cfg).dump());
}

/// Loads a config file; a missing file is a usage error that names the path.
inline ExperimentConfig load_config(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw std::invalid_argument("config file not found: " + path);
  const auto bytes = read_file_bytes(path);
  const std::string text(reinterpret_cast<const char*>(bytes.data()),
                         bytes.size());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path + ": " + e.what());
  }
  return config_from_json(j);
}

/// Applies one "dotted.path=value" override onto raw config JSON. Values
/// parse as JSON when they can (numbers, booleans, arrays) and fall back to
/// strings.
inline void apply_override(nlohmann::json& j, const std::string& setting) {
  const std::size_t eq = setting.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override '" + setting +
                                "' is not of the form key.path=value");
  const std::string path = setting.substr(0, eq);
  const std::string raw = setting.substr(eq + 1);

  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }

  nlohmann::json* at = &j;
  std::size_t from = 0;
  while (true) {
    const std::size_t dot = path.find('.', from);
    const std::string key =
        path.substr(from, dot == std::string::npos ? std::string::npos : dot - from);
    if (key.empty())
      throw std::invalid_argument("override '" + setting + "' has an empty key");
    if (dot == std::string::npos) {
      (*at)[key] = value;
      return;
    }
    at = &(*at)[key];
    from = dot + 1;
  }
}

inline constexpr const char* kOutputRootEnv = "TAILSEG_OUT";

/// Relative output directories nest under the env-var root when it is set.
inline std::string resolve_output_dir(const std::string& dir) {
  const std::filesystem::path p(dir);
  if (p.is_absolute()) return dir;
  if (const char* root = std::getenv(kOutputRootEnv); root && *root)
    return (std::filesystem::path(root) / p).string();
  return dir;
}

struct SeedRunResult {
  std::uint64_t seed = 0;
  std::string dir;
  MetricsReport final_metrics;
  std::vector<IterationRecord> records;
  std::vector<std::string> warnings;
};

/// One (ablation, seed) run: trains, writes every artifact into run_dir, and
/// finishes with manifest.json. Wall-clock time in the manifest is the only
/// field that varies between identical reruns.
inline SeedRunResult run_experiment_seed(const ExperimentConfig& cfg,
                                         std::uint64_t seed,
                                         const std::string& run_dir) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  std::filesystem::create_directories(run_dir);

  SceneConfig scene_cfg = cfg.scene;
  scene_cfg.seed = seed;
  const Scene scene = generate_scene(scene_cfg);
  const LabelMask mask = apply_labeling(scene, cfg.protocol, cfg.percent, seed);
  const TrainConfig train_cfg = resolve_train_config(cfg, seed);

  std::map<std::string, std::uint64_t> artifact_hashes;
  const auto write_artifact = [&](const std::string& name,
                                  std::span<const std::uint8_t> bytes) {
    write_file_bytes((std::filesystem::path(run_dir) / name).string(), bytes);
    artifact_hashes[name] = fnv1a64(bytes);
  };
  const auto write_text_artifact = [&](const std::string& name,
                                       const std::string& text) {
    write_artifact(name, {reinterpret_cast<const std::uint8_t*>(text.data()),
                          text.size()});
  };

  write_text_artifact("scene.txt", scene_to_text(scene, mask));

  std::string metrics_csv = metrics_csv_header();
  std::string pseudo_csv = pseudo_csv_header();
  std::string focus_csv = focus_csv_header();

  const RunResult run = run_training(
      scene, mask, train_cfg,
      [&](const RunState& state, const IterationRecord& rec) {
        append_metrics_csv(metrics_csv, rec.iteration, rec.metrics);
        append_pseudo_csv(pseudo_csv, rec.iteration, rec.pseudo);
        append_focus_csv(focus_csv, rec.iteration, rec.grad_ratios, rec.factors);
        char name[48];
        std::snprintf(name, sizeof name, "checkpoint_iter%02zu.bin",
                      rec.iteration);
        write_artifact(name, run_checkpoint_bytes(state, train_cfg.knn_k));
      });

  write_text_artifact("metrics.csv", metrics_csv);
  write_text_artifact("pseudo_labels.csv", pseudo_csv);
  write_text_artifact("focus_stats.csv", focus_csv);

  SeedRunResult result;
  result.seed = seed;
  result.dir = run_dir;
  result.records = run.records;
  result.warnings = run.state.warnings;
  if (!run.records.empty()) {
    result.final_metrics = run.records.back().metrics;
  } else {
    result.final_metrics = iou_report(
        confusion(predict_labels(run.state.params, scene,
                                 build_knn(scene, train_cfg.knn_k)),
                  scene.gt_labels, scene.class_count()),
        tercile_groups(scene.class_counts));
  }

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  nlohmann::json manifest;
  manifest["ablation"] = ablation_name(cfg.ablation);
  manifest["seed"] = seed;
  manifest["config"] = config_to_json(cfg);
  char hash_hex[20];
  std::snprintf(hash_hex, sizeof hash_hex, "%016llx",
                static_cast<unsigned long long>(config_hash(cfg)));
  manifest["config_hash"] = hash_hex;
  manifest["wall_seconds"] = wall;
  manifest["warnings"] = run.state.warnings;
  for (const auto& [name, hash] : artifact_hashes) {
    char hex[20];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(hash));
    manifest["artifacts"][name] = hex;
  }
  write_file_text((std::filesystem::path(run_dir) / "manifest.json").string(),
                  manifest.dump(2) + "\n");
  return result;
}

/// All seeds of one ablation row; directories look like
/// <output_dir>/<row>/seed<k>.
inline std::vector<SeedRunResult> run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::string root = resolve_output_dir(cfg.output_dir);
  const std::string row = ablation_name(cfg.ablation);
  std::vector<SeedRunResult> results;
  for (std::uint64_t seed : cfg.seeds) {
    const auto dir = std::filesystem::path(root) / row / ("seed" + std::to_string(seed));
    results.push_back(run_experiment_seed(cfg, seed, dir.string()));
  }
  return results;
}

struct AblationSummary {
  std::string name;
  std::size_t seed_count = 0;
  double miou_mean = 0, miou_min = 0, miou_max = 0;
  double oa_mean = 0, oa_min = 0, oa_max = 0;
  double head_mean = 0, waist_mean = 0, tail_mean = 0;
};

namespace detail {

/// Mean over the defined entries; NaN when every entry is NaN.
inline double nan_aware_mean(const std::vector<double>& xs) {
  double sum = 0.0;
  std::size_t n = 0;
  for (double x : xs)
    if (!std::isnan(x)) {
      sum += x;
      ++n;
    }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN()
                : sum / static_cast<double>(n);
}

}  // namespace detail

inline AblationSummary summarize_runs(const std::string& name,
                                      const std::vector<SeedRunResult>& runs) {
  if (runs.empty()) throw std::invalid_argument("summary: no runs");
  AblationSummary s;
  s.name = name;
  s.seed_count = runs.size();
  std::vector<double> miou, oa, head, waist, tail;
  for (const SeedRunResult& r : runs) {
    miou.push_back(r.final_metrics.miou);
    oa.push_back(r.final_metrics.oa);
    head.push_back(r.final_metrics.head_iou);
    waist.push_back(r.final_metrics.waist_iou);
    tail.push_back(r.final_metrics.tail_iou);
  }
  s.miou_mean = detail::nan_aware_mean(miou);
  s.oa_mean = detail::nan_aware_mean(oa);
  s.head_mean = detail::nan_aware_mean(head);
  s.waist_mean = detail::nan_aware_mean(waist);
  s.tail_mean = detail::nan_aware_mean(tail);
  s.miou_min = *std::min_element(miou.begin(), miou.end());
  s.miou_max = *std::max_element(miou.begin(), miou.end());
  s.oa_min = *std::min_element(oa.begin(), oa.end());
  s.oa_max = *std::max_element(oa.begin(), oa.end());
  return s;
}

inline std::string summary_csv_header() {
  return "ablation,seeds,miou_mean,miou_min,miou_max,oa_mean,oa_min,oa_max,"
         "head_iou_mean,waist_iou_mean,tail_iou_mean\n";
}

inline void append_summary_csv(std::string& out, const AblationSummary& s) {
  char line[320];
  std::snprintf(line, sizeof line,
                "%s,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                s.name.c_str(), s.seed_count, s.miou_mean, s.miou_min,
                s.miou_max, s.oa_mean, s.oa_min, s.oa_max, s.head_mean,
                s.waist_mean, s.tail_mean);
  out += line;
}

/// Runs the config once per ablation row and writes summary.csv at the
/// output root. Each row reuses the config's seeds.
inline std::vector<AblationSummary> run_ablation(
    const ExperimentConfig& base, const std::vector<std::string>& rows) {
  if (rows.empty()) throw std::invalid_argument("ablation: no rows requested");
  std::vector<AblationSummary> summaries;
  std::string csv = summary_csv_header();
  for (const std::string& row : rows) {
    ExperimentConfig cfg = base;
    cfg.ablation = parse_ablation_row(row);
    cfg.validate();
    summaries.push_back(summarize_runs(row, run_experiment(cfg)));
    append_summary_csv(csv, summaries.back());
  }
  const std::string root = resolve_output_dir(base.output_dir);
  std::filesystem::create_directories(root);
  write_file_text((std::filesystem::path(root) / "summary.csv").string(), csv);
  return summaries;
}

}  // namespace tailseg
