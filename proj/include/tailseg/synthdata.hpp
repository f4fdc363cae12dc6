#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tailseg/rng.hpp"
#include "tailseg/tensor.hpp"

namespace tailseg {

// Synthetic long-tail scenes: C Gaussian blobs in 3-space whose sizes fall
// off geometrically from the head class to the tail. Class ids are sorted by
// cardinality, id 0 largest.

struct SceneConfig {
  std::size_t class_count = 6;
  std::size_t points_per_head = 2000;   // head class size M1
  double imbalance_ratio = 50.0;        // M1 / M_C
  std::uint64_t seed = 0;

  // Geometry. Empty centers places the clusters on a unit sphere spiral;
  // empty sigmas derives per-class spreads from default_sigma. The spread
  // controls how much adjacent clusters overlap and with it how hard the
  // task is. A positive sigma_taper shrinks rare classes relative to the
  // head, sigma_c = default_sigma * (M_c / M_1)^sigma_taper, for scenes
  // where small object categories should occupy compact regions; the zero
  // default keeps every class at the same spread. An explicit sigmas vector
  // overrides the derived values.
  std::vector<std::array<double, 3>> centers;
  std::vector<double> sigmas;
  double default_sigma = 0.40;
  double sigma_taper = 0.0;
};

struct Scene {
  Tensor points{0, 3};                  // N x 3
  std::vector<std::size_t> gt_labels;   // per point, in [0, C)
  std::vector<std::size_t> class_counts;

  std::size_t point_count() const { return gt_labels.size(); }
  std::size_t class_count() const { return class_counts.size(); }
};

enum class LabelProtocol { Percent, OnePoint };

struct LabelMask {
  LabelProtocol protocol = LabelProtocol::Percent;
  double percent = 0.0;  // only meaningful under Percent
  std::vector<std::size_t> labeled_indices;  // strictly increasing
};

/// Geometric size schedule M_c = round(M1 * (1/rho1)^((c-1)/(C-1))).
inline std::vector<std::size_t> class_size_schedule(std::size_t class_count,
                                                    std::size_t points_per_head,
                                                    double imbalance_ratio) {
  if (class_count < 2)
    throw std::invalid_argument("scene: need at least 2 classes");
  if (imbalance_ratio < 1.0)
    throw std::invalid_argument("scene: imbalance ratio must be >= 1");
  if (points_per_head < class_count)
    throw std::invalid_argument("scene: head class smaller than class count");
  const double m1 = static_cast<double>(points_per_head);
  if (std::llround(m1 / imbalance_ratio) < 1)
    throw std::invalid_argument("scene: tail class would be empty");
  std::vector<std::size_t> sizes(class_count);
  for (std::size_t c = 0; c < class_count; ++c) {
    const double t =
        static_cast<double>(c) / static_cast<double>(class_count - 1);
    sizes[c] = static_cast<std::size_t>(
        std::llround(m1 * std::pow(1.0 / imbalance_ratio, t)));
  }
  return sizes;
}

/// Evenly spread points on the unit sphere (golden-angle spiral).
inline std::vector<std::array<double, 3>> sphere_centers(std::size_t count) {
  std::vector<std::array<double, 3>> centers(count);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < count; ++i) {
    const double z = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) /
                               static_cast<double>(count);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * static_cast<double>(i);
    centers[i] = {r * std::cos(phi), r * std::sin(phi), z};
  }
  return centers;
}

inline Scene generate_scene(const SceneConfig& config) {
  const auto sizes = class_size_schedule(
      config.class_count, config.points_per_head, config.imbalance_ratio);

  auto centers = config.centers.empty() ? sphere_centers(config.class_count)
                                        : config.centers;
  if (centers.size() != config.class_count)
    throw std::invalid_argument("scene: " + std::to_string(centers.size()) +
                                " centers for " +
                                std::to_string(config.class_count) + " classes");
  std::vector<double> sigmas = config.sigmas;
  if (sigmas.empty()) {
    if (config.sigma_taper < 0.0)
      throw std::invalid_argument("scene: sigma taper must be >= 0");
    sigmas.resize(config.class_count);
    for (std::size_t c = 0; c < config.class_count; ++c)
      sigmas[c] = config.default_sigma *
                  std::pow(static_cast<double>(sizes[c]) /
                               static_cast<double>(sizes[0]),
                           config.sigma_taper);
  }
  if (sigmas.size() != config.class_count)
    throw std::invalid_argument("scene: sigma count mismatch");
  for (double s : sigmas)
    if (!(s > 0.0)) throw std::invalid_argument("scene: sigma must be positive");

  std::size_t total = 0;
  for (std::size_t s : sizes) total += s;

  Scene scene;
  scene.points = Tensor(total, 3);
  scene.gt_labels.reserve(total);
  scene.class_counts = sizes;

  Rng rng(derive_seed(config.seed, "scene"));
  std::size_t row = 0;
  for (std::size_t c = 0; c < config.class_count; ++c) {
    for (std::size_t i = 0; i < sizes[c]; ++i, ++row) {
      for (std::size_t d = 0; d < 3; ++d)
        scene.points(row, d) = centers[c][d] + sigmas[c] * rng.normal();
      scene.gt_labels.push_back(c);
    }
  }
  return scene;
}

/// Per-class uniform labeled subset. Percent(p) labels max(1, round(p*M_c))
/// points of each class so the labeled set keeps the long tail; OnePoint
/// labels exactly one point per class.
inline LabelMask apply_labeling(const Scene& scene, LabelProtocol protocol,
                                double percent, std::uint64_t seed) {
  if (protocol == LabelProtocol::Percent && !(percent > 0.0 && percent <= 1.0))
    throw std::invalid_argument("labeling: percent must be in (0,1]");

  const std::size_t C = scene.class_count();
  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < scene.gt_labels.size(); ++i)
    by_class[scene.gt_labels[i]].push_back(i);

  LabelMask mask;
  mask.protocol = protocol;
  mask.percent = protocol == LabelProtocol::Percent ? percent : 0.0;

  Rng rng(derive_seed(seed, "labels"));
  for (std::size_t c = 0; c < C; ++c) {
    if (by_class[c].empty())
      throw std::invalid_argument("labeling: class " + std::to_string(c) +
                                  " has no points");
    std::size_t want = 1;
    if (protocol == LabelProtocol::Percent) {
      want = static_cast<std::size_t>(std::max<long long>(
          1, std::llround(percent * static_cast<double>(by_class[c].size()))));
      want = std::min(want, by_class[c].size());
    }
    for (std::size_t pick : rng.sample_without_replacement(by_class[c].size(), want))
      mask.labeled_indices.push_back(by_class[c][pick]);
  }
  std::sort(mask.labeled_indices.begin(), mask.labeled_indices.end());
  return mask;
}

inline std::vector<std::size_t> labeled_counts(const LabelMask& mask,
                                               const Scene& scene) {
  std::vector<std::size_t> counts(scene.class_count(), 0);
  for (std::size_t i : mask.labeled_indices) {
    if (i >= scene.gt_labels.size())
      throw std::invalid_argument("labeling: index " + std::to_string(i) +
                                  " outside scene");
    counts[scene.gt_labels[i]]++;
  }
  return counts;
}

/// rho_c = labeled count of class c over the smallest labeled count, so the
/// rarest class sits at exactly 1.
inline std::vector<double> imbalance_ratios(const LabelMask& mask,
                                            const Scene& scene) {
  const auto counts = labeled_counts(mask, scene);
  std::size_t smallest = static_cast<std::size_t>(-1);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0)
      throw std::invalid_argument("labeling: class " + std::to_string(c) +
                                  " has no labeled points");
    smallest = std::min(smallest, counts[c]);
  }
  std::vector<double> rho(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c)
    rho[c] = static_cast<double>(counts[c]) / static_cast<double>(smallest);
  return rho;
}

// Columnar text export, one point per line: x y z gt_label labeled_flag.
// Coordinates print at full precision so a round trip is bit exact.

inline std::string scene_to_text(const Scene& scene, const LabelMask& mask) {
  std::vector<bool> labeled(scene.point_count(), false);
  for (std::size_t i : mask.labeled_indices) {
    if (i >= labeled.size())
      throw std::invalid_argument("scene export: labeled index out of range");
    labeled[i] = true;
  }
  std::string out;
  char line[128];
  for (std::size_t i = 0; i < scene.point_count(); ++i) {
    std::snprintf(line, sizeof line, "%.17g %.17g %.17g %zu %d\n",
                  scene.points(i, 0), scene.points(i, 1), scene.points(i, 2),
                  scene.gt_labels[i], labeled[i] ? 1 : 0);
    out += line;
  }
  return out;
}

struct SceneFile {
  Scene scene;
  std::vector<std::size_t> labeled_indices;
};

inline SceneFile scene_from_text(const std::string& text) {
  std::vector<std::array<double, 3>> coords;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> labeled;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    double x, y, z;
    long long cls;
    int flag;
    if (!(ls >> x >> y >> z >> cls >> flag) || cls < 0 ||
        (flag != 0 && flag != 1))
      throw std::runtime_error("scene import: bad line " +
                               std::to_string(lineno));
    coords.push_back({x, y, z});
    labels.push_back(static_cast<std::size_t>(cls));
    if (flag) labeled.push_back(coords.size() - 1);
  }
  if (coords.empty()) throw std::runtime_error("scene import: empty file");

  SceneFile out;
  out.scene.points = Tensor(coords.size(), 3);
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (std::size_t d = 0; d < 3; ++d) out.scene.points(i, d) = coords[i][d];
  out.scene.gt_labels = std::move(labels);
  std::size_t max_label = 0;
  for (std::size_t l : out.scene.gt_labels) max_label = std::max(max_label, l);
  out.scene.class_counts.assign(max_label + 1, 0);
  for (std::size_t l : out.scene.gt_labels) out.scene.class_counts[l]++;
  out.labeled_indices = std::move(labeled);
  return out;
}

}  // namespace tailseg
