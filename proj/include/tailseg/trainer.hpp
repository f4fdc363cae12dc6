#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tailseg/autodiff.hpp"
#include "tailseg/loss.hpp"
#include "tailseg/metrics.hpp"
#include "tailseg/model.hpp"
#include "tailseg/pseudolabel.hpp"
#include "tailseg/rng.hpp"
#include "tailseg/serialize.hpp"
#include "tailseg/synthdata.hpp"
#include "tailseg/tensor.hpp"

namespace tailseg {

// Training schedule: pretrain both parameter groups on the labeled points,
// then alternate two phases per outer iteration. The backbone phase
// regenerates pseudo labels and updates only the backbone on the combined
// focal + cross-entropy objective; the classifier phase updates only the
// classifier on cross-entropy over frozen features. A joint mode spends the
// same epoch budget updating both groups at once, for comparison runs.

enum class ClassifierLabelMode { GroundTruth, Pseudo, GroundTruthAndPseudo };

struct TrainConfig {
  std::size_t outer_iterations = 10;
  std::size_t backbone_epochs = 30;     // per outer iteration
  std::size_t classifier_epochs = 100;  // per outer iteration
  std::size_t pretrain_epochs = 100;

  double pretrain_lr = 0.001;
  double inner_lr = 0.01;        // backbone/classifier phases
  double inner_lr_decay = 0.98;  // per epoch, restarted each phase
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_count = 8;  // sub-batches per epoch

  std::size_t hidden_width = 32;
  std::size_t knn_k = 16;

  SelectorConfig selector;
  double alpha_t = 0.5;
  double gamma_scale = 10.0;
  double unsup_weight = 1.0;

  bool use_focal_branch = true;  // off reproduces the plain self-training baseline
  bool decoupled = true;         // off trains both groups jointly
  ClassifierLabelMode label_mode = ClassifierLabelMode::GroundTruth;

  std::uint64_t seed = 0;

  void validate() const {
    if (!(pretrain_lr > 0.0 && inner_lr > 0.0))
      throw std::invalid_argument("train config: learning rates must be positive");
    if (!(inner_lr_decay > 0.0 && inner_lr_decay <= 1.0))
      throw std::invalid_argument("train config: decay must be in (0,1]");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) ||
        !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_eps > 0.0))
      throw std::invalid_argument("train config: bad Adam parameters");
    if (batch_count < 1)
      throw std::invalid_argument("train config: need at least one sub-batch");
    if (hidden_width < 1 || knn_k < 1)
      throw std::invalid_argument("train config: degenerate model dimensions");
    if (!(alpha_t > 0.0 && alpha_t <= 1.0))
      throw std::invalid_argument("train config: alpha_t must be in (0,1]");
    if (!(gamma_scale > 0.0))
      throw std::invalid_argument("train config: gamma scale must be positive");
    if (unsup_weight < 0.0)
      throw std::invalid_argument("train config: unsupervised weight must be >= 0");
    selector.validate();
  }
};

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;

  void reset(const std::vector<Tensor>& params) {
    m.clear();
    v.clear();
    for (const Tensor& p : params) {
      m.emplace_back(p.shape());
      v.emplace_back(p.shape());
    }
    step = 0;
  }
};

/// One Adam update over a parameter group. Order of tensors must match the
/// state's reset order.
inline void adam_apply(std::vector<Tensor*> params,
                       const std::vector<const Tensor*>& grads, AdamState& opt,
                       double lr, double beta1, double beta2, double eps) {
  if (params.size() != grads.size() || params.size() != opt.m.size())
    throw std::invalid_argument("adam: group size mismatch");
  opt.step++;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(opt.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = *grads[k];
    if (!(p.shape() == g.shape()) || !(p.shape() == opt.m[k].shape()))
      throw std::invalid_argument("adam: shape mismatch in group slot " +
                                  std::to_string(k));
    for (std::size_t e = 0; e < p.size(); ++e) {
      const double ge = g.values()[e];
      opt.m[k].values()[e] = beta1 * opt.m[k].values()[e] + (1.0 - beta1) * ge;
      opt.v[k].values()[e] = beta2 * opt.v[k].values()[e] + (1.0 - beta2) * ge * ge;
      const double mhat = opt.m[k].values()[e] / bc1;
      const double vhat = opt.v[k].values()[e] / bc2;
      p.values()[e] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

struct RunState {
  ModelParams params;
  AdamState backbone_opt;
  AdamState classifier_opt;
  std::size_t iteration = 0;  // completed outer iterations
  PseudoLabelSet pseudo;      // global point indices
  GradRatioTracker tracker{1};
  Rng rng{0};
  std::vector<std::string> warnings;
};

struct IterationRecord {
  std::size_t iteration = 0;  // 1-based, after the iteration completed
  MetricsReport metrics;
  PseudoLabelSet pseudo;
  std::vector<double> grad_ratios;
  FocusingFactors factors;
};

struct RunResult {
  RunState state;
  std::vector<IterationRecord> records;
};

// Serialization helpers for the freeze contracts: each parameter group as a
// flat little-endian byte string.

inline std::vector<std::uint8_t> backbone_bytes(const BackboneParams& p) {
  std::vector<std::uint8_t> out;
  put_tensor(out, p.W1);
  put_tensor(out, p.b1);
  put_tensor(out, p.W2);
  put_tensor(out, p.b2);
  return out;
}

inline std::vector<std::uint8_t> classifier_bytes(const ClassifierParams& p) {
  std::vector<std::uint8_t> out;
  put_tensor(out, p.Wc);
  put_tensor(out, p.bc);
  return out;
}

namespace detail {

struct TrainEntry {
  std::size_t point = 0;
  std::size_t cls = 0;
  bool is_pseudo = false;
};

inline std::vector<TrainEntry> labeled_entries(const Scene& scene,
                                               const LabelMask& mask) {
  std::vector<TrainEntry> out;
  out.reserve(mask.labeled_indices.size());
  for (std::size_t i : mask.labeled_indices)
    out.push_back({i, scene.gt_labels[i], false});
  return out;
}

inline Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& rows) {
  Tensor out(rows.size(), src.cols());
  for (std::size_t k = 0; k < rows.size(); ++k)
    for (std::size_t c = 0; c < src.cols(); ++c) out(k, c) = src(rows[k], c);
  return out;
}

/// Chunk boundaries: count pieces of near-equal size, empty ones dropped.
inline std::vector<std::pair<std::size_t, std::size_t>> chunk_spans(
    std::size_t total, std::size_t count) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  if (total == 0) return spans;
  const std::size_t pieces = std::min(count, total);
  const std::size_t base = total / pieces;
  const std::size_t rem = total % pieces;
  std::size_t at = 0;
  for (std::size_t k = 0; k < pieces; ++k) {
    const std::size_t len = base + (k < rem ? 1 : 0);
    spans.emplace_back(at, at + len);
    at += len;
  }
  return spans;
}

inline std::size_t argmax_row(const Tensor& probs, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < probs.cols(); ++c)
    if (probs(row, c) > probs(row, best)) best = c;
  return best;
}

}  // namespace detail

/// Class predictions for every point under the current parameters.
inline std::vector<std::size_t> predict_labels(const ModelParams& params,
                                               const Scene& scene,
                                               const NeighborIndex& nn) {
  const Tensor probs =
      predict_probs(params.classifier, extract_features(params.backbone, scene, nn));
  std::vector<std::size_t> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i)
    out[i] = detail::argmax_row(probs, i);
  return out;
}

/// Joint warm-up on the labeled points only: both groups update under the
/// mean cross-entropy, constant learning rate.
inline RunState pretrain(const Scene& scene, const LabelMask& mask,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (mask.labeled_indices.empty())
    throw std::invalid_argument("pretrain: empty labeled set");
  const std::size_t C = scene.class_count();

  RunState state;
  state.params = init_model(C, cfg.hidden_width, cfg.seed);
  state.tracker = GradRatioTracker(C);
  state.rng = Rng(derive_seed(cfg.seed, "train"));
  state.backbone_opt.reset(backbone_tensors(state.params.backbone));
  state.classifier_opt.reset(classifier_tensors(state.params.classifier));

  const Tensor aug = augmented_inputs(scene, build_knn(scene, cfg.knn_k));
  std::vector<detail::TrainEntry> entries = detail::labeled_entries(scene, mask);

  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    state.rng.shuffle(entries);
    for (const auto& [lo, hi] : detail::chunk_spans(entries.size(), cfg.batch_count)) {
      std::vector<std::size_t> rows;
      std::vector<PickEntry> picks;
      for (std::size_t k = lo; k < hi; ++k) {
        picks.push_back({rows.size(), entries[k].cls});
        rows.push_back(entries[k].point);
      }
      Tape tape;
      const NodeId features = append_backbone(
          tape, detail::gather_rows(aug, rows), state.params.backbone, true);
      std::vector<NodeId> ids;
      // classifier params appended after the backbone ones, so input order
      // is W1,b1,W2,b2,Wc,bc
      const NodeId logits =
          append_classifier(tape, features, state.params.classifier, true, &ids);
      append_seg_ce(tape, logits, picks);

      std::vector<Tensor> inputs = backbone_tensors(state.params.backbone);
      for (Tensor& t : classifier_tensors(state.params.classifier))
        inputs.push_back(std::move(t));
      tape.forward(inputs);
      const GradientSet grads = tape.backward();
      const auto pids = grads.parameter_ids();

      adam_apply({&state.params.backbone.W1, &state.params.backbone.b1,
                  &state.params.backbone.W2, &state.params.backbone.b2},
                 {&grads.at(pids[0]), &grads.at(pids[1]), &grads.at(pids[2]),
                  &grads.at(pids[3])},
                 state.backbone_opt, cfg.pretrain_lr, cfg.adam_beta1,
                 cfg.adam_beta2, cfg.adam_eps);
      adam_apply({&state.params.classifier.Wc, &state.params.classifier.bc},
                 {&grads.at(pids[4]), &grads.at(pids[5])}, state.classifier_opt,
                 cfg.pretrain_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    }
  }
  return state;
}

/// Regenerates pseudo labels from the current model, then runs the backbone
/// phase: only the backbone updates, on focal-over-pseudo plus mean
/// cross-entropy over labeled and pseudo points together. The gradient
/// balance tracker resets here and accumulates over the phase.
inline void step_backbone(RunState& state, const Scene& scene,
                          const LabelMask& mask, const TrainConfig& cfg) {
  cfg.validate();
  const std::vector<double> rho = imbalance_ratios(mask, scene);
  const Tensor aug = augmented_inputs(scene, build_knn(scene, cfg.knn_k));

  // pseudo-label refresh over the unlabeled points
  std::vector<bool> is_labeled(scene.point_count(), false);
  for (std::size_t i : mask.labeled_indices) is_labeled[i] = true;
  std::vector<std::size_t> unlabeled;
  for (std::size_t i = 0; i < scene.point_count(); ++i)
    if (!is_labeled[i]) unlabeled.push_back(i);
  if (unlabeled.empty()) {
    state.pseudo = PseudoLabelSet{};
  } else {
    Tape tape;
    const NodeId f = append_backbone(tape, detail::gather_rows(aug, unlabeled),
                                     state.params.backbone, false);
    tape.row_softmax(append_classifier(tape, f, state.params.classifier, false));
    const Tensor probs = tape.forward({});
    PseudoLabelSet rows = select_pseudo_labels(probs, rho, cfg.selector);
    state.pseudo = PseudoLabelSet{};
    for (PseudoLabel e : rows.entries) {
      e.point = unlabeled[e.point];
      state.pseudo.entries.push_back(e);
    }
  }
  if (state.pseudo.entries.empty())
    state.warnings.push_back("iteration " + std::to_string(state.iteration + 1) +
                             ": empty pseudo-label set, focal branch skipped");

  // gradient balance statistics restart with each pseudo-label generation,
  // so stale ratios from an earlier model never steer the fresh labels
  state.tracker.reset();
  state.backbone_opt.reset(backbone_tensors(state.params.backbone));

  std::vector<detail::TrainEntry> entries = detail::labeled_entries(scene, mask);
  for (const PseudoLabel& e : state.pseudo.entries)
    entries.push_back({e.point, e.cls, true});

  for (std::size_t epoch = 0; epoch < cfg.backbone_epochs; ++epoch) {
    const double lr =
        cfg.inner_lr * std::pow(cfg.inner_lr_decay, static_cast<double>(epoch));
    state.rng.shuffle(entries);
    for (const auto& [lo, hi] : detail::chunk_spans(entries.size(), cfg.batch_count)) {
      std::vector<std::size_t> rows;
      std::vector<PickEntry> all_picks;
      PseudoLabelSet chunk_pseudo;
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t row = rows.size();
        all_picks.push_back({row, entries[k].cls});
        if (entries[k].is_pseudo)
          chunk_pseudo.entries.push_back(
              {row, entries[k].cls, 0.0, PseudoRound::Certain});
        rows.push_back(entries[k].point);
      }

      const FocusingFactors factors =
          focusing_factors(state.tracker, rho, cfg.gamma_scale);

      Tape tape;
      const NodeId features = append_backbone(
          tape, detail::gather_rows(aug, rows), state.params.backbone, true);
      const NodeId logits =
          append_classifier(tape, features, state.params.classifier, false);
      const bool focal = cfg.use_focal_branch && !chunk_pseudo.entries.empty();
      const NodeId seg = append_seg_ce(tape, logits, all_picks);
      if (focal) {
        const NodeId mi = append_mi_focal(tape, tape.row_softmax(logits),
                                          chunk_pseudo, factors, cfg.alpha_t);
        append_feature_loss(tape, mi, seg, cfg.unsup_weight);
      }

      tape.forward(backbone_tensors(state.params.backbone));
      const GradientSet grads = tape.backward();
      const auto pids = grads.parameter_ids();

      const GradSplit split = split_logit_gradients(grads.at(logits), all_picks);
      state.tracker.update(split.pos, split.neg);

      adam_apply({&state.params.backbone.W1, &state.params.backbone.b1,
                  &state.params.backbone.W2, &state.params.backbone.b2},
                 {&grads.at(pids[0]), &grads.at(pids[1]), &grads.at(pids[2]),
                  &grads.at(pids[3])},
                 state.backbone_opt, lr, cfg.adam_beta1, cfg.adam_beta2,
                 cfg.adam_eps);
    }
  }
}

/// Classifier phase: the backbone is frozen, its features cached once, and
/// only the classifier updates on mean cross-entropy over the configured
/// label source.
inline void step_classifier(RunState& state, const Scene& scene,
                            const LabelMask& mask, const TrainConfig& cfg) {
  cfg.validate();
  if (mask.labeled_indices.empty())
    throw std::invalid_argument("classifier phase: empty labeled set");

  std::vector<detail::TrainEntry> entries;
  if (cfg.label_mode == ClassifierLabelMode::GroundTruth ||
      cfg.label_mode == ClassifierLabelMode::GroundTruthAndPseudo)
    entries = detail::labeled_entries(scene, mask);
  if (cfg.label_mode == ClassifierLabelMode::Pseudo ||
      cfg.label_mode == ClassifierLabelMode::GroundTruthAndPseudo) {
    if (cfg.label_mode == ClassifierLabelMode::Pseudo && state.pseudo.entries.empty())
      throw std::runtime_error(
          "classifier phase: pseudo label source selected but the set is empty");
    for (const PseudoLabel& e : state.pseudo.entries)
      entries.push_back({e.point, e.cls, true});
  }

  const Tensor features = extract_features(
      state.params.backbone, scene, build_knn(scene, cfg.knn_k));
  state.classifier_opt.reset(classifier_tensors(state.params.classifier));

  for (std::size_t epoch = 0; epoch < cfg.classifier_epochs; ++epoch) {
    const double lr =
        cfg.inner_lr * std::pow(cfg.inner_lr_decay, static_cast<double>(epoch));
    state.rng.shuffle(entries);
    for (const auto& [lo, hi] : detail::chunk_spans(entries.size(), cfg.batch_count)) {
      std::vector<std::size_t> rows;
      std::vector<PickEntry> picks;
      for (std::size_t k = lo; k < hi; ++k) {
        picks.push_back({rows.size(), entries[k].cls});
        rows.push_back(entries[k].point);
      }
      Tape tape;
      const NodeId f = tape.add_constant(detail::gather_rows(features, rows));
      const NodeId logits =
          append_classifier(tape, f, state.params.classifier, true);
      append_seg_ce(tape, logits, picks);
      tape.forward(classifier_tensors(state.params.classifier));
      const GradientSet grads = tape.backward();
      const auto pids = grads.parameter_ids();
      adam_apply({&state.params.classifier.Wc, &state.params.classifier.bc},
                 {&grads.at(pids[0]), &grads.at(pids[1])}, state.classifier_opt,
                 lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    }
  }
}

namespace detail {

/// Joint alternative: the decoupled loop with the freezes removed. Both
/// parameter groups update through both phases, on the combined objective
/// first and on the label-source cross-entropy after, so the comparison
/// against the decoupled schedule isolates the freezing alone: losses,
/// label sources and epoch counts stay identical.
inline void step_joint(RunState& state, const Scene& scene, const LabelMask& mask,
                       const TrainConfig& cfg) {
  const std::vector<double> rho = imbalance_ratios(mask, scene);
  const Tensor aug = augmented_inputs(scene, build_knn(scene, cfg.knn_k));

  std::vector<bool> is_labeled(scene.point_count(), false);
  for (std::size_t i : mask.labeled_indices) is_labeled[i] = true;
  std::vector<std::size_t> unlabeled;
  for (std::size_t i = 0; i < scene.point_count(); ++i)
    if (!is_labeled[i]) unlabeled.push_back(i);
  if (unlabeled.empty()) {
    state.pseudo = PseudoLabelSet{};
  } else {
    Tape tape;
    const NodeId f = append_backbone(tape, gather_rows(aug, unlabeled),
                                     state.params.backbone, false);
    tape.row_softmax(append_classifier(tape, f, state.params.classifier, false));
    const Tensor probs = tape.forward({});
    PseudoLabelSet rows = select_pseudo_labels(probs, rho, cfg.selector);
    state.pseudo = PseudoLabelSet{};
    for (PseudoLabel e : rows.entries) {
      e.point = unlabeled[e.point];
      state.pseudo.entries.push_back(e);
    }
  }
  if (state.pseudo.entries.empty())
    state.warnings.push_back("iteration " + std::to_string(state.iteration + 1) +
                             ": empty pseudo-label set, focal branch skipped");

  state.tracker.reset();
  state.backbone_opt.reset(backbone_tensors(state.params.backbone));
  state.classifier_opt.reset(classifier_tensors(state.params.classifier));

  std::vector<TrainEntry> entries = labeled_entries(scene, mask);
  for (const PseudoLabel& e : state.pseudo.entries)
    entries.push_back({e.point, e.cls, true});

  for (std::size_t epoch = 0; epoch < cfg.backbone_epochs; ++epoch) {
    const double lr =
        cfg.inner_lr * std::pow(cfg.inner_lr_decay, static_cast<double>(epoch));
    state.rng.shuffle(entries);
    for (const auto& [lo, hi] : chunk_spans(entries.size(), cfg.batch_count)) {
      std::vector<std::size_t> rows;
      std::vector<PickEntry> all_picks;
      PseudoLabelSet chunk_pseudo;
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t row = rows.size();
        all_picks.push_back({row, entries[k].cls});
        if (entries[k].is_pseudo)
          chunk_pseudo.entries.push_back(
              {row, entries[k].cls, 0.0, PseudoRound::Certain});
        rows.push_back(entries[k].point);
      }
      const FocusingFactors factors =
          focusing_factors(state.tracker, rho, cfg.gamma_scale);

      Tape tape;
      const NodeId features =
          append_backbone(tape, gather_rows(aug, rows), state.params.backbone, true);
      const NodeId logits =
          append_classifier(tape, features, state.params.classifier, true);
      const bool focal = cfg.use_focal_branch && !chunk_pseudo.entries.empty();
      const NodeId seg = append_seg_ce(tape, logits, all_picks);
      if (focal) {
        const NodeId mi = append_mi_focal(tape, tape.row_softmax(logits),
                                          chunk_pseudo, factors, cfg.alpha_t);
        append_feature_loss(tape, mi, seg, cfg.unsup_weight);
      }

      std::vector<Tensor> inputs = backbone_tensors(state.params.backbone);
      for (Tensor& t : classifier_tensors(state.params.classifier))
        inputs.push_back(std::move(t));
      tape.forward(inputs);
      const GradientSet grads = tape.backward();
      const auto pids = grads.parameter_ids();

      const GradSplit split = split_logit_gradients(grads.at(logits), all_picks);
      state.tracker.update(split.pos, split.neg);

      adam_apply({&state.params.backbone.W1, &state.params.backbone.b1,
                  &state.params.backbone.W2, &state.params.backbone.b2},
                 {&grads.at(pids[0]), &grads.at(pids[1]), &grads.at(pids[2]),
                  &grads.at(pids[3])},
                 state.backbone_opt, lr, cfg.adam_beta1, cfg.adam_beta2,
                 cfg.adam_eps);
      adam_apply({&state.params.classifier.Wc, &state.params.classifier.bc},
                 {&grads.at(pids[4]), &grads.at(pids[5])}, state.classifier_opt,
                 lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    }
  }

  std::vector<TrainEntry> boundary;
  if (cfg.label_mode == ClassifierLabelMode::GroundTruth ||
      cfg.label_mode == ClassifierLabelMode::GroundTruthAndPseudo)
    boundary = labeled_entries(scene, mask);
  if (cfg.label_mode == ClassifierLabelMode::Pseudo ||
      cfg.label_mode == ClassifierLabelMode::GroundTruthAndPseudo) {
    if (cfg.label_mode == ClassifierLabelMode::Pseudo && state.pseudo.entries.empty())
      throw std::runtime_error(
          "classifier phase: pseudo label source selected but the set is empty");
    for (const PseudoLabel& e : state.pseudo.entries)
      boundary.push_back({e.point, e.cls, true});
  }

  state.backbone_opt.reset(backbone_tensors(state.params.backbone));
  state.classifier_opt.reset(classifier_tensors(state.params.classifier));

  for (std::size_t epoch = 0; epoch < cfg.classifier_epochs; ++epoch) {
    const double lr =
        cfg.inner_lr * std::pow(cfg.inner_lr_decay, static_cast<double>(epoch));
    state.rng.shuffle(boundary);
    for (const auto& [lo, hi] : chunk_spans(boundary.size(), cfg.batch_count)) {
      std::vector<std::size_t> rows;
      std::vector<PickEntry> picks;
      for (std::size_t k = lo; k < hi; ++k) {
        picks.push_back({rows.size(), boundary[k].cls});
        rows.push_back(boundary[k].point);
      }
      Tape tape;
      const NodeId features =
          append_backbone(tape, gather_rows(aug, rows), state.params.backbone, true);
      const NodeId logits =
          append_classifier(tape, features, state.params.classifier, true);
      append_seg_ce(tape, logits, picks);

      std::vector<Tensor> inputs = backbone_tensors(state.params.backbone);
      for (Tensor& t : classifier_tensors(state.params.classifier))
        inputs.push_back(std::move(t));
      tape.forward(inputs);
      const GradientSet grads = tape.backward();
      const auto pids = grads.parameter_ids();
      adam_apply({&state.params.backbone.W1, &state.params.backbone.b1,
                  &state.params.backbone.W2, &state.params.backbone.b2},
                 {&grads.at(pids[0]), &grads.at(pids[1]), &grads.at(pids[2]),
                  &grads.at(pids[3])},
                 state.backbone_opt, lr, cfg.adam_beta1, cfg.adam_beta2,
                 cfg.adam_eps);
      adam_apply({&state.params.classifier.Wc, &state.params.classifier.bc},
                 {&grads.at(pids[4]), &grads.at(pids[5])}, state.classifier_opt,
                 lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    }
  }
}

}  // namespace detail

/// Full schedule: pretrain, then outer iterations of the two phases (or the
/// joint step), with metrics over every point after each iteration. The
/// observer, when given, sees the state right after each iteration's record
/// is taken; experiment drivers use it to write per-iteration checkpoints.
inline RunResult run_training(
    const Scene& scene, const LabelMask& mask, const TrainConfig& cfg,
    const std::function<void(const RunState&, const IterationRecord&)>&
        on_iteration = {}) {
  cfg.validate();
  RunResult result;
  result.state = pretrain(scene, mask, cfg);

  const NeighborIndex nn = build_knn(scene, cfg.knn_k);
  const ClassGroups groups = tercile_groups(scene.class_counts);
  const std::vector<double> rho = imbalance_ratios(mask, scene);

  for (std::size_t it = 0; it < cfg.outer_iterations; ++it) {
    if (cfg.decoupled) {
      step_backbone(result.state, scene, mask, cfg);
      step_classifier(result.state, scene, mask, cfg);
    } else {
      detail::step_joint(result.state, scene, mask, cfg);
    }
    result.state.iteration = it + 1;

    IterationRecord rec;
    rec.iteration = it + 1;
    rec.pseudo = result.state.pseudo;
    rec.grad_ratios = result.state.tracker.ratios();
    rec.factors = focusing_factors(result.state.tracker, rho, cfg.gamma_scale);
    rec.metrics = iou_report(
        confusion(predict_labels(result.state.params, scene, nn),
                  scene.gt_labels, scene.class_count()),
        groups);
    result.records.push_back(std::move(rec));
    if (on_iteration) on_iteration(result.state, result.records.back());
  }
  return result;
}

// Run checkpoint: the model block plus optimizer moments and the outer
// iteration counter, for inspection tooling.

inline constexpr std::string_view kRunCheckpointMagic = "TSEGRUNS";

inline std::vector<std::uint8_t> run_checkpoint_bytes(const RunState& state,
                                                      std::size_t K) {
  std::vector<std::uint8_t> out;
  for (char c : kRunCheckpointMagic) out.push_back(static_cast<std::uint8_t>(c));
  put_u8(out, 1);
  put_u32(out, static_cast<std::uint32_t>(state.iteration));
  const auto model = checkpoint_bytes(state.params, K);
  put_u64(out, model.size());
  out.insert(out.end(), model.begin(), model.end());
  const auto put_opt = [&](const AdamState& opt) {
    put_u64(out, opt.step);
    put_u32(out, static_cast<std::uint32_t>(opt.m.size()));
    for (const Tensor& t : opt.m) {
      put_u32(out, static_cast<std::uint32_t>(t.rows()));
      put_u32(out, static_cast<std::uint32_t>(t.cols()));
      put_tensor(out, t);
    }
    for (const Tensor& t : opt.v) {
      put_u32(out, static_cast<std::uint32_t>(t.rows()));
      put_u32(out, static_cast<std::uint32_t>(t.cols()));
      put_tensor(out, t);
    }
  };
  put_opt(state.backbone_opt);
  put_opt(state.classifier_opt);
  return out;
}

struct RunCheckpointInfo {
  ModelParams params;
  std::size_t iteration = 0;
  std::size_t K = 0;
  std::size_t backbone_steps = 0;
  std::size_t classifier_steps = 0;
};

inline RunCheckpointInfo run_checkpoint_from_bytes(
    std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_bytes(kRunCheckpointMagic, "run checkpoint magic");
  const std::uint8_t version = r.u8();
  if (version != 1)
    throw std::runtime_error("run checkpoint version " +
                             std::to_string(version) + " unsupported");
  RunCheckpointInfo info;
  info.iteration = r.u32();
  const std::size_t model_len = r.u64();
  const std::size_t model_at = r.offset();
  if (model_len > bytes.size() - model_at)
    throw std::runtime_error("run checkpoint: model block overruns the file");
  info.params = checkpoint_from_bytes(bytes.subspan(model_at, model_len), &info.K);
  ByteReader rest(bytes.subspan(model_at + model_len));
  const auto skip_opt = [&](std::size_t& steps) {
    steps = rest.u64();
    const std::size_t n = rest.u32();
    for (std::size_t pass = 0; pass < 2; ++pass)
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t rows = rest.u32();
        const std::size_t cols = rest.u32();
        rest.tensor(rows, cols);
      }
  };
  skip_opt(info.backbone_steps);
  skip_opt(info.classifier_steps);
  return info;
}

}  // namespace tailseg
