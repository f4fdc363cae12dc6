#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "tailseg/tensor.hpp"

namespace tailseg {

// Two-round pseudo-label selection over the probability rows of the
// unlabeled points. Round 1 keeps high-confidence predictions behind a
// per-class moving threshold; round 2 revisits the rest and admits
// tail-class predictions behind a looser, imbalance-scaled threshold.
// Point indices here are row indices of the matrix handed in; the caller
// owns the mapping back to scene points.

enum class ThresholdKind { Certain, Uncertain };

struct ThresholdVector {
  ThresholdKind kind = ThresholdKind::Certain;
  std::vector<double> values;
};

enum class PseudoRound { Certain, Uncertain };

struct PseudoLabel {
  std::size_t point = 0;
  std::size_t cls = 0;
  double confidence = 0.0;
  PseudoRound round = PseudoRound::Certain;
};

struct PseudoLabelSet {
  std::vector<PseudoLabel> entries;  // sorted by point index, no duplicates

  std::size_t size() const { return entries.size(); }
  std::size_t count_round(PseudoRound r) const {
    std::size_t n = 0;
    for (const auto& e : entries)
      if (e.round == r) ++n;
    return n;
  }
};

// How the per-class ratio feeds the round-2 threshold term (1/rho_c)^beta.
// TailAnchored divides by the rarest labeled count, the default: mid-tail
// classes get progressively lower bars while the rarest class, whose
// threshold pins at 1.0, keeps relying on round 1 and the certain window.
// HeadAnchored divides the other way around, so every rare class gets a low
// bar and round 2 harvests aggressively; that admits enough wrong labels on
// overlapping scenes to hurt more than it helps, so it is opt-in.
enum class RhoMode { TailAnchored, HeadAnchored };

struct SelectorConfig {
  double delta_len = 0.1;  // width of the moving confidence window
  double delta_d = 0.5;    // lower bound of the certain threshold
  double beta = 0.5;       // round-2 expansion rate, 0 disables round 2
  std::size_t tail_count = 0;  // 0 means ceil(C/2)
  RhoMode rho_mode = RhoMode::TailAnchored;

  void validate() const {
    if (!(delta_len > 0.0 && delta_len < 1.0))
      throw std::invalid_argument("selector: delta_len must be in (0,1)");
    if (!(delta_d >= 0.5 && delta_d < 1.0))
      throw std::invalid_argument("selector: delta_d must be in [0.5,1)");
    if (!(beta >= 0.0 && beta <= 1.0))
      throw std::invalid_argument("selector: beta must be in [0,1]");
  }
};

namespace detail {

inline void check_prob_matrix(const Tensor& probs, const char* what) {
  if (probs.rows() == 0 || probs.cols() == 0)
    throw std::invalid_argument(std::string(what) + ": empty probability matrix");
}

/// Row argmax with ties to the lower class id.
inline std::size_t row_argmax(const Tensor& probs, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < probs.cols(); ++c)
    if (probs(row, c) > probs(row, best)) best = c;
  return best;
}

}  // namespace detail

/// Per-class certain threshold: column max minus the window width, floored
/// at delta_d.
inline ThresholdVector certain_thresholds(const Tensor& probs, double delta_len,
                                          double delta_d) {
  detail::check_prob_matrix(probs, "certain_thresholds");
  ThresholdVector t;
  t.kind = ThresholdKind::Certain;
  t.values.resize(probs.cols());
  for (std::size_t c = 0; c < probs.cols(); ++c) {
    double colmax = 0.0;
    for (std::size_t i = 0; i < probs.rows(); ++i)
      colmax = std::max(colmax, probs(i, c));
    t.values[c] = std::max(colmax - delta_len, delta_d);
  }
  return t;
}

/// Per-class uncertain threshold: min(column max, (1/rho_c)^beta). The probs
/// argument must hold only the rows still unselected after round 1.
inline ThresholdVector uncertain_thresholds(const Tensor& probs,
                                            const std::vector<double>& rho,
                                            double beta) {
  detail::check_prob_matrix(probs, "uncertain_thresholds");
  if (!(beta >= 0.0 && beta <= 1.0))
    throw std::invalid_argument("uncertain_thresholds: beta must be in [0,1]");
  if (rho.size() != probs.cols())
    throw std::invalid_argument("uncertain_thresholds: rho size mismatch");
  for (double r : rho)
    if (!(r >= 1.0))
      throw std::invalid_argument("uncertain_thresholds: rho entries must be >= 1");
  ThresholdVector t;
  t.kind = ThresholdKind::Uncertain;
  t.values.resize(probs.cols());
  for (std::size_t c = 0; c < probs.cols(); ++c) {
    double colmax = 0.0;
    for (std::size_t i = 0; i < probs.rows(); ++i)
      colmax = std::max(colmax, probs(i, c));
    t.values[c] = std::min(colmax, std::pow(1.0 / rho[c], beta));
  }
  return t;
}

/// Rebase a tail-anchored ratio vector onto the requested anchor.
inline std::vector<double> rho_with_mode(std::vector<double> rho, RhoMode mode) {
  if (mode == RhoMode::TailAnchored) return rho;
  double top = 1.0;
  for (double r : rho) top = std::max(top, r);
  for (double& r : rho) r = top / r;
  return rho;
}

/// The `count` classes with the fewest argmax predictions. Ties prefer the
/// higher class id, which by construction is the rarer class.
inline std::vector<std::size_t> tail_classes_by_predictions(const Tensor& probs,
                                                            std::size_t count) {
  detail::check_prob_matrix(probs, "tail_classes_by_predictions");
  const std::size_t C = probs.cols();
  if (count > C)
    throw std::invalid_argument("tail_classes_by_predictions: count exceeds C");
  std::vector<std::size_t> predicted(C, 0);
  for (std::size_t i = 0; i < probs.rows(); ++i)
    predicted[detail::row_argmax(probs, i)]++;
  std::vector<std::size_t> order(C);
  for (std::size_t c = 0; c < C; ++c) order[c] = c;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (predicted[a] != predicted[b]) return predicted[a] < predicted[b];
    return a > b;
  });
  std::vector<std::size_t> tail(order.begin(),
                                order.begin() + static_cast<long>(count));
  std::sort(tail.begin(), tail.end());
  return tail;
}

/// Round 1: a point joins under class c when its probability strictly
/// exceeds the certain threshold of c; several qualifying classes resolve to
/// the highest-probability one (ties to the lower id). Round 2: remaining
/// points whose argmax class is a tail class join when that probability
/// strictly exceeds the uncertain threshold.
inline PseudoLabelSet two_round_select(const Tensor& probs,
                                       const ThresholdVector& cer,
                                       const ThresholdVector& uncer,
                                       const std::vector<std::size_t>& tail_classes) {
  detail::check_prob_matrix(probs, "two_round_select");
  const std::size_t C = probs.cols();
  if (cer.values.size() != C || uncer.values.size() != C)
    throw std::invalid_argument("two_round_select: threshold size mismatch");
  std::vector<bool> is_tail(C, false);
  for (std::size_t c : tail_classes) {
    if (c >= C)
      throw std::invalid_argument("two_round_select: tail class " +
                                  std::to_string(c) + " out of range");
    is_tail[c] = true;
  }

  PseudoLabelSet out;
  std::vector<bool> taken(probs.rows(), false);

  for (std::size_t i = 0; i < probs.rows(); ++i) {
    bool any = false;
    std::size_t best = 0;
    for (std::size_t c = 0; c < C; ++c) {
      if (probs(i, c) > cer.values[c]) {
        if (!any || probs(i, c) > probs(i, best)) best = c;
        any = true;
      }
    }
    if (any) {
      out.entries.push_back({i, best, probs(i, best), PseudoRound::Certain});
      taken[i] = true;
    }
  }

  for (std::size_t i = 0; i < probs.rows(); ++i) {
    if (taken[i]) continue;
    const std::size_t c = detail::row_argmax(probs, i);
    if (!is_tail[c]) continue;
    if (probs(i, c) > uncer.values[c]) {
      out.entries.push_back({i, c, probs(i, c), PseudoRound::Uncertain});
      taken[i] = true;
    }
  }

  std::sort(out.entries.begin(), out.entries.end(),
            [](const PseudoLabel& a, const PseudoLabel& b) {
              return a.point < b.point;
            });
  for (std::size_t k = 1; k < out.entries.size(); ++k)
    if (out.entries[k].point == out.entries[k - 1].point)
      throw std::logic_error("two_round_select: point selected twice");
  return out;
}

/// Full pipeline: certain thresholds, round 1, uncertain thresholds over the
/// remaining rows, round 2. rho must be tail-anchored (rarest class at 1);
/// the config's rho_mode is applied here.
inline PseudoLabelSet select_pseudo_labels(const Tensor& probs,
                                           const std::vector<double>& rho,
                                           const SelectorConfig& cfg) {
  cfg.validate();
  const std::size_t C = probs.cols();
  const ThresholdVector cer = certain_thresholds(probs, cfg.delta_len, cfg.delta_d);

  // rows that survive round 1, for the uncertain column maxima
  std::vector<std::size_t> remaining;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    bool hit = false;
    for (std::size_t c = 0; c < C && !hit; ++c)
      if (probs(i, c) > cer.values[c]) hit = true;
    if (!hit) remaining.push_back(i);
  }

  ThresholdVector uncer;
  uncer.kind = ThresholdKind::Uncertain;
  if (remaining.empty()) {
    // nothing left to expand; round 2 cannot fire regardless of thresholds
    uncer.values.assign(C, 1.0);
  } else {
    Tensor rest(remaining.size(), C);
    for (std::size_t k = 0; k < remaining.size(); ++k)
      for (std::size_t c = 0; c < C; ++c) rest(k, c) = probs(remaining[k], c);
    uncer = uncertain_thresholds(rest, rho_with_mode(rho, cfg.rho_mode), cfg.beta);
  }

  const std::size_t tail_n =
      cfg.tail_count > 0 ? cfg.tail_count : (C + 1) / 2;
  return two_round_select(probs, cer, uncer,
                          tail_classes_by_predictions(probs, tail_n));
}

// CSV dump, long format, one selected point per row.

inline std::string pseudo_csv_header() {
  return "iteration,point_index,class,confidence,round\n";
}

inline void append_pseudo_csv(std::string& out, std::size_t iteration,
                              const PseudoLabelSet& set) {
  char line[96];
  for (const PseudoLabel& e : set.entries) {
    std::snprintf(line, sizeof line, "%zu,%zu,%zu,%.17g,%s\n", iteration,
                  e.point, e.cls, e.confidence,
                  e.round == PseudoRound::Certain ? "certain" : "uncertain");
    out += line;
  }
}

}  // namespace tailseg
