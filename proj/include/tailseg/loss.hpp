#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "tailseg/autodiff.hpp"
#include "tailseg/pseudolabel.hpp"
#include "tailseg/tensor.hpp"

namespace tailseg {

// Loss family for the decoupled training scheme. The pseudo-label branch
// uses a per-class focal loss whose focusing exponent is steered by the
// accumulated gradient balance of each class; the supervised branch is a
// plain mean softmax cross-entropy. Focusing exponents are constants within
// a step: they come from accumulated statistics, never from the current
// graph, so no gradient flows through them.

inline constexpr double kLossProbFloor = 1e-12;

/// Accumulates per-class gradient magnitude, split into contributions that
/// pull the class probability up (its own targets) and ones that push it
/// down (other rows). The ratio g = pos/(pos+neg) says how balanced the
/// training signal of a class has been; rarely-targeted classes sink
/// towards 0.
class GradRatioTracker {
 public:
  explicit GradRatioTracker(std::size_t class_count)
      : pos_(class_count, 0.0), neg_(class_count, 0.0) {}

  std::size_t class_count() const { return pos_.size(); }

  void update(const std::vector<double>& pos, const std::vector<double>& neg) {
    if (pos.size() != pos_.size() || neg.size() != neg_.size())
      throw std::invalid_argument("grad tracker: class count mismatch");
    for (std::size_t c = 0; c < pos_.size(); ++c) {
      if (pos[c] < 0.0 || neg[c] < 0.0)
        throw std::invalid_argument("grad tracker: negative magnitude for class " +
                                    std::to_string(c));
      pos_[c] += pos[c];
      neg_[c] += neg[c];
    }
  }

  void reset() {
    std::fill(pos_.begin(), pos_.end(), 0.0);
    std::fill(neg_.begin(), neg_.end(), 0.0);
  }

  /// g per class, in [0,1]; 0 when nothing has accumulated yet.
  std::vector<double> ratios() const {
    std::vector<double> g(pos_.size());
    for (std::size_t c = 0; c < pos_.size(); ++c)
      g[c] = pos_[c] / (pos_[c] + neg_[c] + 1e-12);
    return g;
  }

  const std::vector<double>& accumulated_pos() const { return pos_; }
  const std::vector<double>& accumulated_neg() const { return neg_; }

 private:
  std::vector<double> pos_, neg_;
};

struct FocusingFactors {
  std::vector<double> gamma;  // clamped at 0
  std::vector<double> raw;    // pre-clamp values, for diagnostics
  double scale = 10.0;
};

struct LossValue {
  double total = 0.0;
  std::vector<double> per_class;  // sums to total
  bool empty_set = false;         // flagged when there was nothing to score

  void check() const {
    double s = 0.0;
    for (double v : per_class) s += v;
    if (std::abs(s - total) > 1e-12 * std::max(1.0, std::abs(total)))
      throw std::logic_error("loss breakdown does not sum to the total");
  }
};

/// Binary focal term -alpha*(1-p)^gamma*log(p).
inline double focal_binary(double p_t, double alpha, double gamma) {
  if (!(p_t > 0.0 && p_t <= 1.0))
    throw std::domain_error("focal: p_t must be in (0,1]");
  if (gamma < 0.0) throw std::invalid_argument("focal: gamma must be >= 0");
  const double mod = gamma == 0.0 ? 1.0 : std::pow(1.0 - p_t, gamma);
  return -alpha * mod * std::log(p_t);
}

/// gamma_c = max(0, s*(1-g_c) - 1/rho_c): classes whose gradient signal is
/// drowned out (small g) focus harder, discounted by how common the class
/// is. The raw value is kept for diagnostics.
inline FocusingFactors focusing_factors(const GradRatioTracker& tracker,
                                        const std::vector<double>& rho,
                                        double scale) {
  if (!(scale > 0.0))
    throw std::invalid_argument("focusing_factors: scale must be positive");
  if (rho.size() != tracker.class_count())
    throw std::invalid_argument("focusing_factors: rho size mismatch");
  for (double r : rho)
    if (!(r >= 1.0))
      throw std::invalid_argument("focusing_factors: rho entries must be >= 1");
  const std::vector<double> g = tracker.ratios();
  FocusingFactors f;
  f.scale = scale;
  f.raw.resize(g.size());
  f.gamma.resize(g.size());
  for (std::size_t c = 0; c < g.size(); ++c) {
    f.raw[c] = scale * (1.0 - g[c]) - 1.0 / rho[c];
    f.gamma[c] = std::max(0.0, f.raw[c]);
  }
  return f;
}

/// Focal loss summed over the pseudo-labeled points, each under its own
/// class exponent. Probabilities are clamped to [1e-12, 1] before the log.
inline LossValue mi_focal_loss(const Tensor& probs, const PseudoLabelSet& pseudo,
                               double alpha_t, const FocusingFactors& factors) {
  const std::size_t C = probs.cols();
  if (factors.gamma.size() != C)
    throw std::invalid_argument("mi_focal: factor count " +
                                std::to_string(factors.gamma.size()) +
                                " for " + std::to_string(C) + " classes");
  LossValue out;
  out.per_class.assign(C, 0.0);
  if (pseudo.entries.empty()) {
    out.empty_set = true;
    return out;
  }
  for (const PseudoLabel& e : pseudo.entries) {
    if (e.point >= probs.rows() || e.cls >= C)
      throw std::invalid_argument("mi_focal: pseudo entry outside probs");
    const double p =
        std::min(std::max(probs(e.point, e.cls), kLossProbFloor), 1.0);
    const double term = focal_binary(p, alpha_t, factors.gamma[e.cls]);
    out.per_class[e.cls] += term;
    out.total += term;
  }
  return out;
}

/// Mean cross-entropy -log p(true) over an explicit (row, class) list.
inline LossValue seg_ce(const Tensor& probs,
                        const std::vector<PickEntry>& labels) {
  if (labels.empty()) throw std::invalid_argument("seg_ce: empty label set");
  LossValue out;
  out.per_class.assign(probs.cols(), 0.0);
  const double inv = 1.0 / static_cast<double>(labels.size());
  for (const PickEntry& l : labels) {
    if (l.row >= probs.rows() || l.cls >= probs.cols())
      throw std::invalid_argument("seg_ce: label outside probs");
    const double p = std::min(std::max(probs(l.row, l.cls), kLossProbFloor), 1.0);
    const double term = -std::log(p) * inv;
    out.per_class[l.cls] += term;
    out.total += term;
  }
  return out;
}

/// Combined objective for backbone updates: unsup_weight * focal branch plus
/// the supervised cross-entropy. The weight defaults to 1 (plain sum).
inline LossValue feature_loss(const LossValue& mi_fl, const LossValue& seg,
                              double unsup_weight = 1.0) {
  if (mi_fl.per_class.size() != seg.per_class.size())
    throw std::invalid_argument("feature_loss: class count mismatch");
  LossValue out;
  out.total = unsup_weight * mi_fl.total + seg.total;
  out.per_class.resize(seg.per_class.size());
  for (std::size_t c = 0; c < out.per_class.size(); ++c)
    out.per_class[c] = unsup_weight * mi_fl.per_class[c] + seg.per_class[c];
  out.empty_set = mi_fl.empty_set;
  return out;
}

// Tape builders. The focal branch reads probabilities, the supervised branch
// reads logits through the fused stable node; both may hang off the same
// logits node.

inline NodeId append_mi_focal(Tape& tape, NodeId probs_node,
                              const PseudoLabelSet& pseudo,
                              const FocusingFactors& factors, double alpha_t) {
  const std::size_t C = tape.shape_of(probs_node).cols;
  if (factors.gamma.size() != C)
    throw std::invalid_argument("mi_focal: factor count mismatch");
  if (pseudo.entries.empty())
    throw std::invalid_argument("mi_focal: cannot build a node over an empty set");
  std::vector<PickEntry> picks;
  std::vector<double> exponents;
  picks.reserve(pseudo.entries.size());
  exponents.reserve(pseudo.entries.size());
  for (const PseudoLabel& e : pseudo.entries) {
    picks.push_back({e.point, e.cls});
    exponents.push_back(factors.gamma[e.cls]);
  }
  return tape.picked_focal(probs_node, std::move(picks), std::move(exponents),
                           alpha_t);
}

inline NodeId append_seg_ce(Tape& tape, NodeId logits_node,
                            const std::vector<PickEntry>& labels) {
  if (labels.empty()) throw std::invalid_argument("seg_ce: empty label set");
  return tape.softmax_cross_entropy(logits_node, labels,
                                    static_cast<double>(labels.size()));
}

inline NodeId append_feature_loss(Tape& tape, NodeId mi_focal_node,
                                  NodeId seg_node, double unsup_weight = 1.0) {
  return tape.add(tape.scalar_mul(unsup_weight, mi_focal_node), seg_node);
}

/// Split of a logit-gradient matrix into per-class positive and negative
/// magnitude: a row's target class collects |grad| as positive signal, every
/// other class on that row collects its |grad| as negative signal.
struct GradSplit {
  std::vector<double> pos, neg;
};

inline GradSplit split_logit_gradients(const Tensor& logit_grads,
                                       const std::vector<PickEntry>& targets) {
  GradSplit s;
  s.pos.assign(logit_grads.cols(), 0.0);
  s.neg.assign(logit_grads.cols(), 0.0);
  for (const PickEntry& t : targets) {
    if (t.row >= logit_grads.rows() || t.cls >= logit_grads.cols())
      throw std::invalid_argument("grad split: target outside gradient matrix");
    for (std::size_t c = 0; c < logit_grads.cols(); ++c) {
      const double m = std::abs(logit_grads(t.row, c));
      if (c == t.cls)
        s.pos[c] += m;
      else
        s.neg[c] += m;
    }
  }
  return s;
}

// Diagnostics dump for the focusing machinery, long CSV format.

inline std::string focus_csv_header() {
  return "iteration,class,grad_ratio,gamma_raw,gamma\n";
}

inline void append_focus_csv(std::string& out, std::size_t iteration,
                             const std::vector<double>& ratios,
                             const FocusingFactors& factors) {
  if (ratios.size() != factors.gamma.size())
    throw std::invalid_argument("focus csv: size mismatch");
  char line[128];
  for (std::size_t c = 0; c < ratios.size(); ++c) {
    std::snprintf(line, sizeof line, "%zu,%zu,%.17g,%.17g,%.17g\n", iteration,
                  c, ratios[c], factors.raw[c], factors.gamma[c]);
    out += line;
  }
}

}  // namespace tailseg
