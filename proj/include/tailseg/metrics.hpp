#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace tailseg {

// Confusion-matrix metrics: per-class IoU, their mean, overall accuracy, and
// group means over head/waist/tail class terciles.

struct ConfusionMatrix {
  std::size_t class_count = 0;
  std::vector<std::uint64_t> counts;  // row-major, (gt, pred)

  explicit ConfusionMatrix(std::size_t C)
      : class_count(C), counts(C * C, 0) {}

  std::uint64_t& at(std::size_t gt, std::size_t pred) {
    return counts[gt * class_count + pred];
  }
  std::uint64_t at(std::size_t gt, std::size_t pred) const {
    return counts[gt * class_count + pred];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (std::uint64_t v : counts) t += v;
    return t;
  }

  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t c = 0; c < class_count; ++c) t += at(c, c);
    return t;
  }
};

inline ConfusionMatrix confusion(const std::vector<std::size_t>& pred,
                                 const std::vector<std::size_t>& gt,
                                 std::size_t class_count) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("confusion: " + std::to_string(pred.size()) +
                                " predictions for " + std::to_string(gt.size()) +
                                " ground-truth labels");
  ConfusionMatrix cm(class_count);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] >= class_count || gt[i] >= class_count)
      throw std::invalid_argument("confusion: class id out of range at point " +
                                  std::to_string(i));
    cm.at(gt[i], pred[i])++;
  }
  return cm;
}

/// Head/waist/tail split: classes ranked by ground-truth count (descending,
/// ties to the lower id); the first ceil(C/3) are head, the last ceil(C/3)
/// tail, the middle waist. Waist may be empty for tiny C.
struct ClassGroups {
  std::vector<std::size_t> head, waist, tail;
};

inline ClassGroups tercile_groups(const std::vector<std::size_t>& class_counts) {
  const std::size_t C = class_counts.size();
  if (C < 2) throw std::invalid_argument("groups: need at least 2 classes");
  std::vector<std::size_t> order(C);
  for (std::size_t c = 0; c < C; ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return class_counts[a] > class_counts[b];
  });
  const std::size_t span = (C + 2) / 3;
  ClassGroups g;
  g.head.assign(order.begin(), order.begin() + static_cast<long>(span));
  g.tail.assign(order.end() - static_cast<long>(span), order.end());
  if (C > 2 * span)
    g.waist.assign(order.begin() + static_cast<long>(span),
                   order.end() - static_cast<long>(span));
  std::sort(g.head.begin(), g.head.end());
  std::sort(g.waist.begin(), g.waist.end());
  std::sort(g.tail.begin(), g.tail.end());
  return g;
}

// What to do with a class whose IoU denominator is zero (absent from both
// prediction and ground truth): leave it out of the means, or score it 0.
enum class UndefinedIouPolicy { Exclude, Zero };

struct MetricsReport {
  std::vector<double> iou;        // NaN where undefined
  std::vector<bool> iou_defined;
  double miou = 0.0;
  double oa = 0.0;
  double head_iou = std::numeric_limits<double>::quiet_NaN();
  double waist_iou = std::numeric_limits<double>::quiet_NaN();
  double tail_iou = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline double group_mean(const std::vector<double>& iou,
                         const std::vector<bool>& defined,
                         const std::vector<std::size_t>& group,
                         UndefinedIouPolicy policy) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c : group) {
    if (defined[c]) {
      sum += iou[c];
      ++n;
    } else if (policy == UndefinedIouPolicy::Zero) {
      ++n;
    }
  }
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  return sum / static_cast<double>(n);
}

}  // namespace detail

inline MetricsReport iou_report(
    const ConfusionMatrix& cm, const ClassGroups& groups,
    UndefinedIouPolicy policy = UndefinedIouPolicy::Exclude) {
  const std::size_t C = cm.class_count;
  if (cm.total() == 0) throw std::invalid_argument("metrics: empty confusion matrix");
  MetricsReport r;
  r.iou.assign(C, std::numeric_limits<double>::quiet_NaN());
  r.iou_defined.assign(C, false);

  double miou_sum = 0.0;
  std::size_t miou_n = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const std::uint64_t tp = cm.at(c, c);
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t o = 0; o < C; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom > 0) {
      r.iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
      r.iou_defined[c] = true;
      miou_sum += r.iou[c];
      ++miou_n;
    } else if (policy == UndefinedIouPolicy::Zero) {
      ++miou_n;
    }
  }
  r.miou = miou_n > 0 ? miou_sum / static_cast<double>(miou_n) : 0.0;
  r.oa = static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
  r.head_iou = detail::group_mean(r.iou, r.iou_defined, groups.head, policy);
  r.waist_iou = detail::group_mean(r.iou, r.iou_defined, groups.waist, policy);
  r.tail_iou = detail::group_mean(r.iou, r.iou_defined, groups.tail, policy);
  return r;
}

// Long CSV: per-class rows then summary rows, stable schema.

inline std::string metrics_csv_header() { return "iteration,kind,key,value\n"; }

inline void append_metrics_csv(std::string& out, std::size_t iteration,
                               const MetricsReport& report) {
  char line[96];
  for (std::size_t c = 0; c < report.iou.size(); ++c) {
    std::snprintf(line, sizeof line, "%zu,iou,%zu,%.17g\n", iteration, c,
                  report.iou[c]);
    out += line;
  }
  const auto row = [&](const char* kind, const char* key, double v) {
    std::snprintf(line, sizeof line, "%zu,%s,%s,%.17g\n", iteration, kind, key, v);
    out += line;
  };
  row("miou", "", report.miou);
  row("oa", "", report.oa);
  row("group_iou", "head", report.head_iou);
  row("group_iou", "waist", report.waist_iou);
  row("group_iou", "tail", report.tail_iou);
}

}  // namespace tailseg
