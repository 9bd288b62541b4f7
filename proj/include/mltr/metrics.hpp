#pragma once

// Multi-label evaluation: per-class all-points average precision, macro
// (per-class) and micro (overall) precision/recall/F1 at a fixed threshold.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mltr/tensor.hpp"

namespace mltr {

struct MetricReport {
  double mean_ap = 0.0;            // mAP over classes with at least one positive
  double class_precision = 0.0;    // CP
  double class_recall = 0.0;       // CR
  double class_f1 = 0.0;           // CF1
  double overall_precision = 0.0;  // OP
  double overall_recall = 0.0;     // OR
  double overall_f1 = 0.0;         // OF1
  std::vector<double> per_class_ap;
  std::vector<std::size_t> classes_without_positives;  // excluded from mAP/CR
  double threshold = 0.5;

  /// Flat key-value block, one `name value` pair per line.
  std::string to_text() const {
    std::string out;
    out += "mAP " + dtos(mean_ap) + "\n";
    out += "CP " + dtos(class_precision) + "\n";
    out += "CR " + dtos(class_recall) + "\n";
    out += "CF1 " + dtos(class_f1) + "\n";
    out += "OP " + dtos(overall_precision) + "\n";
    out += "OR " + dtos(overall_recall) + "\n";
    out += "OF1 " + dtos(overall_f1) + "\n";
    out += "threshold " + dtos(threshold) + "\n";
    for (std::size_t j = 0; j < per_class_ap.size(); ++j)
      out += "AP[" + std::to_string(j) + "] " + dtos(per_class_ap[j]) + "\n";
    return out;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"mAP", mean_ap},
                          {"CP", class_precision},
                          {"CR", class_recall},
                          {"CF1", class_f1},
                          {"OP", overall_precision},
                          {"OR", overall_recall},
                          {"OF1", overall_f1},
                          {"per_class_ap", per_class_ap},
                          {"classes_without_positives", classes_without_positives},
                          {"threshold", threshold}};
  }
};

namespace detail {

inline double harmonic(double p, double r) { return p + r > 0 ? 2 * p * r / (p + r) : 0.0; }

}  // namespace detail

/// All-points average precision for one class; ties are broken by stable sort
/// on score then original index. Returns 0 when the class has no positives.
inline double average_precision(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t npos = 0;
  for (int y : labels) npos += y > 0 ? 1 : 0;
  if (npos == 0) return 0.0;
  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] > 0) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(npos);
}

/// Computes the full metric set from scores in [0,1] and {0,1} targets, both
/// [B, n]. A sample is predicted positive for a class when score > threshold.
template <class S>
MetricReport evaluate(const TensorT<S>& scores, const TensorT<S>& targets,
                      double threshold = 0.5) {
  if (scores.ndim() != 2 || targets.ndim() != 2 || scores.shape() != targets.shape())
    throw ShapeError("evaluate expects matching [B,n] scores and targets");
  for (S v : scores.data())
    if (v < S(0) || v > S(1)) throw ContractError("scores must lie in [0,1]");

  std::size_t b = scores.shape()[0], n = scores.shape()[1];
  MetricReport rep;
  rep.threshold = threshold;
  rep.per_class_ap.assign(n, 0.0);

  double sum_ap = 0.0, sum_prec = 0.0, sum_rec = 0.0;
  std::size_t with_pos = 0;
  std::size_t micro_tp = 0, micro_pred = 0, micro_pos = 0;

  std::vector<double> col(b);
  std::vector<int> lab(b);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t tp = 0, pred = 0, pos = 0;
    for (std::size_t i = 0; i < b; ++i) {
      col[i] = static_cast<double>(scores.data()[i * n + j]);
      lab[i] = targets.data()[i * n + j] > S(0.5) ? 1 : 0;
      bool predicted = col[i] > threshold;
      pred += predicted;
      pos += lab[i];
      tp += (predicted && lab[i]) ? 1 : 0;
    }
    micro_tp += tp;
    micro_pred += pred;
    micro_pos += pos;
    sum_prec += pred > 0 ? static_cast<double>(tp) / static_cast<double>(pred) : 0.0;
    if (pos > 0) {
      double ap = average_precision(col, lab);
      rep.per_class_ap[j] = ap;
      sum_ap += ap;
      sum_rec += static_cast<double>(tp) / static_cast<double>(pos);
      ++with_pos;
    } else {
      rep.classes_without_positives.push_back(j);
    }
  }

  rep.mean_ap = with_pos ? sum_ap / static_cast<double>(with_pos) : 0.0;
  rep.class_precision = n ? sum_prec / static_cast<double>(n) : 0.0;
  rep.class_recall = with_pos ? sum_rec / static_cast<double>(with_pos) : 0.0;
  rep.class_f1 = detail::harmonic(rep.class_precision, rep.class_recall);
  rep.overall_precision =
      micro_pred ? static_cast<double>(micro_tp) / static_cast<double>(micro_pred) : 0.0;
  rep.overall_recall =
      micro_pos ? static_cast<double>(micro_tp) / static_cast<double>(micro_pos) : 0.0;
  rep.overall_f1 = detail::harmonic(rep.overall_precision, rep.overall_recall);
  return rep;
}

/// Fraction of samples whose arg-max count logit equals the true count.
template <class S>
double count_top1_accuracy(const TensorT<S>& count_logits,
                           const std::vector<std::size_t>& z) {
  if (count_logits.ndim() != 2 || count_logits.shape()[0] != z.size())
    throw ShapeError("count_top1_accuracy expects [B,n+1] logits and B counts");
  std::size_t b = count_logits.shape()[0], k = count_logits.shape()[1];
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (count_logits.data()[i * k + j] > count_logits.data()[i * k + best]) best = j;
    hits += best == z[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

}  // namespace mltr
