#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "vphype/errors.hpp"

namespace vphype {

// N x N integer counts, rows = ground truth, cols = prediction.
struct ConfusionMatrix {
  std::int64_t num_classes = 0;
  std::vector<std::int64_t> counts;  // row-major N*N
  std::vector<std::string> class_names;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::int64_t n, std::vector<std::string> names = {})
      : num_classes(n), counts(static_cast<std::size_t>(n * n), 0), class_names(std::move(names)) {
    if (n < 1) throw ContractError("confusion matrix needs at least one class");
    if (class_names.empty()) {
      for (std::int64_t i = 0; i < n; ++i) class_names.push_back("class" + std::to_string(i));
    }
  }

  void add(std::int64_t truth, std::int64_t pred, std::int64_t n = 1) {
    if (truth < 0 || truth >= num_classes || pred < 0 || pred >= num_classes) {
      throw LabelError("confusion entry (" + std::to_string(truth) + "," + std::to_string(pred) +
                       ") out of range for " + std::to_string(num_classes) + " classes");
    }
    counts[truth * num_classes + pred] += n;
  }

  std::int64_t at(std::int64_t truth, std::int64_t pred) const {
    return counts[truth * num_classes + pred];
  }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto v : counts) t += v;
    return t;
  }

  // Associative, commutative shard merge for parallel evaluation.
  static ConfusionMatrix merge(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    if (a.num_classes != b.num_classes) throw DimensionError("confusion matrix merge size mismatch");
    ConfusionMatrix out = a;
    for (std::size_t i = 0; i < out.counts.size(); ++i) out.counts[i] += b.counts[i];
    return out;
  }
};

struct MetricsReport {
  double overall_accuracy = 0.0;
  double average_accuracy = 0.0;
  double kappa = 0.0;
  std::vector<double> per_class_recall;      // NaN-free; absent classes skipped
  std::vector<bool> class_present;           // has ground-truth pixels
  std::vector<std::int64_t> skipped_classes; // indices absent from the ground truth
  bool kappa_degenerate = false;             // p_e == 1 handled by convention
};

// OA = trace/total, AA = mean of defined per-class recalls, and Cohen's kappa
// (p_o - p_e) / (1 - p_e) with p_e from row/column marginals. Classes with no
// ground-truth rows are skipped in AA and reported as absent. The removable
// singularity p_e = 1 maps to kappa = 1 if p_o = 1 else 0.
inline MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  std::int64_t n = cm.num_classes;
  std::int64_t total = cm.total();
  if (total <= 0) throw EvalError("empty evaluation: confusion matrix has no counts");

  MetricsReport r;
  r.per_class_recall.assign(static_cast<std::size_t>(n), 0.0);
  r.class_present.assign(static_cast<std::size_t>(n), false);

  std::int64_t trace = 0;
  std::vector<std::int64_t> row_sum(static_cast<std::size_t>(n), 0);
  std::vector<std::int64_t> col_sum(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    trace += cm.at(i, i);
    for (std::int64_t j = 0; j < n; ++j) {
      row_sum[i] += cm.at(i, j);
      col_sum[j] += cm.at(i, j);
    }
  }
  r.overall_accuracy = static_cast<double>(trace) / static_cast<double>(total);

  double recall_sum = 0.0;
  std::int64_t defined = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (row_sum[i] > 0) {
      r.class_present[i] = true;
      r.per_class_recall[i] = static_cast<double>(cm.at(i, i)) / static_cast<double>(row_sum[i]);
      recall_sum += r.per_class_recall[i];
      ++defined;
    } else {
      r.skipped_classes.push_back(i);
    }
  }
  if (defined == 0) throw EvalError("empty evaluation: no class has ground-truth samples");
  r.average_accuracy = recall_sum / static_cast<double>(defined);

  double p_o = r.overall_accuracy;
  double p_e = 0.0;
  double denom = static_cast<double>(total) * static_cast<double>(total);
  for (std::int64_t i = 0; i < n; ++i) {
    p_e += static_cast<double>(row_sum[i]) * static_cast<double>(col_sum[i]) / denom;
  }
  if (p_e >= 1.0) {
    r.kappa_degenerate = true;
    r.kappa = p_o >= 1.0 ? 1.0 : 0.0;
  } else {
    r.kappa = (p_o - p_e) / (1.0 - p_e);
  }
  return r;
}

// Deterministic key-sorted JSON document: overall metrics, per-class recalls,
// raw confusion counts.
inline nlohmann::json metrics_report_json(const ConfusionMatrix& cm, const MetricsReport& r) {
  nlohmann::json j;
  j["overall"]["oa"] = r.overall_accuracy;
  j["overall"]["aa"] = r.average_accuracy;
  j["overall"]["kappa"] = r.kappa;
  j["overall"]["total"] = cm.total();
  j["overall"]["kappa_degenerate"] = r.kappa_degenerate;
  nlohmann::json recalls;
  for (std::int64_t i = 0; i < cm.num_classes; ++i) {
    if (r.class_present[i]) {
      recalls[cm.class_names[i]] = r.per_class_recall[i];
    }
  }
  j["per_class_recall"] = recalls;
  nlohmann::json skipped = nlohmann::json::array();
  for (auto i : r.skipped_classes) skipped.push_back(cm.class_names[i]);
  j["skipped_classes"] = skipped;
  nlohmann::json rows = nlohmann::json::array();
  for (std::int64_t i = 0; i < cm.num_classes; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::int64_t jx = 0; jx < cm.num_classes; ++jx) row.push_back(cm.at(i, jx));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  return j;
}

}  // namespace vphype
