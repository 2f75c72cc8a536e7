#pragma once

// Grade metrics: confusion matrix, precision/recall/F1, accuracy and MSE,
// one-vs-rest ROC AUC, and report rendering.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "koa/errors.hpp"
#include "koa/quantification.hpp"

namespace koa {

// Rows are true grades, columns predicted grades.
struct ConfusionMatrix {
  std::size_t classes = 5;
  std::vector<std::size_t> counts;

  explicit ConfusionMatrix(std::size_t k = 5) : classes(k), counts(k * k, 0) {}

  std::size_t& at(std::size_t t, std::size_t p) { return counts[t * classes + p]; }
  std::size_t at(std::size_t t, std::size_t p) const { return counts[t * classes + p]; }

  std::size_t row_sum(std::size_t t) const {
    std::size_t s = 0;
    for (std::size_t p = 0; p < classes; ++p) s += at(t, p);
    return s;
  }
  std::size_t col_sum(std::size_t p) const {
    std::size_t s = 0;
    for (std::size_t t = 0; t < classes; ++t) s += at(t, p);
    return s;
  }
  std::size_t trace() const {
    std::size_t s = 0;
    for (std::size_t k = 0; k < classes; ++k) s += at(k, k);
    return s;
  }
  std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> pred, std::size_t classes = 5) {
  if (truth.size() != pred.size())
    throw ArgumentError("confusion_matrix: " + std::to_string(truth.size()) + " labels vs " +
                        std::to_string(pred.size()) + " predictions");
  ConfusionMatrix m(classes);
  const int k = static_cast<int>(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= k || pred[i] < 0 || pred[i] >= k)
      throw ArgumentError("confusion_matrix: label out of range at index " + std::to_string(i));
    ++m.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
  }
  return m;
}

struct ClassScores {
  double precision = 0, recall = 0, f1 = 0;
  bool precision_degenerate = false;  // nothing predicted as this class
  bool recall_degenerate = false;     // class absent from truth
  bool f1_degenerate = false;         // precision + recall == 0
};

struct PrfSummary {
  std::vector<ClassScores> per_class;
  double mean_precision = 0, mean_recall = 0, mean_f1 = 0;  // unweighted over classes
};

inline PrfSummary precision_recall_f1(const ConfusionMatrix& m) {
  PrfSummary s;
  for (std::size_t k = 0; k < m.classes; ++k) {
    ClassScores c;
    const double tp = static_cast<double>(m.at(k, k));
    const std::size_t col = m.col_sum(k), row = m.row_sum(k);
    if (col == 0) c.precision_degenerate = true; else c.precision = tp / static_cast<double>(col);
    if (row == 0) c.recall_degenerate = true; else c.recall = tp / static_cast<double>(row);
    if (c.precision + c.recall == 0) c.f1_degenerate = true;
    else c.f1 = 2 * c.precision * c.recall / (c.precision + c.recall);
    s.per_class.push_back(c);
  }
  const double n = static_cast<double>(m.classes);
  for (const auto& c : s.per_class) {
    s.mean_precision += c.precision / n;
    s.mean_recall += c.recall / n;
    s.mean_f1 += c.f1 / n;
  }
  return s;
}

struct AccuracyMse {
  double accuracy = 0;
  double clsf_mse = 0;  // from predicted classes
  double reg_mse = 0;   // from continuous grades
};

inline AccuracyMse accuracy_and_mse(std::span<const int> truth, std::span<const GradePrediction> preds) {
  if (truth.size() != preds.size())
    throw ArgumentError("accuracy_and_mse: " + std::to_string(truth.size()) + " labels vs " +
                        std::to_string(preds.size()) + " predictions");
  if (truth.empty()) throw ArgumentError("accuracy_and_mse: no samples");
  AccuracyMse r;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double t = truth[i];
    r.accuracy += preds[i].predicted_class == truth[i] ? 1.0 : 0.0;
    r.clsf_mse += (preds[i].predicted_class - t) * (preds[i].predicted_class - t);
    r.reg_mse += (preds[i].continuous_grade - t) * (preds[i].continuous_grade - t);
  }
  const double n = static_cast<double>(truth.size());
  r.accuracy /= n;
  r.clsf_mse /= n;
  r.reg_mse /= n;
  return r;
}

// Mann-Whitney AUC with midranks for ties. nullopt when either the
// positive or the negative set is empty.
inline std::optional<double> binary_auc(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw ArgumentError("binary_auc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double n_pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (positive[i]) {
      n_pos += 1;
      rank_sum += rank[i];
    }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

// One-vs-rest AUC of probability column k against (truth == k).
inline std::vector<std::optional<double>> roc_auc_ovr(std::span<const int> truth,
                                                      std::span<const std::vector<double>> probs) {
  if (truth.size() != probs.size()) throw ArgumentError("roc_auc_ovr: length mismatch");
  if (probs.empty()) return {};
  const std::size_t k = probs.front().size();
  std::vector<std::optional<double>> out;
  std::vector<double> col(truth.size());
  std::unique_ptr<bool[]> pos(new bool[truth.size()]);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (probs[i].size() != k) throw DimensionError("roc_auc_ovr: ragged probability rows");
      col[i] = probs[i][c];
      pos[i] = truth[i] == static_cast<int>(c);
    }
    out.push_back(binary_auc(col, std::span<const bool>(pos.get(), truth.size())));
  }
  return out;
}

struct MetricsReport {
  ConfusionMatrix confusion{5};
  PrfSummary prf;
  std::vector<std::optional<double>> auc;
  std::optional<double> mean_auc;  // over classes with a defined AUC
  AccuracyMse scores;
  double rounded_accuracy = 0;  // continuous grade rounded half-up
};

inline MetricsReport build_report(std::span<const int> truth, std::span<const GradePrediction> preds) {
  MetricsReport r;
  r.scores = accuracy_and_mse(truth, preds);
  std::vector<int> pred_cls;
  std::vector<std::vector<double>> probs;
  double rounded = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    pred_cls.push_back(preds[i].predicted_class);
    probs.emplace_back(preds[i].class_probs.begin(), preds[i].class_probs.end());
    rounded += preds[i].rounded_grade == truth[i] ? 1.0 : 0.0;
  }
  r.rounded_accuracy = rounded / static_cast<double>(preds.size());
  r.confusion = confusion_matrix(truth, pred_cls);
  r.prf = precision_recall_f1(r.confusion);
  r.auc = roc_auc_ovr(truth, probs);
  double sum = 0, n = 0;
  for (const auto& a : r.auc)
    if (a) sum += *a, n += 1;
  if (n > 0) r.mean_auc = sum / n;
  return r;
}

inline std::string render_table(const MetricsReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  auto cell = [&](std::optional<double> v) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(4);
    if (v) c << *v; else c << "n/a";
    return c.str();
  };
  os << std::left << std::setw(7) << "Grade" << std::right << std::setw(11) << "Precision" << std::setw(11) << "Recall"
     << std::setw(11) << "F1" << std::setw(11) << "AUC" << std::setw(9) << "Support" << '\n';
  for (std::size_t k = 0; k < r.confusion.classes; ++k) {
    const auto& c = r.prf.per_class[k];
    os << std::left << std::setw(7) << k << std::right << std::setw(11) << c.precision << std::setw(11) << c.recall
       << std::setw(11) << c.f1 << std::setw(11) << cell(k < r.auc.size() ? r.auc[k] : std::nullopt) << std::setw(9)
       << r.confusion.row_sum(k) << '\n';
  }
  os << std::left << std::setw(7) << "Mean" << std::right << std::setw(11) << r.prf.mean_precision << std::setw(11)
     << r.prf.mean_recall << std::setw(11) << r.prf.mean_f1 << std::setw(11) << cell(r.mean_auc) << std::setw(9)
     << r.confusion.total() << '\n';
  os << "\naccuracy   " << r.scores.accuracy << "\nclsf_mse   " << r.scores.clsf_mse << "\nreg_mse    "
     << r.scores.reg_mse << "\nreg_round_accuracy " << r.rounded_accuracy << '\n';
  os << "\nconfusion (rows = true grade)\n";
  for (std::size_t t = 0; t < r.confusion.classes; ++t) {
    for (std::size_t p = 0; p < r.confusion.classes; ++p) os << (p ? " " : "") << std::setw(5) << r.confusion.at(t, p);
    os << '\n';
  }
  return os.str();
}

inline nlohmann::ordered_json report_json(const MetricsReport& r) {
  using nlohmann::ordered_json;
  auto opt = [](std::optional<double> v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
  ordered_json j;
  ordered_json conf = ordered_json::array();
  for (std::size_t t = 0; t < r.confusion.classes; ++t) {
    ordered_json row = ordered_json::array();
    for (std::size_t p = 0; p < r.confusion.classes; ++p) row.push_back(r.confusion.at(t, p));
    conf.push_back(row);
  }
  j["confusion"] = conf;
  ordered_json per = ordered_json::array();
  for (std::size_t k = 0; k < r.confusion.classes; ++k) {
    const auto& c = r.prf.per_class[k];
    ordered_json e;
    e["grade"] = k;
    e["precision"] = c.precision;
    e["recall"] = c.recall;
    e["f1"] = c.f1;
    e["auc"] = opt(k < r.auc.size() ? r.auc[k] : std::nullopt);
    e["support"] = r.confusion.row_sum(k);
    e["degenerate"] = {{"precision", c.precision_degenerate}, {"recall", c.recall_degenerate}, {"f1", c.f1_degenerate}};
    per.push_back(e);
  }
  j["per_class"] = per;
  j["means"] = {{"precision", r.prf.mean_precision}, {"recall", r.prf.mean_recall}, {"f1", r.prf.mean_f1},
                {"auc", opt(r.mean_auc)}};
  j["accuracy"] = r.scores.accuracy;
  j["clsf_mse"] = r.scores.clsf_mse;
  j["reg_mse"] = r.scores.reg_mse;
  j["reg_round_accuracy"] = r.rounded_accuracy;
  return j;
}

inline std::string render_json(const MetricsReport& r) { return report_json(r).dump(2) + "\n"; }

}  // namespace koa
