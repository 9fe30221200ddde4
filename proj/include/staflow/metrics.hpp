#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "staflow/common.hpp"

namespace staflow {

/// Row = true class, column = predicted class.
struct ConfusionMatrix {
  std::size_t n_classes = 0;
  std::vector<std::size_t> counts;  // row-major [true][pred]

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t k)
      : n_classes(k), counts(k * k, 0) {}

  std::size_t& at(std::size_t truth, std::size_t pred) {
    return counts[truth * n_classes + pred];
  }
  std::size_t at(std::size_t truth, std::size_t pred) const {
    return counts[truth * n_classes + pred];
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

inline ConfusionMatrix confusion_from_predictions(
    const std::vector<int>& labels, const std::vector<int>& preds,
    std::size_t n_classes) {
  if (labels.size() != preds.size())
    throw UsageError("confusion: label/prediction count mismatch");
  ConfusionMatrix cm(n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = preds[i];
    if (t < 0 || static_cast<std::size_t>(t) >= n_classes || p < 0 ||
        static_cast<std::size_t>(p) >= n_classes)
      throw DataError("confusion: class index outside [0," +
                      std::to_string(n_classes) + ") at trial " +
                      std::to_string(i));
    ++cm.at(static_cast<std::size_t>(t), static_cast<std::size_t>(p));
  }
  return cm;
}

struct EvalMetrics {
  double accuracy = 0.0;
  double kappa = 0.0;
  double macro_f1 = 0.0;
  ConfusionMatrix confusion;
};

/// Accuracy, Cohen's kappa (chance agreement from marginal products) and
/// macro-averaged F1 from one confusion matrix.
inline EvalMetrics metrics_from_confusion(const ConfusionMatrix& cm) {
  const std::size_t k = cm.n_classes;
  const double n = static_cast<double>(cm.total());
  if (n == 0) throw UsageError("metrics: empty confusion matrix");

  EvalMetrics out;
  out.confusion = cm;

  double diag = 0.0;
  std::vector<double> row(k, 0.0), col(k, 0.0);
  for (std::size_t t = 0; t < k; ++t)
    for (std::size_t p = 0; p < k; ++p) {
      const double c = static_cast<double>(cm.at(t, p));
      row[t] += c;
      col[p] += c;
      if (t == p) diag += c;
    }
  out.accuracy = diag / n;

  double pe = 0.0;
  for (std::size_t c = 0; c < k; ++c) pe += row[c] * col[c];
  pe /= n * n;
  out.kappa = pe >= 1.0 ? 0.0 : (out.accuracy - pe) / (1.0 - pe);

  double f1_sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    const double precision = col[c] > 0 ? tp / col[c] : 0.0;
    const double recall = row[c] > 0 ? tp / row[c] : 0.0;
    const double f1 =
        precision + recall > 0 ? 2.0 * precision * recall / (precision + recall)
                               : 0.0;
    f1_sum += f1;
  }
  out.macro_f1 = f1_sum / static_cast<double>(k);
  return out;
}

/// Argmax with ties broken toward the lowest class index.
template <typename T>
int argmax_lowest(const T* row, std::size_t k) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (row[j] > row[best]) best = j;
  return static_cast<int>(best);
}

// ---------------------------------------------------------------------------
// Fisher score
// ---------------------------------------------------------------------------

/// trace(S_B) / (trace(S_W) + eps) with S_B the class-size weighted scatter
/// of class means about the grand mean and S_W the pooled within-class
/// scatter.
inline double fisher_score(const std::vector<double>& features,
                           std::size_t n_rows, std::size_t n_cols,
                           const std::vector<int>& labels, double eps = 1e-12) {
  if (labels.size() != n_rows)
    throw UsageError("fisher_score: label count does not match rows");
  if (n_rows == 0 || n_cols == 0)
    throw UsageError("fisher_score: empty feature matrix");

  int max_label = 0;
  for (int l : labels) max_label = std::max(max_label, l);
  const std::size_t k = static_cast<std::size_t>(max_label) + 1;

  std::vector<std::size_t> counts(k, 0);
  for (int l : labels) {
    if (l < 0) throw DataError("fisher_score: negative label");
    ++counts[static_cast<std::size_t>(l)];
  }
  std::size_t present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 1)
      throw DataError("fisher_score: class " + std::to_string(c) +
                      " has a single trial, scatter undefined");
    if (counts[c] > 0) ++present;
  }
  if (present < 2)
    throw DataError("fisher_score: needs at least two classes present");

  std::vector<double> class_mean(k * n_cols, 0.0), grand(n_cols, 0.0);
  for (std::size_t r = 0; r < n_rows; ++r) {
    const auto c = static_cast<std::size_t>(labels[r]);
    for (std::size_t j = 0; j < n_cols; ++j) {
      class_mean[c * n_cols + j] += features[r * n_cols + j];
      grand[j] += features[r * n_cols + j];
    }
  }
  for (std::size_t c = 0; c < k; ++c)
    if (counts[c] > 0)
      for (std::size_t j = 0; j < n_cols; ++j)
        class_mean[c * n_cols + j] /= static_cast<double>(counts[c]);
  for (std::size_t j = 0; j < n_cols; ++j)
    grand[j] /= static_cast<double>(n_rows);

  double sb = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    double d2 = 0.0;
    for (std::size_t j = 0; j < n_cols; ++j) {
      const double d = class_mean[c * n_cols + j] - grand[j];
      d2 += d * d;
    }
    sb += static_cast<double>(counts[c]) * d2;
  }
  double sw = 0.0;
  for (std::size_t r = 0; r < n_rows; ++r) {
    const auto c = static_cast<std::size_t>(labels[r]);
    for (std::size_t j = 0; j < n_cols; ++j) {
      const double d = features[r * n_cols + j] - class_mean[c * n_cols + j];
      sw += d * d;
    }
  }
  return sb / (sw + eps);
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

struct WilcoxonResult {
  double w_statistic = 0.0;  // min(W+, W-)
  double p_value = 1.0;      // two-sided
  bool all_zero = false;     // every paired difference was zero
  std::size_t n_effective = 0;
};

/// Paired two-sided test. Zero differences are dropped; |differences| are
/// ranked with average ranks for ties. Exact p by full sign enumeration for
/// n <= 20, normal approximation with tie correction above.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                           const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty())
    throw UsageError("wilcoxon: inputs must be equal-length and non-empty");

  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back(d);
  }
  WilcoxonResult out;
  out.n_effective = diffs.size();
  if (diffs.empty()) {
    out.all_zero = true;
    out.p_value = 1.0;
    return out;
  }

  const std::size_t n = diffs.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return std::abs(diffs[x]) < std::abs(diffs[y]);
  });

  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n &&
           std::abs(diffs[order[j + 1]]) == std::abs(diffs[order[i]]))
      ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 +
                       1.0;  // ranks are 1-based
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }

  double w_plus = 0.0, w_minus = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    if (diffs[t] > 0) {
      w_plus += ranks[t];
    } else {
      w_minus += ranks[t];
    }
  }
  const double w_low = std::min(w_plus, w_minus);
  out.w_statistic = w_low;
  const double total = w_plus + w_minus;

  if (n <= 20) {
    // exact null distribution over all sign assignments
    const std::uint64_t assignments = 1ull << n;
    std::uint64_t c_low = 0, c_high = 0;
    const double w_high = total - w_low;
    const double tol = 1e-9;
    for (std::uint64_t mask = 0; mask < assignments; ++mask) {
      double w = 0.0;
      for (std::size_t bit = 0; bit < n; ++bit)
        if (mask & (1ull << bit)) w += ranks[bit];
      if (w <= w_low + tol) ++c_low;
      if (w >= w_high - tol) ++c_high;
    }
    out.p_value = std::min(
        1.0, static_cast<double>(c_low + c_high) / static_cast<double>(assignments));
  } else {
    const double dn = static_cast<double>(n);
    const double mu = dn * (dn + 1.0) / 4.0;
    double tie_term = 0.0;
    i = 0;
    std::vector<double> sorted_abs(n);
    for (std::size_t t = 0; t < n; ++t) sorted_abs[t] = std::abs(diffs[order[t]]);
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && sorted_abs[j + 1] == sorted_abs[i]) ++j;
      const double t_count = static_cast<double>(j - i + 1);
      tie_term += t_count * t_count * t_count - t_count;
      i = j + 1;
    }
    const double var =
        dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0) {
      out.p_value = 1.0;
      return out;
    }
    const double z = (w_low - mu) / std::sqrt(var);
    const double phi = 0.5 * std::erfc(-z / std::sqrt(2.0));
    out.p_value = std::min(1.0, 2.0 * phi);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct SeedMetrics {
  std::uint64_t seed = 0;
  EvalMetrics metrics;
  double best_val_loss = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
};

struct ComparisonEntry {
  std::string baseline;
  double w_statistic = 0.0;
  double p_value = 1.0;
  bool all_zero = false;
};

/// Per-seed metrics plus mean and population std aggregates.
struct MetricsReport {
  std::vector<SeedMetrics> per_seed;
  double acc_mean = 0, acc_std = 0;
  double kappa_mean = 0, kappa_std = 0;
  double f1_mean = 0, f1_std = 0;
  std::map<std::string, double> fisher;
  std::vector<ComparisonEntry> comparisons;

  void aggregate() {
    auto stats = [this](auto pick) {
      double m = 0;
      for (const auto& s : per_seed) m += pick(s);
      m /= static_cast<double>(per_seed.size());
      double v = 0;
      for (const auto& s : per_seed) {
        const double d = pick(s) - m;
        v += d * d;
      }
      v /= static_cast<double>(per_seed.size());  // population std
      return std::pair<double, double>(m, std::sqrt(v));
    };
    std::tie(acc_mean, acc_std) =
        stats([](const SeedMetrics& s) { return s.metrics.accuracy; });
    std::tie(kappa_mean, kappa_std) =
        stats([](const SeedMetrics& s) { return s.metrics.kappa; });
    std::tie(f1_mean, f1_std) =
        stats([](const SeedMetrics& s) { return s.metrics.macro_f1; });
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["per_seed"] = nlohmann::json::array();
    for (const auto& s : per_seed) {
      nlohmann::json e;
      e["seed"] = s.seed;
      e["accuracy"] = s.metrics.accuracy;
      e["kappa"] = s.metrics.kappa;
      e["macro_f1"] = s.metrics.macro_f1;
      e["best_val_loss"] = s.best_val_loss;
      e["best_epoch"] = s.best_epoch;
      e["epochs_run"] = s.epochs_run;
      auto rows = nlohmann::json::array();
      const auto& cm = s.metrics.confusion;
      for (std::size_t t = 0; t < cm.n_classes; ++t) {
        auto row = nlohmann::json::array();
        for (std::size_t p = 0; p < cm.n_classes; ++p) row.push_back(cm.at(t, p));
        rows.push_back(row);
      }
      e["confusion"] = rows;
      j["per_seed"].push_back(e);
    }
    j["aggregate"] = {{"acc_mean", acc_mean},     {"acc_std", acc_std},
                      {"kappa_mean", kappa_mean}, {"kappa_std", kappa_std},
                      {"f1_mean", f1_mean},       {"f1_std", f1_std}};
    if (!fisher.empty()) j["fisher"] = fisher;
    if (!comparisons.empty()) {
      j["comparisons"] = nlohmann::json::array();
      for (const auto& c : comparisons) {
        j["comparisons"].push_back({{"baseline", c.baseline},
                                    {"W", c.w_statistic},
                                    {"p", c.p_value},
                                    {"all_zero", c.all_zero}});
      }
    }
    return j;
  }
};

}  // namespace staflow
