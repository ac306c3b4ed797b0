#pragma once

// Multi-class evaluation: accuracy, one-vs-rest ROC/AUC, macro-F1 and
// box-plot statistics of the probability assigned to the true class.

#include "fsvlm/parameters.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsvlm {

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.empty()) throw std::invalid_argument("accuracy: empty input");
  if (preds.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

// --------------------------------------------------------------------------
// ROC

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
  bool operator==(const RocPoint&) const = default;
};

using RocCurve = std::vector<RocPoint>;

/// Thresholds sweep the unique scores in descending order; samples sharing
/// a score move together. The leading (0,0) point carries threshold
/// max(score) + 1.
inline RocCurve roc_points(const std::vector<double>& scores, const std::vector<int>& binary_labels) {
  if (scores.size() != binary_labels.size()) throw std::invalid_argument("roc_points: length mismatch");
  double positives = 0.0, negatives = 0.0;
  for (int y : binary_labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("roc_points: labels must be 0 or 1");
    (y == 1 ? positives : negatives) += 1.0;
  }
  if (positives == 0.0 || negatives == 0.0)
    throw std::invalid_argument("roc_points: both positive and negative samples are required");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve curve;
  curve.push_back({0.0, 0.0, scores[order.front()] + 1.0});
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (binary_labels[order[i]] == 1 ? tp : fp) += 1.0;
      ++i;
    }
    curve.push_back({fp / negatives, tp / positives, s});
  }
  return curve;
}

inline double auc_trapezoid(const RocCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i)
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) * 0.5;
  return area;
}

/// Highest TPR reachable at a false-positive rate no larger than `fpr`.
inline double tpr_at_fpr(const RocCurve& curve, double fpr) {
  double best = 0.0;
  for (const auto& p : curve)
    if (p.fpr <= fpr) best = std::max(best, p.tpr);
  return best;
}

inline constexpr std::array<double, 3> kLowFprLevels = {0.01, 0.05, 0.1};

struct MacroAuc {
  double macro = 0.0;
  std::vector<std::optional<double>> per_class;
  std::vector<RocCurve> curves;  // empty for skipped classes
  std::vector<int> skipped_classes;
};

/// One-vs-rest AUC per column; the macro mean runs over classes that have
/// both positives and negatives.
inline MacroAuc macro_auc_ovr(const Matrix& probs, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size() || labels.empty())
    throw std::invalid_argument("macro_auc_ovr: probs/labels size mismatch");
  const auto k = static_cast<int>(probs.cols());
  MacroAuc out;
  out.per_class.resize(static_cast<std::size_t>(k));
  out.curves.resize(static_cast<std::size_t>(k));
  double sum = 0.0;
  int used = 0;
  std::vector<double> scores(labels.size());
  std::vector<int> binary(labels.size());
  for (int c = 0; c < k; ++c) {
    int pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= k) throw std::out_of_range("macro_auc_ovr: label out of range");
      scores[i] = probs(static_cast<Eigen::Index>(i), c);
      binary[i] = labels[i] == c ? 1 : 0;
      pos += binary[i];
    }
    if (pos == 0 || pos == static_cast<int>(labels.size())) {
      out.skipped_classes.push_back(c);
      continue;
    }
    auto curve = roc_points(scores, binary);
    const double auc = auc_trapezoid(curve);
    out.per_class[static_cast<std::size_t>(c)] = auc;
    out.curves[static_cast<std::size_t>(c)] = std::move(curve);
    sum += auc;
    ++used;
  }
  if (used == 0) throw std::invalid_argument("macro_auc_ovr: labels contain a single class");
  out.macro = sum / used;
  return out;
}

// --------------------------------------------------------------------------
// F1

struct MacroF1 {
  double macro = 0.0;
  std::vector<double> per_class;
  /// Classes with no TP, FP or FN anywhere; scored 0.
  std::vector<int> degenerate_classes;
};

inline MacroF1 macro_f1(const std::vector<int>& preds, const std::vector<int>& labels, int k) {
  if (preds.size() != labels.size()) throw std::invalid_argument("macro_f1: length mismatch");
  std::vector<double> tp(static_cast<std::size_t>(k)), fp(tp.size()), fn(tp.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], y = labels[i];
    if (p < 0 || p >= k || y < 0 || y >= k) throw std::out_of_range("macro_f1: index out of range");
    if (p == y) {
      tp[static_cast<std::size_t>(p)] += 1;
    } else {
      fp[static_cast<std::size_t>(p)] += 1;
      fn[static_cast<std::size_t>(y)] += 1;
    }
  }
  MacroF1 out;
  for (std::size_t c = 0; c < tp.size(); ++c) {
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    if (denom == 0.0) out.degenerate_classes.push_back(static_cast<int>(c));
    out.per_class.push_back(denom == 0.0 ? 0.0 : 2 * tp[c] / denom);
  }
  out.macro = std::accumulate(out.per_class.begin(), out.per_class.end(), 0.0) / k;
  return out;
}

// --------------------------------------------------------------------------
// Box-plot statistics

/// Linear interpolation between order statistics at rank (n - 1) * q.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile: empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct BoxStats {
  std::size_t n = 0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double lo = 0.0;  // lowest datum >= q1 - 1.5 IQR
  double hi = 0.0;  // highest datum <= q3 + 1.5 IQR
  std::vector<double> outliers;
};

inline BoxStats box_stats(std::vector<double> values) {
  BoxStats s;
  s.n = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  s.median = quantile_sorted(values, 0.5);
  s.q1 = quantile_sorted(values, 0.25);
  s.q3 = quantile_sorted(values, 0.75);
  const double iqr = s.q3 - s.q1;
  const double lo_fence = s.q1 - 1.5 * iqr;
  const double hi_fence = s.q3 + 1.5 * iqr;
  s.lo = values.back();
  s.hi = values.front();
  for (double v : values) {
    if (v < lo_fence || v > hi_fence) {
      s.outliers.push_back(v);
    } else {
      s.lo = std::min(s.lo, v);
      s.hi = std::max(s.hi, v);
    }
  }
  return s;
}

struct TrueClassProbStats {
  std::vector<BoxStats> per_class;
  BoxStats overall;
};

inline TrueClassProbStats true_class_prob_stats(const Matrix& probs, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size())
    throw std::invalid_argument("true_class_prob_stats: size mismatch");
  const auto k = static_cast<std::size_t>(probs.cols());
  std::vector<std::vector<double>> by_class(k);
  std::vector<double> all;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = probs(static_cast<Eigen::Index>(i), labels[i]);
    by_class.at(static_cast<std::size_t>(labels[i])).push_back(p);
    all.push_back(p);
  }
  TrueClassProbStats out;
  for (auto& v : by_class) out.per_class.push_back(box_stats(std::move(v)));
  out.overall = box_stats(std::move(all));
  return out;
}

// --------------------------------------------------------------------------
// Combined result

struct EvalResult {
  double accuracy = 0.0;
  double macro_auc = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::optional<double>> per_class_auc;
  std::vector<int> skipped_auc_classes;
  std::vector<double> per_class_f1;
  std::vector<int> degenerate_f1_classes;
  std::vector<RocCurve> roc;
  /// TPR at each of kLowFprLevels, per class.
  std::vector<std::array<double, 3>> tpr_at_low_fpr;
  TrueClassProbStats boxplot;
};

/// Row argmax of probabilities, lowest index on ties.
inline std::vector<int> argmax_rows(const Matrix& probs) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < probs.cols(); ++j)
      if (probs(i, j) > probs(i, best)) best = j;
    out.push_back(static_cast<int>(best));
  }
  return out;
}

inline EvalResult evaluate(const Matrix& probs, const std::vector<int>& labels) {
  EvalResult r;
  const auto preds = argmax_rows(probs);
  r.accuracy = accuracy(preds, labels);
  MacroAuc auc = macro_auc_ovr(probs, labels);
  r.macro_auc = auc.macro;
  r.per_class_auc = std::move(auc.per_class);
  r.skipped_auc_classes = std::move(auc.skipped_classes);
  MacroF1 f1 = macro_f1(preds, labels, static_cast<int>(probs.cols()));
  r.macro_f1 = f1.macro;
  r.per_class_f1 = std::move(f1.per_class);
  r.degenerate_f1_classes = std::move(f1.degenerate_classes);
  r.roc = std::move(auc.curves);
  for (const auto& curve : r.roc) {
    std::array<double, 3> t{};
    for (std::size_t i = 0; i < kLowFprLevels.size(); ++i)
      t[i] = curve.empty() ? 0.0 : tpr_at_fpr(curve, kLowFprLevels[i]);
    r.tpr_at_low_fpr.push_back(t);
  }
  r.boxplot = true_class_prob_stats(probs, labels);
  return r;
}

// --------------------------------------------------------------------------
// Serialisation

inline nlohmann::json to_json(const BoxStats& s) {
  return {{"n", s.n},       {"median", s.median}, {"q1", s.q1},
          {"q3", s.q3},     {"lo", s.lo},         {"hi", s.hi},
          {"outliers", s.outliers}};
}

inline BoxStats box_stats_from_json(const nlohmann::json& j) {
  BoxStats s;
  s.n = j.at("n").get<std::size_t>();
  s.median = j.at("median").get<double>();
  s.q1 = j.at("q1").get<double>();
  s.q3 = j.at("q3").get<double>();
  s.lo = j.at("lo").get<double>();
  s.hi = j.at("hi").get<double>();
  s.outliers = j.at("outliers").get<std::vector<double>>();
  return s;
}

inline nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json per_class_auc = nlohmann::json::array();
  for (const auto& a : r.per_class_auc) per_class_auc.push_back(a ? nlohmann::json(*a) : nlohmann::json());
  nlohmann::json roc = nlohmann::json::array();
  for (const auto& curve : r.roc) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : curve) pts.push_back({p.fpr, p.tpr, p.threshold});
    roc.push_back(std::move(pts));
  }
  nlohmann::json box = nlohmann::json::object();
  for (std::size_t c = 0; c < r.boxplot.per_class.size(); ++c)
    box[std::to_string(c)] = to_json(r.boxplot.per_class[c]);
  box["overall"] = to_json(r.boxplot.overall);
  return {{"accuracy", r.accuracy},
          {"macro_auc", r.macro_auc},
          {"macro_f1", r.macro_f1},
          {"per_class_auc", per_class_auc},
          {"skipped_auc_classes", r.skipped_auc_classes},
          {"per_class_f1", r.per_class_f1},
          {"degenerate_f1_classes", r.degenerate_f1_classes},
          {"tpr_at_low_fpr", r.tpr_at_low_fpr},
          {"roc", roc},
          {"boxplot", box}};
}

inline EvalResult eval_result_from_json(const nlohmann::json& j) {
  EvalResult r;
  r.accuracy = j.at("accuracy").get<double>();
  r.macro_auc = j.at("macro_auc").get<double>();
  r.macro_f1 = j.at("macro_f1").get<double>();
  for (const auto& a : j.at("per_class_auc"))
    r.per_class_auc.push_back(a.is_null() ? std::nullopt : std::optional<double>(a.get<double>()));
  r.skipped_auc_classes = j.at("skipped_auc_classes").get<std::vector<int>>();
  r.per_class_f1 = j.at("per_class_f1").get<std::vector<double>>();
  r.degenerate_f1_classes = j.at("degenerate_f1_classes").get<std::vector<int>>();
  r.tpr_at_low_fpr = j.at("tpr_at_low_fpr").get<std::vector<std::array<double, 3>>>();
  for (const auto& curve : j.at("roc")) {
    RocCurve c;
    for (const auto& p : curve) c.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()});
    r.roc.push_back(std::move(c));
  }
  const auto& box = j.at("boxplot");
  for (std::size_t c = 0; box.contains(std::to_string(c)); ++c)
    r.boxplot.per_class.push_back(box_stats_from_json(box.at(std::to_string(c))));
  r.boxplot.overall = box_stats_from_json(box.at("overall"));
  return r;
}

}  // namespace fsvlm
