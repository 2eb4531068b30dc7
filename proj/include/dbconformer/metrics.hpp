#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dbconformer/error.hpp"

namespace dbc {

/// One-vs-rest counts for the stated positive class.
struct Confusion {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  std::size_t total() const { return tp + tn + fp + fn; }
  bool operator==(const Confusion&) const = default;
};

inline Confusion confusion(std::span<const int> preds, std::span<const int> labels, int positive = 1) {
  if (preds.size() != labels.size()) {
    throw ContractError("confusion: " + std::to_string(preds.size()) + " predictions but " +
                        std::to_string(labels.size()) + " labels");
  }
  Confusion c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool p = preds[i] == positive, l = labels[i] == positive;
    if (p && l) ++c.tp;
    else if (!p && !l) ++c.tn;
    else if (p) ++c.fp;
    else ++c.fn;
  }
  return c;
}

/// Percent of correct decisions, (TP+TN)/total·100.
inline double accuracy(const Confusion& c) {
  if (c.total() == 0) throw UndefinedMetricError("accuracy: no trials");
  return 100.0 * static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

/// Percent of predictions equal to labels (any number of classes).
inline double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw ContractError("accuracy: length mismatch");
  if (preds.empty()) throw UndefinedMetricError("accuracy: no trials");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(preds.size());
}

/// 2TP/(2TP+FP+FN)·100.
inline double f1(const Confusion& c) {
  const std::size_t den = 2 * c.tp + c.fp + c.fn;
  if (den == 0) throw UndefinedMetricError("f1: no positive predictions or labels");
  return 100.0 * static_cast<double>(2 * c.tp) / static_cast<double>(den);
}

/// Mean of sensitivity and specificity, in percent.
inline double bca(const Confusion& c) {
  if (c.tp + c.fn == 0) throw UndefinedMetricError("bca: no positive trials");
  if (c.tn + c.fp == 0) throw UndefinedMetricError("bca: no negative trials");
  const double sens = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  const double spec = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  return 50.0 * (sens + spec);
}

/// Probability that a random positive outscores a random negative (ties count
/// one half), from average ranks of the sorted scores.
inline double auc(std::span<const double> scores, std::span<const int> labels, int positive = 1) {
  if (scores.size() != labels.size()) throw ContractError("auc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum keeps every quantity an exact integer.
  std::uint64_t twice_rank_sum = 0, n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t twice_avg_rank = (i + 1) + j;  // ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == positive) {
        twice_rank_sum += twice_avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::uint64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("auc: needs both classes");
  const std::uint64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  return static_cast<double>(twice_u) / static_cast<double>(2 * n_pos * n_neg);
}

/// Metrics of one evaluated test set. Undefined metrics stay empty.
struct MetricsReport {
  Confusion counts;
  std::size_t trials = 0;
  double accuracy = 0.0;
  std::optional<double> f1, bca, auc;  // f1/bca percent, auc fraction
};

/// Binary labels use one-vs-rest counts for `positive`; accuracy is always the
/// plain hit rate. `scores` (positive-class probabilities) enable AUC.
inline MetricsReport make_report(std::span<const int> preds, std::span<const int> labels,
                                 std::span<const double> scores = {}, int positive = 1) {
  MetricsReport r;
  r.counts = confusion(preds, labels, positive);
  r.trials = preds.size();
  r.accuracy = dbc::accuracy(preds, labels);
  auto guarded = [](auto fn) -> std::optional<double> {
    try {
      return fn();
    } catch (const UndefinedMetricError&) {
      return std::nullopt;
    }
  };
  r.f1 = guarded([&] { return dbc::f1(r.counts); });
  r.bca = guarded([&] { return dbc::bca(r.counts); });
  if (!scores.empty()) r.auc = guarded([&] { return dbc::auc(scores, labels, positive); });
  return r;
}

/// `metric=value` lines; undefined metrics are written as `undefined`.
inline std::string to_kv(const MetricsReport& r, const std::string& prefix = "") {
  std::ostringstream os;
  os.precision(17);
  auto opt = [&](const char* k, const std::optional<double>& v) {
    os << prefix << k << '=';
    if (v) os << *v;
    else os << "undefined";
    os << '\n';
  };
  os << prefix << "trials=" << r.trials << '\n'
     << prefix << "tp=" << r.counts.tp << '\n'
     << prefix << "tn=" << r.counts.tn << '\n'
     << prefix << "fp=" << r.counts.fp << '\n'
     << prefix << "fn=" << r.counts.fn << '\n'
     << prefix << "accuracy=" << r.accuracy << '\n';
  opt("f1", r.f1);
  opt("bca", r.bca);
  opt("auc", r.auc);
  return os.str();
}

inline nlohmann::json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"trials", r.trials}, {"tp", r.counts.tp}, {"tn", r.counts.tn}, {"fp", r.counts.fp}, {"fn", r.counts.fn},
          {"accuracy", r.accuracy}, {"f1", opt(r.f1)}, {"bca", opt(r.bca)}, {"auc", opt(r.auc)}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.trials = j.at("trials").get<std::size_t>();
  r.counts = {j.at("tp").get<std::size_t>(), j.at("tn").get<std::size_t>(), j.at("fp").get<std::size_t>(),
              j.at("fn").get<std::size_t>()};
  r.accuracy = j.at("accuracy").get<double>();
  auto opt = [&](const char* k) -> std::optional<double> {
    return j.at(k).is_null() ? std::nullopt : std::optional<double>(j.at(k).get<double>());
  };
  r.f1 = opt("f1");
  r.bca = opt("bca");
  r.auc = opt("auc");
  return r;
}

/// Sample mean and population standard deviation.
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

inline MeanStd mean_std(std::span<const double> v) {
  if (v.empty()) throw UndefinedMetricError("mean of an empty list");
  MeanStd m;
  m.n = v.size();
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(v.size()));
  return m;
}

}  // namespace dbc
