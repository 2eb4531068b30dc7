#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "dbconformer/error.hpp"
#include "dbconformer/trialset.hpp"

namespace dbc {

enum class Protocol { CO, CV, LOSO };

inline std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::CO: return "CO";
    case Protocol::CV: return "CV";
    case Protocol::LOSO: return "LOSO";
  }
  return "?";
}

inline Protocol parse_protocol(const std::string& s) {
  if (s == "CO" || s == "co") return Protocol::CO;
  if (s == "CV" || s == "cv") return Protocol::CV;
  if (s == "LOSO" || s == "loso") return Protocol::LOSO;
  throw ConfigError("unknown protocol '" + s + "' (expected CO, CV or LOSO)");
}

/// One trial of one subject.
struct TrialRef {
  std::uint32_t subject_id = 0;
  std::size_t index = 0;
  auto operator<=>(const TrialRef&) const = default;
};

struct Fold {
  std::vector<TrialRef> train;
  std::vector<TrialRef> test;  // in recording order per subject
};

struct SplitPlan {
  Protocol protocol = Protocol::CO;
  std::vector<Fold> folds;
};

namespace detail {

inline std::vector<TrialRef> refs(const TrialSet& set, const std::vector<std::size_t>& idx) {
  std::vector<TrialRef> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back({set.subject_id, i});
  return out;
}

}  // namespace detail

/// First floor(0.8·B) trials in recording order train, the rest test.
inline SplitPlan split_co(const TrialSet& set) {
  if (set.size() < 5) {
    throw InsufficientDataError("CO split needs at least 5 trials, subject " + std::to_string(set.subject_id) +
                                " has " + std::to_string(set.size()));
  }
  const auto order = set.chronological_order();
  const std::size_t n_train = set.size() * 4 / 5;
  Fold f;
  f.train = detail::refs(set, {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train)});
  f.test = detail::refs(set, {order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end()});
  return {Protocol::CO, {std::move(f)}};
}

/// k folds from per-class contiguous blocks of the recording order. Block sizes
/// differ by at most one (the first n mod k blocks take the extra trial).
inline SplitPlan split_cv(const TrialSet& set, std::size_t k = 5) {
  if (k < 2) throw ConfigError("CV needs at least 2 folds, got " + std::to_string(k));
  const std::size_t nc = set.class_count();
  std::vector<std::vector<std::size_t>> by_class(nc);
  for (auto i : set.chronological_order()) by_class[static_cast<std::size_t>(set.labels[i])].push_back(i);
  for (std::size_t c = 0; c < nc; ++c) {
    if (by_class[c].size() < k) {
      throw InsufficientDataError("CV with " + std::to_string(k) + " folds: class " + std::to_string(c) + " has only " +
                                  std::to_string(by_class[c].size()) + " trials");
    }
  }
  std::vector<std::size_t> fold_of(set.size());
  for (const auto& members : by_class) {
    const std::size_t n = members.size(), base = n / k, extra = n % k;
    std::size_t pos = 0;
    for (std::size_t f = 0; f < k; ++f) {
      const std::size_t len = base + (f < extra ? 1 : 0);
      for (std::size_t j = 0; j < len; ++j) fold_of[members[pos++]] = f;
    }
  }
  SplitPlan plan{Protocol::CV, std::vector<Fold>(k)};
  for (auto i : set.chronological_order()) {
    for (std::size_t f = 0; f < k; ++f) {
      (fold_of[i] == f ? plan.folds[f].test : plan.folds[f].train).push_back({set.subject_id, i});
    }
  }
  return plan;
}

/// Every trial of test_subject tests; all trials of the other subjects train.
inline SplitPlan split_loso(const std::vector<TrialSet>& sets, std::uint32_t test_subject) {
  if (sets.size() < 2) throw ConfigError("LOSO needs at least 2 subjects, got " + std::to_string(sets.size()));
  std::set<std::uint32_t> ids;
  for (const auto& s : sets) {
    if (!ids.insert(s.subject_id).second) {
      throw ContractError("LOSO: subject id " + std::to_string(s.subject_id) + " appears twice");
    }
  }
  if (!ids.contains(test_subject)) throw LookupError("LOSO: unknown subject id " + std::to_string(test_subject));
  Fold f;
  for (const auto& s : sets) {
    auto r = detail::refs(s, s.chronological_order());
    auto& side = s.subject_id == test_subject ? f.test : f.train;
    side.insert(side.end(), r.begin(), r.end());
  }
  return {Protocol::LOSO, {std::move(f)}};
}

}  // namespace dbc
