#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hmmrec/changepoint.hpp"
#include "hmmrec/common.hpp"

namespace hmmrec {

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
};

inline std::size_t hits_at(std::span<const ItemId> recommended, std::span<const ItemId> truth, std::size_t n) {
  const std::set<ItemId> t(truth.begin(), truth.end());
  std::set<ItemId> counted;
  const std::size_t lim = std::min(n, recommended.size());
  for (std::size_t r = 0; r < lim; ++r)
    if (t.count(recommended[r])) counted.insert(recommended[r]);
  return counted.size();
}

/// precision = |top-N & truth| / N, recall = |top-N & truth| / |truth|.
inline PrecisionRecall precision_recall_at(std::span<const ItemId> recommended, std::span<const ItemId> truth,
                                           std::size_t n) {
  require(n >= 1, "precision_recall_at: N must be >= 1");
  require(!truth.empty(), "precision_recall_at: empty truth");
  const std::set<ItemId> distinct(truth.begin(), truth.end());
  const double h = static_cast<double>(hits_at(recommended, truth, n));
  return {h / static_cast<double>(n), h / static_cast<double>(distinct.size())};
}

/// Time-aware NDCG: the j-th held-out item (1-based, time order) has
/// relevance |truth| - j + 1; gains are discounted by log2(rank + 1).
inline double ndcg_time_aware(std::span<const ItemId> recommended, std::span<const ItemId> truth, std::size_t n) {
  require(n >= 1, "ndcg_time_aware: N must be >= 1");
  require(!truth.empty(), "ndcg_time_aware: empty truth");
  const std::size_t L = truth.size();
  std::map<ItemId, double> rel;
  for (std::size_t j = 0; j < L; ++j) rel.emplace(truth[j], static_cast<double>(L - j));  // first occurrence wins

  double dcg = 0.0;
  std::set<ItemId> used;
  const std::size_t lim = std::min(n, recommended.size());
  for (std::size_t r = 0; r < lim; ++r) {
    auto it = rel.find(recommended[r]);
    if (it == rel.end() || !used.insert(recommended[r]).second) continue;
    dcg += it->second / std::log2(static_cast<double>(r) + 2.0);
  }
  std::vector<double> ideal;
  for (const auto& [item, r] : rel) ideal.push_back(r);
  std::sort(ideal.rbegin(), ideal.rend());
  double idcg = 0.0;
  for (std::size_t r = 0; r < std::min(n, ideal.size()); ++r) idcg += ideal[r] / std::log2(static_cast<double>(r) + 2.0);
  return idcg > 0.0 ? dcg / idcg : 0.0;
}

/// One user's ranked list paired with the held-out items.
struct RankedCase {
  std::string user_id;
  std::vector<ItemId> recommended;
  ItemList truth;
};

struct CurvePoint {
  std::size_t n = 0;
  double precision = 0.0;
  double recall = 0.0;
};

/// Mean precision and recall per cutoff; n_grid must be ascending.
inline std::vector<CurvePoint> pr_curve(std::span<const RankedCase> cases, std::span<const std::size_t> n_grid) {
  for (std::size_t i = 1; i < n_grid.size(); ++i)
    require(n_grid[i] > n_grid[i - 1], "pr_curve: N grid must be strictly ascending");
  std::vector<CurvePoint> out;
  for (auto n : n_grid) {
    CurvePoint pt{n, 0.0, 0.0};
    for (const auto& c : cases) {
      const auto pr = precision_recall_at(c.recommended, c.truth, n);
      pt.precision += pr.precision;
      pt.recall += pr.recall;
    }
    if (!cases.empty()) {
      pt.precision /= static_cast<double>(cases.size());
      pt.recall /= static_cast<double>(cases.size());
    }
    out.push_back(pt);
  }
  return out;
}

inline double mean_ndcg(std::span<const RankedCase> cases, std::size_t n) {
  if (cases.empty()) return 0.0;
  double s = 0.0;
  for (const auto& c : cases) s += ndcg_time_aware(c.recommended, c.truth, n);
  return s / static_cast<double>(cases.size());
}

/// Mean displacement per method. Every method must cover the same users.
inline std::map<std::string, double> aggregate_cpd(const std::map<std::string, std::vector<DetectionRecord>>& by_method) {
  std::map<std::string, double> out;
  std::set<std::string> reference;
  bool first = true;
  for (const auto& [method, recs] : by_method) {
    std::set<std::string> users;
    double total = 0.0;
    for (const auto& r : recs) {
      require(r.truth.has_value(), "aggregate_cpd: record for '" + r.user_id + "' has no ground truth");
      require(users.insert(r.user_id).second, "aggregate_cpd: duplicate user '" + r.user_id + "' in " + method);
      total += displacement_error(*r.truth, r.primary());
    }
    if (first) {
      reference = users;
      first = false;
    } else {
      require(users == reference, "aggregate_cpd: method '" + method + "' covers a different user set");
    }
    out[method] = recs.empty() ? 0.0 : total / static_cast<double>(recs.size());
  }
  return out;
}

struct MethodMetrics {
  double mean_delta = -1.0;  // < 0 when the method is not a change-point detector
  std::vector<CurvePoint> curve;
  std::vector<double> ndcg;  // aligned with curve
};

struct EvalReport {
  std::map<std::string, MethodMetrics> per_method;
  std::size_t n_users = 0;
  std::vector<std::size_t> n_grid;
  std::map<std::string, std::string> parameters;
};

inline MethodMetrics ranking_metrics(std::span<const RankedCase> cases, std::span<const std::size_t> n_grid) {
  MethodMetrics mm;
  mm.curve = pr_curve(cases, n_grid);
  for (auto n : n_grid) mm.ndcg.push_back(mean_ndcg(cases, n));
  return mm;
}

}  // namespace hmmrec
