#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hmmrec/common.hpp"
#include "hmmrec/hmm.hpp"
#include "hmmrec/incidence.hpp"

namespace hmmrec {

struct ChangePointResult {
  std::string user_id;
  /// Ascending change indices, each in [1, T).
  std::vector<std::size_t> predicted;
  /// Transition-times-emission score of each predicted index.
  std::vector<double> score_per_point;
  bool no_state_change = false;
};

/// HMM change-point detection: decode, collect state switches, keep the k
/// switches with the largest P(v_t | v_{t-1}) * P(i_t | v_t).
inline ChangePointResult hmcd_detect(const HmmModel& model, const InteractionSequence& seq,
                                     std::size_t k = 1) {
  require(k >= 1, "hmcd_detect: k must be >= 1");
  ChangePointResult res;
  res.user_id = seq.user_id;
  if (seq.size() < 2) {
    res.no_state_change = true;
    return res;
  }
  const auto path = viterbi_decode(model, seq);
  struct Candidate {
    std::size_t t;
    double score;
  };
  std::vector<Candidate> cand;
  for (std::size_t t = 1; t < seq.size(); ++t) {
    const auto prev = static_cast<Eigen::Index>(path.states[t - 1]);
    const auto cur = static_cast<Eigen::Index>(path.states[t]);
    if (prev == cur) continue;
    cand.push_back({t, model.trans(prev, cur) * model.emit(cur, static_cast<Eigen::Index>(seq.items[t]))});
  }
  if (cand.empty()) {
    res.no_state_change = true;
    return res;
  }
  std::stable_sort(cand.begin(), cand.end(),
                   [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  cand.resize(std::min(k, cand.size()));
  std::sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) { return a.t < b.t; });
  for (const auto& c : cand) {
    res.predicted.push_back(c.t);
    res.score_per_point.push_back(c.score);
  }
  return res;
}

/// Splits items at ascending cut points; segment j covers [points[j-1], points[j]).
inline std::vector<ItemList> partition(std::span<const ItemId> items,
                                       std::span<const std::size_t> points) {
  for (std::size_t j = 0; j < points.size(); ++j) {
    require(points[j] >= 1 && points[j] < items.size(),
            "partition: point " + std::to_string(points[j]) + " outside [1, T)");
    require(j == 0 || points[j] > points[j - 1], "partition: points must be strictly ascending");
  }
  std::vector<ItemList> out;
  out.reserve(points.size() + 1);
  std::size_t lo = 0;
  for (auto p : points) {
    out.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(lo),
                     items.begin() + static_cast<std::ptrdiff_t>(p));
    lo = p;
  }
  out.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(lo), items.end());
  return out;
}

/// Partition into exactly k + 1 segments, padding with trailing empty segments
/// when fewer than k points are available. Out-of-range points are dropped.
inline std::vector<ItemList> partition_padded(std::span<const ItemId> items,
                                              std::span<const std::size_t> points, std::size_t k) {
  std::vector<std::size_t> valid;
  for (auto p : points)
    if (p >= 1 && p < items.size() && (valid.empty() || p > valid.back())) valid.push_back(p);
  if (valid.size() > k) valid.resize(k);
  auto segs = partition(items, valid);
  segs.resize(k + 1);
  return segs;
}

struct SegmentedMatrix {
  IncidenceMatrix matrix;
  std::map<std::pair<std::string, std::size_t>, std::size_t> row_index;
  std::vector<std::string> users;
  std::size_t segment_count_per_user = 0;

  std::size_t row(const std::string& user, std::size_t segment) const {
    auto it = row_index.find({user, segment});
    require(it != row_index.end(), "segmented matrix: no row for user '" + user + "'");
    return it->second;
  }
};

/// Rows are ordered by user (input order), then segment ordinal.
inline SegmentedMatrix build_segmented_matrix(
    std::span<const std::pair<std::string, std::vector<ItemList>>> segments_by_user,
    std::size_t num_items) {
  SegmentedMatrix out;
  out.matrix = IncidenceMatrix(num_items);
  if (segments_by_user.empty()) return out;
  out.segment_count_per_user = segments_by_user.front().second.size();
  require(out.segment_count_per_user >= 1, "build_segmented_matrix: users need >= 1 segment");
  for (const auto& [user, segs] : segments_by_user) {
    require(segs.size() == out.segment_count_per_user,
            "build_segmented_matrix: user '" + user + "' has " + std::to_string(segs.size()) +
                " segments, expected " + std::to_string(out.segment_count_per_user));
    for (std::size_t s = 0; s < segs.size(); ++s) {
      const auto r = out.matrix.add_row(segs[s]);
      require(out.row_index.emplace(std::make_pair(user, s), r).second,
              "build_segmented_matrix: duplicate user '" + user + "'");
    }
    out.users.push_back(user);
  }
  return out;
}

// Baselines -----------------------------------------------------------------

using StepStatistic = std::function<double(ItemId)>;

inline double identity_statistic(ItemId i) { return static_cast<double>(i); }

struct CusumResult {
  std::size_t index = 0;
  bool crossed = false;
};

/// First j with sum_{t<=j} stat(item_t) > tau; falls back to T-1 when the
/// threshold is never exceeded.
inline CusumResult cusum_detect(std::span<const ItemId> items, double tau,
                                const StepStatistic& stat = identity_statistic) {
  require(!items.empty(), "cusum_detect: empty sequence");
  double s = 0.0;
  for (std::size_t j = 0; j < items.size(); ++j) {
    s += stat(items[j]);
    if (s > tau) return {j, true};
  }
  return {items.size() - 1, false};
}

inline double displacement_error(std::size_t truth, std::size_t predicted) {
  return truth > predicted ? static_cast<double>(truth - predicted)
                           : static_cast<double>(predicted - truth);
}

/// Mean displacement of CUSUM at one threshold over sequences with ground truth.
inline double cusum_mean_error(std::span<const InteractionSequence> seqs, double tau,
                               const StepStatistic& stat = identity_statistic) {
  double total = 0.0;
  for (const auto& s : seqs) total += displacement_error(*s.truth_change, cusum_detect(s.items, tau, stat).index);
  return total / static_cast<double>(seqs.size());
}

/// Exhaustive search over explicit candidate thresholds; ties keep the first.
inline double tune_cusum_threshold_over(std::span<const InteractionSequence> seqs,
                                        std::span<const double> taus,
                                        const StepStatistic& stat = identity_statistic) {
  require(!seqs.empty(), "tune_cusum_threshold: empty corpus");
  require(!taus.empty(), "tune_cusum_threshold: empty grid");
  for (const auto& s : seqs)
    require(s.truth_change.has_value(),
            "tune_cusum_threshold: sequence '" + s.user_id + "' has no ground truth");
  double best_tau = taus.front();
  double best_err = std::numeric_limits<double>::infinity();
  for (double tau : taus) {
    const double err = cusum_mean_error(seqs, tau, stat);
    if (err < best_err) {
      best_err = err;
      best_tau = tau;
    }
  }
  return best_tau;
}

inline std::vector<double> default_cusum_multipliers() {
  std::vector<double> g;
  for (int i = 1; i <= 200; ++i) g.push_back(0.01 * i);
  return g;
}

/// Grid search anchored at the corpus-average total cumulative sum.
inline double tune_cusum_threshold(std::span<const InteractionSequence> seqs,
                                   const StepStatistic& stat = identity_statistic,
                                   std::span<const double> multipliers = {}) {
  require(!seqs.empty(), "tune_cusum_threshold: empty corpus");
  double anchor = 0.0;
  for (const auto& s : seqs)
    for (auto i : s.items) anchor += stat(i);
  anchor /= static_cast<double>(seqs.size());
  const auto defaults = default_cusum_multipliers();
  if (multipliers.empty()) multipliers = defaults;
  std::vector<double> taus;
  taus.reserve(multipliers.size());
  for (double f : multipliers) taus.push_back(anchor * f);
  return tune_cusum_threshold_over(seqs, taus, stat);
}

/// Each item represented by its L2-normalized column of the row x item
/// incidence matrix. Result is m x n, one sparse row per item.
inline SparseMatrix cooccurrence_item_vectors(std::span<const InteractionSequence> seqs,
                                              std::size_t num_items) {
  std::vector<ItemList> holders(num_items);
  for (std::size_t u = 0; u < seqs.size(); ++u)
    for (auto i : seqs[u].items) {
      require(i < num_items, "cooccurrence_item_vectors: item index out of range");
      if (holders[i].empty() || holders[i].back() != u) holders[i].push_back(u);
    }
  std::vector<Eigen::Triplet<double>> trip;
  for (std::size_t i = 0; i < num_items; ++i) {
    const double w = holders[i].empty() ? 0.0 : 1.0 / std::sqrt(static_cast<double>(holders[i].size()));
    for (auto u : holders[i]) trip.emplace_back(static_cast<int>(i), static_cast<int>(u), w);
  }
  SparseMatrix v(static_cast<Eigen::Index>(num_items), static_cast<Eigen::Index>(seqs.size()));
  v.setFromTriplets(trip.begin(), trip.end());
  v.makeCompressed();
  return v;
}

/// Pairwise Euclidean distances between sparse item vectors, computed on demand.
class ItemGram {
 public:
  explicit ItemGram(SparseMatrix item_vectors) : v_(std::move(item_vectors)) {
    v_.makeCompressed();
    norms_.resize(static_cast<std::size_t>(v_.rows()));
    for (Eigen::Index i = 0; i < v_.rows(); ++i) norms_[static_cast<std::size_t>(i)] = v_.row(i).squaredNorm();
  }
  explicit ItemGram(const Matrix& item_vectors) : ItemGram(SparseMatrix(item_vectors.sparseView(0.0, 0.0))) {}

  std::size_t num_items() const noexcept { return norms_.size(); }

  double distance(ItemId a, ItemId b) const {
    if (a == b) return 0.0;
    const auto ai = static_cast<Eigen::Index>(a);
    const auto bi = static_cast<Eigen::Index>(b);
    const double dot = v_.row(ai).dot(v_.row(bi));
    return std::sqrt(std::max(0.0, norms_[a] + norms_[b] - 2.0 * dot));
  }

 private:
  SparseMatrix v_;
  std::vector<double> norms_;
};

struct SlidingWindowResult {
  std::size_t index = 1;
  bool degenerate = false;
};

namespace detail {

template <typename Distance>
SlidingWindowResult sliding_window_core(std::span<const ItemId> items, Distance&& dist) {
  const std::size_t T = items.size();
  require(T >= 2, "sliding_window_detect: sequence needs at least 2 items");
  // prefix(a, b) = sum of dist over rows [0, a) x cols [0, b)
  std::vector<double> prefix((T + 1) * (T + 1), 0.0);
  auto P = [&](std::size_t a, std::size_t b) -> double& { return prefix[a * (T + 1) + b]; };
  double max_d = 0.0;
  for (std::size_t a = 0; a < T; ++a) {
    double row = 0.0;
    for (std::size_t b = 0; b < T; ++b) {
      const double d = a == b ? 0.0 : dist(items[a], items[b]);
      max_d = std::max(max_d, d);
      row += d;
      P(a + 1, b + 1) = P(a, b + 1) + row;
    }
  }
  if (max_d <= 1e-12) return {1, true};

  auto block = [&](std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    return P(r1, c1) - P(r0, c1) - P(r1, c0) + P(r0, c0);
  };
  auto pairs = [](std::size_t n) { return static_cast<double>(n * (n - 1) / 2); };

  SlidingWindowResult best{1, false};
  double best_obj = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 1; t < T; ++t) {
    const double intra_pairs = pairs(t) + pairs(T - t);
    const double intra_sum = 0.5 * (block(0, t, 0, t) + block(t, T, t, T));
    const double intra_sim = intra_pairs > 0 ? -intra_sum / intra_pairs : 0.0;
    const double inter_sim = -block(0, t, t, T) / static_cast<double>(t * (T - t));
    const double obj = intra_sim - inter_sim;
    if (obj > best_obj) {
      best_obj = obj;
      best.index = t;
    }
  }
  return best;
}

}  // namespace detail

/// Split maximizing (mean intra-segment similarity) - (mean inter-segment
/// similarity), similarity being negative Euclidean distance. Ties -> smallest t.
inline SlidingWindowResult sliding_window_detect(std::span<const ItemId> items,
                                                 const Matrix& item_vectors) {
  for (auto i : items)
    require(static_cast<Eigen::Index>(i) < item_vectors.rows(),
            "sliding_window_detect: item without a vector");
  return detail::sliding_window_core(items, [&](ItemId a, ItemId b) {
    return (item_vectors.row(static_cast<Eigen::Index>(a)) - item_vectors.row(static_cast<Eigen::Index>(b))).norm();
  });
}

inline SlidingWindowResult sliding_window_detect(std::span<const ItemId> items, const ItemGram& gram) {
  for (auto i : items)
    require(i < gram.num_items(), "sliding_window_detect: item without a vector");
  return detail::sliding_window_core(items, [&](ItemId a, ItemId b) { return gram.distance(a, b); });
}

/// Uniform integer in [0, T].
inline std::size_t random_partition(std::size_t length, std::uint64_t seed, std::uint64_t stream = 0) {
  require(length >= 1, "random_partition: empty sequence");
  Rng rng = make_rng(seed, stream);
  std::uniform_int_distribution<std::size_t> dist(0, length);
  return dist(rng);
}

/// Closed-form E|truth - U| for U uniform on {0..T}.
inline double random_partition_expected_error(std::size_t truth, std::size_t length) {
  const double L = static_cast<double>(truth);
  const double R = static_cast<double>(length - truth);
  return (L * (L + 1.0) / 2.0 + R * (R + 1.0) / 2.0) / static_cast<double>(length + 1);
}

// Report records ------------------------------------------------------------

/// One detector output for one sequence, as persisted in change-point reports.
struct DetectionRecord {
  std::string method;
  std::string user_id;
  std::size_t length = 0;
  std::optional<std::size_t> truth;
  std::vector<std::size_t> predicted;
  std::vector<double> scores;
  bool flagged = false;

  /// The point used for displacement: highest score (earliest on ties), the
  /// single prediction for score-less methods, or T-1 when nothing was found.
  std::size_t primary() const {
    if (predicted.empty()) return length - 1;
    if (scores.size() != predicted.size()) return predicted.front();
    std::size_t best = 0;
    for (std::size_t j = 1; j < scores.size(); ++j)
      if (scores[j] > scores[best]) best = j;
    return predicted[best];
  }
};

inline DetectionRecord to_record(const std::string& method, const InteractionSequence& seq,
                                 const ChangePointResult& r) {
  return {method, seq.user_id, seq.size(), seq.truth_change, r.predicted, r.score_per_point,
          r.no_state_change};
}

}  // namespace hmmrec
