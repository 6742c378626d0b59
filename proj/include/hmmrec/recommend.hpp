#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hmmrec/common.hpp"
#include "hmmrec/factorization.hpp"
#include "hmmrec/hmm.hpp"

namespace hmmrec {

enum class FactorSource { nmf, bpr, hmm };

/// Per-item latent vectors (rows); for hmm each row is P(. | item).
struct ItemFactors {
  Matrix vectors;
  FactorSource source = FactorSource::nmf;

  std::size_t num_items() const noexcept { return static_cast<std::size_t>(vectors.rows()); }
};

inline ItemFactors item_factors(const FactorPair& f, FactorSource source = FactorSource::nmf) {
  return {f.q, source};
}

/// State marginal from column-normalized transition mass.
inline Vector hmm_state_marginal(const HmmModel& model) {
  const Vector col = model.trans.colwise().sum().transpose();
  return col / col.sum();
}

/// P(s | i) by Bayes inversion of the emissions, each item row normalized over s.
inline ItemFactors hmm_item_factors(const HmmModel& model) {
  const auto h = static_cast<Eigen::Index>(model.num_states);
  const auto m = static_cast<Eigen::Index>(model.num_items);
  const Vector ps = hmm_state_marginal(model);

  // P(i) = sum_s P(i|s) P(s), normalized over items
  Vector pi_item = model.emit.transpose() * ps;
  pi_item /= pi_item.sum();

  ItemFactors out{Matrix(m, h), FactorSource::hmm};
  for (Eigen::Index i = 0; i < m; ++i) {
    require(pi_item(i) > 0.0, "hmm_item_factors: item " + std::to_string(i) + " has no emission mass");
    double row = 0.0;
    for (Eigen::Index s = 0; s < h; ++s) {
      out.vectors(i, s) = model.emit(s, i) * ps(s) / pi_item(i);
      row += out.vectors(i, s);
    }
    out.vectors.row(i) /= row;
  }
  return out;
}

namespace detail {

/// Orders items by (score desc, popularity desc, index asc).
struct RankOrder {
  std::span<const double> score;
  std::span<const double> popularity;

  bool operator()(ItemId a, ItemId b) const {
    if (score[a] != score[b]) return score[a] > score[b];
    if (!popularity.empty() && popularity[a] != popularity[b]) return popularity[a] > popularity[b];
    return a < b;
  }
};

inline std::vector<ItemId> top_by(std::vector<ItemId> cand, std::size_t n, const RankOrder& order) {
  n = std::min(n, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n), cand.end(), order);
  cand.resize(n);
  return cand;
}

}  // namespace detail

/// Item scores for one segment: each segment item nominates its l nearest
/// items by dot product (segment items excluded); an item's score is the
/// fraction of segment positions that nominated it.
inline std::vector<double> score_by_segment(const ItemFactors& factors, std::span<const ItemId> segment,
                                            std::size_t l, std::span<const double> popularity = {}) {
  require(!segment.empty(), "score_by_segment: empty segment");
  require(l >= 1, "score_by_segment: l must be >= 1");
  const std::size_t m = factors.num_items();
  require(popularity.empty() || popularity.size() == m, "score_by_segment: popularity size mismatch");
  std::vector<bool> in_segment(m, false);
  for (auto i : segment) {
    require(i < m, "score_by_segment: item index out of range");
    in_segment[i] = true;
  }
  std::vector<ItemId> cand;
  for (ItemId j = 0; j < m; ++j)
    if (!in_segment[j]) cand.push_back(j);

  std::unordered_map<ItemId, std::size_t> occurrences;
  for (auto i : segment) ++occurrences[i];

  std::vector<double> scores(m, 0.0);
  std::vector<double> sim(m);
  const double unit = 1.0 / static_cast<double>(segment.size());
  // iterate in item order so the floating-point sum is independent of segment order
  std::vector<ItemId> distinct;
  for (const auto& [i, c] : occurrences) distinct.push_back(i);
  std::sort(distinct.begin(), distinct.end());
  for (auto src : distinct) {
    const Vector qs = factors.vectors.row(static_cast<Eigen::Index>(src)).transpose();
    const Vector dots = factors.vectors * qs;
    for (ItemId j = 0; j < m; ++j) sim[j] = dots(static_cast<Eigen::Index>(j));
    const auto psi = detail::top_by(cand, l, {sim, popularity});
    const double w = unit * static_cast<double>(occurrences[src]);
    for (auto j : psi) scores[j] += w;
  }
  return scores;
}

struct Recommendation {
  std::string user_id;
  std::vector<ItemId> ranked_items;
  std::vector<double> scores;
  /// Last segment was empty and an earlier one was used.
  bool fell_back = false;
};

/// Top-N by score among items not in `exclude`, ties by popularity then index.
inline Recommendation rank_items(const std::string& user_id, std::span<const double> scores,
                                 std::span<const ItemId> exclude, std::span<const double> popularity,
                                 std::size_t top_n) {
  const std::size_t m = scores.size();
  std::vector<bool> seen(m, false);
  for (auto i : exclude)
    if (i < m) seen[i] = true;
  std::vector<ItemId> cand;
  for (ItemId j = 0; j < m; ++j)
    if (!seen[j]) cand.push_back(j);
  Recommendation rec;
  rec.user_id = user_id;
  rec.ranked_items = detail::top_by(std::move(cand), top_n, {scores, popularity});
  for (auto i : rec.ranked_items) rec.scores.push_back(scores[i]);
  return rec;
}

/// A user's observed history split into ordered segments.
struct UserHistory {
  std::string user_id;
  std::vector<ItemList> segments;

  ItemList all_items() const {
    ItemList out;
    for (const auto& s : segments) out.insert(out.end(), s.begin(), s.end());
    return out;
  }
};

struct RecommendOptions {
  std::size_t neighbors = 10;
  std::size_t top_n = 10;
};

/// Neighborhood recommendation from the user's most recent non-empty segment.
inline Recommendation segment_recommend(const ItemFactors& factors, const UserHistory& user,
                                        std::span<const double> popularity,
                                        const RecommendOptions& opt = {}) {
  require(!user.segments.empty(), "segment_recommend: user '" + user.user_id + "' has no segments");
  std::size_t last = user.segments.size();
  while (last > 0 && user.segments[last - 1].empty()) --last;
  require(last > 0, "segment_recommend: user '" + user.user_id + "' has no interactions");
  const auto scores = score_by_segment(factors, user.segments[last - 1], opt.neighbors, popularity);
  const auto history = user.all_items();
  auto rec = rank_items(user.user_id, scores, history, popularity, opt.top_n);
  rec.fell_back = last != user.segments.size();
  return rec;
}

/// SMF: item factors q from NMF over the segmented matrix.
inline Recommendation smf_recommend(const ItemFactors& q, const UserHistory& user,
                                    std::span<const double> popularity,
                                    const RecommendOptions& opt = {}) {
  return segment_recommend(q, user, popularity, opt);
}

/// HMMR: item factors P(s|i) from the HMM emissions.
inline Recommendation hmmr_recommend(const HmmModel& model, const UserHistory& user,
                                     std::span<const double> popularity,
                                     const RecommendOptions& opt = {}) {
  return segment_recommend(hmm_item_factors(model), user, popularity, opt);
}

/// Static latent-factor scoring p_u . q_i over the unsegmented matrix.
inline Recommendation user_factor_recommend(const FactorPair& f, std::size_t row,
                                            const UserHistory& user,
                                            std::span<const double> popularity, std::size_t top_n) {
  const Vector s = f.q * f.p.row(static_cast<Eigen::Index>(row)).transpose();
  std::vector<double> scores(s.data(), s.data() + s.size());
  return rank_items(user.user_id, scores, user.all_items(), popularity, top_n);
}

/// Global popularity ranking with the user's own items removed; ties by index.
inline Recommendation pop_rank(std::span<const double> popularity, const UserHistory& user,
                               std::size_t top_n) {
  return rank_items(user.user_id, popularity, user.all_items(), {}, top_n);
}

}  // namespace hmmrec
