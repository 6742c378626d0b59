#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include "hmmrec.hpp"

using namespace hmmrec;

TEST(Ndcg, HandDerivedSwapExample) {
  const ItemList truth{7, 3};  // relevance 2, 1
  const ItemList rec{3, 7};
  const double dcg = 1.0 / std::log2(2.0) + 2.0 / std::log2(3.0);
  const double idcg = 2.0 / std::log2(2.0) + 1.0 / std::log2(3.0);
  EXPECT_NEAR(ndcg_time_aware(rec, truth, 2), dcg / idcg, 1e-15);
  EXPECT_NEAR(ndcg_time_aware(rec, truth, 2), 0.8597, 1e-4);
}

TEST(Ndcg, IdealAndDisjointRankings) {
  ItemList truth(10);
  std::iota(truth.begin(), truth.end(), 100);
  EXPECT_DOUBLE_EQ(ndcg_time_aware(truth, truth, 10), 1.0);
  ItemList other(10);
  std::iota(other.begin(), other.end(), 0);
  EXPECT_EQ(ndcg_time_aware(other, truth, 10), 0.0);
  EXPECT_THROW(ndcg_time_aware(other, ItemList{}, 10), InputError);
  EXPECT_THROW(ndcg_time_aware(other, truth, 0), InputError);
}

TEST(Ndcg, BoundedAndOneOnlyForIdealOrder) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> item(0, 14);
  for (int rep = 0; rep < 1000; ++rep) {
    ItemList truth;
    std::set<ItemId> used;
    while (truth.size() < 5) {
      const auto i = item(rng);
      if (used.insert(i).second) truth.push_back(i);
    }
    ItemList rec(15);
    std::iota(rec.begin(), rec.end(), 0);
    std::shuffle(rec.begin(), rec.end(), rng);
    const double v = ndcg_time_aware(rec, truth, 10);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0 + 1e-15);
    const bool ideal = std::equal(truth.begin(), truth.end(), rec.begin());
    EXPECT_EQ(std::abs(v - 1.0) < 1e-12, ideal);
  }
}

TEST(PrecisionRecall, Examples) {
  ItemList truth(10), rec(10);
  std::iota(truth.begin(), truth.end(), 0);
  std::iota(rec.begin(), rec.end(), 5);
  auto pr = precision_recall_at(rec, truth, 10);
  EXPECT_DOUBLE_EQ(pr.precision, 0.5);
  EXPECT_DOUBLE_EQ(pr.recall, 0.5);
  std::iota(rec.begin(), rec.end(), 50);
  pr = precision_recall_at(rec, truth, 10);
  EXPECT_EQ(pr.precision, 0.0);
  EXPECT_EQ(pr.recall, 0.0);
  rec = truth;
  std::reverse(rec.begin(), rec.end());
  pr = precision_recall_at(rec, truth, 10);
  EXPECT_EQ(pr.precision, 1.0);
  EXPECT_EQ(pr.recall, 1.0);
  EXPECT_THROW(precision_recall_at(rec, ItemList{}, 10), InputError);
}

TEST(PrecisionRecall, IdentitiesOnRandomRankings) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> item(0, 49), len(1, 10);
  for (int rep = 0; rep < 1000; ++rep) {
    ItemList truth(len(rng));
    for (auto& x : truth) x = item(rng);
    const double distinct = static_cast<double>(std::set<ItemId>(truth.begin(), truth.end()).size());
    ItemList rec(50);
    std::iota(rec.begin(), rec.end(), 0);
    std::shuffle(rec.begin(), rec.end(), rng);
    double prev_recall = 0;
    for (std::size_t n = 1; n <= 20; ++n) {
      const auto pr = precision_recall_at(rec, truth, n);
      EXPECT_NEAR(pr.precision * static_cast<double>(n), pr.recall * distinct, 1e-12);
      EXPECT_GE(pr.recall, prev_recall);
      prev_recall = pr.recall;
    }
  }
}

TEST(PrecisionRecall, RandomRecommenderHasBasePrecision) {
  // expected precision of a random list is |truth| / m
  std::mt19937_64 rng(3);
  ItemList truth(10);
  std::iota(truth.begin(), truth.end(), 0);
  ItemList rec(100);
  std::iota(rec.begin(), rec.end(), 0);
  double sum = 0;
  const int reps = 20000;
  for (int r = 0; r < reps; ++r) {
    std::shuffle(rec.begin(), rec.end(), rng);
    sum += precision_recall_at(rec, truth, 10).precision;
  }
  EXPECT_NEAR(sum / reps, 0.1, 0.005);
}

TEST(Curve, RecallNonDecreasingAndPerfectReachesOne) {
  ItemList truth{4, 8, 15, 16, 23, 42, 1, 2, 3, 5};
  std::vector<std::size_t> grid(10);
  std::iota(grid.begin(), grid.end(), 1);
  const std::vector<RankedCase> perfect{{"u", truth, truth}};
  const auto c = pr_curve(perfect, grid);
  ASSERT_EQ(c.size(), 10u);
  for (std::size_t i = 1; i < c.size(); ++i) EXPECT_GE(c[i].recall, c[i - 1].recall);
  EXPECT_EQ(c.back().recall, 1.0);
  const std::vector<std::size_t> bad{2, 1};
  EXPECT_THROW(pr_curve(perfect, bad), InputError);
}

TEST(Aggregate, MeanDeltaAndUserSetChecks) {
  std::map<std::string, std::vector<DetectionRecord>> by;
  by["A"] = {{"A", "u1", 80, 40, {40}, {}, false}, {"A", "u2", 80, 30, {40}, {}, false}};
  by["B"] = {{"B", "u2", 80, 30, {}, {}, true}, {"B", "u1", 80, 40, {41}, {1.0}, false}};
  const auto m = aggregate_cpd(by);
  EXPECT_EQ(m.at("A"), 5.0);
  EXPECT_EQ(m.at("B"), (49.0 + 1.0) / 2.0);  // flagged record falls back to T-1

  auto mismatch = by;
  mismatch["B"][0].user_id = "u3";
  EXPECT_THROW(aggregate_cpd(mismatch), InputError);
  auto no_truth = by;
  no_truth["A"][0].truth.reset();
  EXPECT_THROW(aggregate_cpd(no_truth), InputError);
}

TEST(Aggregate, InvariantToUserOrder) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> pos(1, 79);
  std::vector<DetectionRecord> recs;
  for (int u = 0; u < 200; ++u) recs.push_back({"M", "u" + std::to_string(u), 80, pos(rng), {pos(rng)}, {}, false});
  const double a = aggregate_cpd({{"M", recs}}).at("M");
  std::vector<RankedCase> cases;
  for (int u = 0; u < 50; ++u) {
    ItemList rec(20), truth{static_cast<ItemId>(u % 20), static_cast<ItemId>((u * 7) % 20)};
    std::iota(rec.begin(), rec.end(), 0);
    std::shuffle(rec.begin(), rec.end(), rng);
    cases.push_back({"u", rec, truth});
  }
  const double n1 = mean_ndcg(cases, 10);
  std::shuffle(recs.begin(), recs.end(), rng);
  std::shuffle(cases.begin(), cases.end(), rng);
  EXPECT_NEAR(aggregate_cpd({{"M", recs}}).at("M"), a, 1e-12);
  EXPECT_NEAR(mean_ndcg(cases, 10), n1, 1e-12);
}
