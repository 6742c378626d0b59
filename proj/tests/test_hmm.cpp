#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <vector>

#include "hmmrec.hpp"

using namespace hmmrec;

namespace {

std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n, double zero_prob = 0.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n);
  double s = 0.0;
  for (auto& x : v) {
    x = u(rng) < zero_prob ? 0.0 : u(rng) + 1e-3;
    s += x;
  }
  if (s == 0.0) {
    v[0] = 1.0;
    s = 1.0;
  }
  for (auto& x : v) x /= s;
  return v;
}

HmmModel random_model(std::mt19937_64& rng, std::size_t h, std::size_t m, double zero_prob = 0.0) {
  HmmModel model(h, m);
  auto pi = random_simplex(rng, h, zero_prob);
  for (std::size_t z = 0; z < h; ++z) {
    model.pi(static_cast<Eigen::Index>(z)) = pi[z];
    auto a = random_simplex(rng, h, zero_prob);
    auto b = random_simplex(rng, m, zero_prob);
    for (std::size_t k = 0; k < h; ++k) model.trans(static_cast<Eigen::Index>(z), static_cast<Eigen::Index>(k)) = a[k];
    for (std::size_t k = 0; k < m; ++k) model.emit(static_cast<Eigen::Index>(z), static_cast<Eigen::Index>(k)) = b[k];
  }
  return model;
}

ItemList random_items(std::mt19937_64& rng, std::size_t m, std::size_t T) {
  std::uniform_int_distribution<std::size_t> d(0, m - 1);
  ItemList out(T);
  for (auto& x : out) x = d(rng);
  return out;
}

// plain products over every state path
struct Enumeration {
  double total = 0.0;
  double best = 0.0;
};

Enumeration enumerate_paths(const HmmModel& model, const ItemList& items) {
  const std::size_t h = model.num_states;
  const std::size_t T = items.size();
  std::vector<std::size_t> path(T, 0);
  Enumeration e;
  for (;;) {
    double p = model.pi(static_cast<Eigen::Index>(path[0])) *
               model.emit(static_cast<Eigen::Index>(path[0]), static_cast<Eigen::Index>(items[0]));
    for (std::size_t t = 1; t < T; ++t)
      p *= model.trans(static_cast<Eigen::Index>(path[t - 1]), static_cast<Eigen::Index>(path[t])) *
           model.emit(static_cast<Eigen::Index>(path[t]), static_cast<Eigen::Index>(items[t]));
    e.total += p;
    e.best = std::max(e.best, p);
    std::size_t t = 0;
    while (t < T && ++path[t] == h) path[t++] = 0;
    if (t == T) break;
  }
  return e;
}

HmmModel permute_states(const HmmModel& m, const std::vector<std::size_t>& perm) {
  HmmModel out(m.num_states, m.num_items);
  for (std::size_t a = 0; a < m.num_states; ++a) {
    const auto pa = static_cast<Eigen::Index>(perm[a]);
    const auto ai = static_cast<Eigen::Index>(a);
    out.pi(pa) = m.pi(ai);
    out.emit.row(pa) = m.emit.row(ai);
    for (std::size_t b = 0; b < m.num_states; ++b)
      out.trans(pa, static_cast<Eigen::Index>(perm[b])) = m.trans(ai, static_cast<Eigen::Index>(b));
  }
  return out;
}

std::vector<InteractionSequence> sample_corpus(const HmmModel& model, std::size_t n, std::size_t T,
                                               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto draw = [&](auto row) {
    std::vector<double> w(row.data(), row.data() + row.size());
    return std::discrete_distribution<std::size_t>(w.begin(), w.end())(rng);
  };
  std::vector<InteractionSequence> out;
  for (std::size_t s = 0; s < n; ++s) {
    InteractionSequence seq;
    seq.user_id = "s" + std::to_string(s);
    Vector pi = model.pi;
    std::size_t z = draw(pi);
    for (std::size_t t = 0; t < T; ++t) {
      if (t > 0) z = draw(Vector(model.trans.row(static_cast<Eigen::Index>(z)).transpose()));
      seq.items.push_back(draw(Vector(model.emit.row(static_cast<Eigen::Index>(z)).transpose())));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

HmmModel block_model() {
  // state 0 emits {0..4}, state 1 emits {5..9}
  HmmModel m(2, 10);
  m.pi << 0.5, 0.5;
  m.trans << 0.9, 0.1, 0.1, 0.9;
  m.emit.setZero();
  for (int i = 0; i < 5; ++i) {
    m.emit(0, i) = 0.2;
    m.emit(1, i + 5) = 0.2;
  }
  return m;
}

}  // namespace

TEST(Forward, DegenerateSingleStateIsLogOne) {
  HmmModel m(1, 1);
  EXPECT_EQ(forward_log_likelihood(m, ItemList{0, 0, 0}), 0.0);
}

TEST(Forward, IdentityChainCannotSwitchSymbol) {
  HmmModel m(2, 2);
  m.trans << 1, 0, 0, 1;
  m.emit << 1, 0, 0, 1;
  EXPECT_EQ(forward_log_likelihood(m, ItemList{0, 1}), kNegInf);
}

TEST(Forward, RejectsOutOfRangeItems) {
  HmmModel m(2, 3);
  EXPECT_THROW(forward_log_likelihood(m, ItemList{0, 3}), InputError);
  EXPECT_THROW(viterbi_decode(m, ItemList{7}), InputError);
  EXPECT_THROW(forward_log_likelihood(m, ItemList{}), InputError);
}

TEST(Forward, MatchesPathEnumerationOn200RandomInstances) {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 1 + trial % 3, m = 1 + (trial / 3) % 4, T = 1 + (trial / 12) % 6;
    const auto model = random_model(rng, h, m, trial % 4 == 0 ? 0.3 : 0.0);
    const auto items = random_items(rng, m, T);
    const auto e = enumerate_paths(model, items);
    const double ll = forward_log_likelihood(model, items);
    if (e.total == 0.0) {
      EXPECT_EQ(ll, kNegInf) << "trial " << trial;
      continue;
    }
    EXPECT_LE(std::abs(std::exp(ll) - e.total), 1e-10 * e.total) << "trial " << trial;
  }
}

TEST(Viterbi, MatchesExhaustiveArgmaxOn200RandomInstances) {
  std::mt19937_64 rng(202);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 1 + trial % 3, m = 1 + (trial / 3) % 4, T = 1 + (trial / 12) % 6;
    const auto model = random_model(rng, h, m, trial % 4 == 0 ? 0.3 : 0.0);
    const auto items = random_items(rng, m, T);
    const auto e = enumerate_paths(model, items);
    if (e.best == 0.0) {
      EXPECT_THROW(viterbi_decode(model, items), DecodeError);
      continue;
    }
    const auto path = viterbi_decode(model, items);
    ASSERT_EQ(path.states.size(), T);
    EXPECT_LE(path.log_joint, 0.0);
    // compare joints rather than paths, since the oracle may tie
    EXPECT_LE(std::abs(std::exp(path.log_joint) - e.best), 1e-10 * e.best);
    EXPECT_NEAR(path_log_joint(model, items, path.states), path.log_joint, 1e-12 * (1 + std::abs(path.log_joint)));
  }
}

TEST(Viterbi, DeterministicChainHasZeroLogJoint) {
  HmmModel m(2, 2);
  m.pi << 1, 0;
  m.trans << 0, 1, 1, 0;
  m.emit << 1, 0, 0, 1;
  const auto p = viterbi_decode(m, ItemList{0, 1, 0, 1});
  EXPECT_EQ(p.states, (std::vector<std::size_t>{0, 1, 0, 1}));
  EXPECT_EQ(p.log_joint, 0.0);
}

TEST(Viterbi, SingleStateEqualsForward) {
  std::mt19937_64 rng(3);
  const auto m = random_model(rng, 1, 4);
  const ItemList items{0, 3, 2, 2, 1};
  const auto p = viterbi_decode(m, items);
  EXPECT_EQ(p.states, std::vector<std::size_t>(5, 0));
  EXPECT_NEAR(p.log_joint, forward_log_likelihood(m, items), 1e-12);
}

TEST(Viterbi, TiesGoToLowestState) {
  const HmmModel m(3, 2);  // fully uniform, every path ties
  const auto p = viterbi_decode(m, ItemList{1, 0, 1, 1});
  EXPECT_EQ(p.states, std::vector<std::size_t>(4, 0));
}

TEST(Viterbi, ImpossibleSequenceRaises) {
  HmmModel m(2, 2);
  m.trans << 1, 0, 0, 1;
  m.emit << 1, 0, 0, 1;
  try {
    viterbi_decode(m, ItemList{0, 1});
    FAIL() << "expected DecodeError";
  } catch (const DecodeError& e) {
    EXPECT_STREQ(e.what(), "sequence inconsistent with model");
  }
}

TEST(Forward, PermutationOfStatesLeavesLikelihoodUnchanged) {
  std::mt19937_64 rng(404);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 2 + trial % 4, m = 3 + trial % 5;
    const auto model = random_model(rng, h, m);
    std::vector<std::size_t> perm(h);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto items = random_items(rng, m, 20);
    const double a = forward_log_likelihood(model, items);
    const double b = forward_log_likelihood(permute_states(model, perm), items);
    EXPECT_NEAR(a, b, 1e-12 * std::max(1.0, std::abs(a)));
  }
}

TEST(FlooredNormalize, KeepsFloorAndSumsToOne) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + trial % 12;
    std::vector<double> c(m);
    for (auto& x : c) x = u(rng) < 0.4 ? 0.0 : u(rng) * 10;
    if (std::accumulate(c.begin(), c.end(), 0.0) == 0.0) c[0] = 1.0;
    const double floor = 0.05 / static_cast<double>(m);
    const auto b = detail::floored_normalize(c, floor);
    EXPECT_NEAR(std::accumulate(b.begin(), b.end(), 0.0), 1.0, 1e-12);
    for (std::size_t i = 0; i < m; ++i) EXPECT_GE(b[i], floor * (1 - 1e-12));
    // unclamped entries stay proportional to their counts
    double ratio = -1;
    for (std::size_t i = 0; i < m; ++i)
      if (b[i] > floor * (1 + 1e-9)) {
        if (ratio < 0) ratio = b[i] / c[i];
        EXPECT_NEAR(b[i] / c[i], ratio, 1e-9 * ratio);
      }
  }
}

TEST(FlooredNormalize, MaximizesExpectedLogAmongFeasibleRows) {
  // compare against random feasible perturbations
  std::mt19937_64 rng(55);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<double> c{5.0, 0.0, 1.0, 0.01, 3.0};
  const double floor = 0.02;
  const auto b = detail::floored_normalize(c, floor);
  auto obj = [&](const std::vector<double>& x) {
    double s = 0;
    for (std::size_t i = 0; i < c.size(); ++i) s += c[i] * std::log(x[i]);
    return s;
  };
  for (int t = 0; t < 500; ++t) {
    std::vector<double> x(c.size());
    double free = 1.0 - floor * static_cast<double>(c.size());
    auto w = random_simplex(rng, c.size());
    for (std::size_t i = 0; i < c.size(); ++i) x[i] = floor + free * w[i];
    EXPECT_LE(obj(x), obj(b) + 1e-12);
  }
}

TEST(BaumWelch, TrivialCorpusForcedByNormalization) {
  const std::vector<InteractionSequence> corpus{{"a", {0, 0, 0}, {}}, {"b", {0, 0, 0}, {}}};
  const auto m = baum_welch_train(corpus, 1, TrainConfig{});
  EXPECT_DOUBLE_EQ(m.pi(0), 1.0);
  EXPECT_DOUBLE_EQ(m.trans(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(m.emit(0, 0), 1.0);
}

TEST(BaumWelch, RejectsBadArguments) {
  const std::vector<InteractionSequence> empty;
  EXPECT_THROW(baum_welch_train(empty, 2, TrainConfig{}), InputError);
  const std::vector<InteractionSequence> one{{"a", {0, 1}, {}}};
  EXPECT_THROW(baum_welch_train(one, 0, TrainConfig{}), InputError);
  TrainConfig bad;
  bad.max_iters = 0;
  EXPECT_THROW(baum_welch_train(one, 2, bad), InputError);
  bad = TrainConfig{};
  bad.emission_floor = 0.0;
  EXPECT_THROW(baum_welch_train(one, 2, bad), InputError);
  bad = TrainConfig{};
  bad.log_lik_tol = -1;
  EXPECT_THROW(baum_welch_train(one, 2, bad), InputError);
  const std::vector<InteractionSequence> with_empty{{"a", {}, {}}};
  EXPECT_THROW(baum_welch_train(with_empty, 2, TrainConfig{}), InputError);
}

TEST(BaumWelch, LikelihoodMonotoneAndModelStochasticEveryIteration) {
  std::mt19937_64 rng(606);
  for (int corpus_id = 0; corpus_id < 20; ++corpus_id) {
    const std::size_t h = 1 + corpus_id % 4, m = 3 + corpus_id % 7;
    std::vector<InteractionSequence> corpus;
    for (int s = 0; s < 15; ++s)
      corpus.push_back({"u", random_items(rng, m, 1 + (s * 7 + corpus_id) % 25), {}});
    TrainConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(corpus_id);
    cfg.init = corpus_id % 2 ? HmmInit::spectral : HmmInit::frequency;
    auto model = cfg.init == HmmInit::spectral ? spectral_initial_model(corpus, h, m, cfg)
                                               : initial_model(corpus, h, m, cfg);
    model.validate();
    TrainConfig one = cfg;
    one.max_iters = 1;
    one.log_lik_tol = 0.0;
    double prev = corpus_log_likelihood(model, corpus);
    for (int it = 0; it < 30; ++it) {
      auto r = baum_welch_from(model, corpus, one);
      model = r.model;
      model.validate(1e-9);
      const double cur = corpus_log_likelihood(model, corpus);
      EXPECT_GE(cur, prev - 1e-8) << "corpus " << corpus_id << " iteration " << it;
      prev = cur;
    }
  }
}

TEST(BaumWelch, HistoryIsMonotoneAndStopsOnTolerance) {
  const auto corpus = sample_corpus(block_model(), 50, 30, 9);
  TrainConfig cfg;
  cfg.max_iters = 500;
  const auto r = baum_welch_fit(corpus, 3, cfg);
  ASSERT_GE(r.log_lik_history.size(), 2u);
  EXPECT_EQ(r.log_lik_history.size(), static_cast<std::size_t>(r.iterations) + 1);
  for (std::size_t i = 1; i < r.log_lik_history.size(); ++i)
    EXPECT_GE(r.log_lik_history[i], r.log_lik_history[i - 1] - 1e-8);
  EXPECT_TRUE(r.converged);
  const double last = r.log_lik_history.back(), before = r.log_lik_history[r.log_lik_history.size() - 2];
  EXPECT_LT(last - before, cfg.log_lik_tol * std::abs(before));
}

TEST(BaumWelch, EmissionFloorKeepsEveryEntryPositive) {
  const auto corpus = sample_corpus(block_model(), 40, 20, 10);
  TrainConfig cfg;
  const auto m = baum_welch_train(corpus, 2, cfg, 12);  // items 10, 11 never observed
  const double floor = cfg.emission_floor / 12.0;
  for (Eigen::Index z = 0; z < 2; ++z)
    for (Eigen::Index i = 0; i < 12; ++i) EXPECT_GE(m.emit(z, i), floor * (1 - 1e-12));
  // a held-out sequence with unseen items still decodes
  EXPECT_NO_THROW(viterbi_decode(m, ItemList{10, 11, 0}));
}

TEST(BaumWelch, RecoversWellSeparatedModelWithinOnePercent) {
  const auto truth = block_model();
  const auto corpus = sample_corpus(truth, 200, 50, 77);
  for (auto init : {HmmInit::frequency, HmmInit::spectral, HmmInit::best}) {
    TrainConfig cfg;
    cfg.seed = 5;
    cfg.init = init;
    const auto learned = baum_welch_train(corpus, 2, cfg, 10);
    const double ll_true = corpus_log_likelihood(truth, corpus);
    const double ll = corpus_log_likelihood(learned, corpus);
    EXPECT_GE(ll, ll_true - 0.01 * std::abs(ll_true)) << init_name(init);
  }
}

TEST(BaumWelch, BestInitKeepsTheHigherLikelihood) {
  std::mt19937_64 rng(8);
  const auto corpus = sample_corpus(random_model(rng, 3, 8), 60, 25, 81);
  TrainConfig cfg;
  cfg.seed = 2;
  cfg.init = HmmInit::frequency;
  const auto f = baum_welch_fit(corpus, 3, cfg);
  cfg.init = HmmInit::spectral;
  const auto s = baum_welch_fit(corpus, 3, cfg);
  cfg.init = HmmInit::best;
  const auto b = baum_welch_fit(corpus, 3, cfg);
  EXPECT_EQ(b.log_lik_history.back(), std::max(f.log_lik_history.back(), s.log_lik_history.back()));
}

TEST(BaumWelch, SpectralStartSeparatesDisjointVocabularies) {
  const auto corpus = sample_corpus(block_model(), 100, 40, 12);
  TrainConfig cfg;
  const auto m = spectral_initial_model(corpus, 2, 10, cfg);
  // each state starts with most of its mass on one block
  for (Eigen::Index z = 0; z < 2; ++z) {
    const double left = m.emit.row(z).head(5).sum();
    EXPECT_TRUE(left > 0.6 || left < 0.4) << "state " << z << " left mass " << left;
  }
  EXPECT_NE(m.emit.row(0).head(5).sum() > 0.5, m.emit.row(1).head(5).sum() > 0.5);
}

TEST(BaumWelch, DeterministicAcrossRunsAndThreadCounts) {
  std::mt19937_64 rng(9);
  const auto corpus = sample_corpus(random_model(rng, 3, 6), 150, 20, 90);
  TrainConfig cfg;
  cfg.seed = 4;
  const auto a = baum_welch_train(corpus, 3, cfg);
  cfg.threads = 3;
  const auto b = baum_welch_train(corpus, 3, cfg);
  EXPECT_TRUE(a.pi == b.pi);
  EXPECT_TRUE(a.trans == b.trans);
  EXPECT_TRUE(a.emit == b.emit);
}

TEST(Serialization, RoundTripIsBitExact) {
  std::mt19937_64 rng(10);
  const auto model = random_model(rng, 4, 9);
  TrainConfig cfg;
  cfg.seed = 1234567890123ULL;
  cfg.log_lik_tol = 3e-7;
  cfg.init = HmmInit::spectral;
  const auto path = (std::filesystem::temp_directory_path() / "hmmrec_test_model.json").string();
  save_model(path, model, cfg, {{"note", "x"}});
  TrainConfig back;
  const auto loaded = load_model(path, &back);
  std::filesystem::remove(path);
  EXPECT_TRUE(loaded.pi == model.pi);
  EXPECT_TRUE(loaded.trans == model.trans);
  EXPECT_TRUE(loaded.emit == model.emit);
  EXPECT_EQ(back.seed, cfg.seed);
  EXPECT_EQ(back.log_lik_tol, cfg.log_lik_tol);
  EXPECT_EQ(back.init, HmmInit::spectral);
  const auto items = random_items(rng, 9, 30);
  const auto p1 = viterbi_decode(model, items), p2 = viterbi_decode(loaded, items);
  EXPECT_EQ(p1.states, p2.states);
  EXPECT_EQ(p1.log_joint, p2.log_joint);
}

TEST(Serialization, RejectsMalformedFiles) {
  EXPECT_THROW(load_model("/nonexistent/model.json"), InputError);
  const auto path = (std::filesystem::temp_directory_path() / "hmmrec_bad_model.json").string();
  {
    std::ofstream(path) << "{\"format\": \"hmmrec.hmm\", \"num_states\": 2, \"num_items\": 2, \"pi\": [0.5, 0.5],"
                           " \"trans\": [[1, 0]], \"emit\": [[1, 0], [0, 1]]}";
  }
  EXPECT_THROW(load_model(path), InputError);
  { std::ofstream(path) << "{not json"; }
  EXPECT_THROW(load_model(path), InputError);
  {
    std::ofstream(path) << "{\"format\": \"hmmrec.hmm\", \"num_states\": 1, \"num_items\": 2, \"pi\": [1],"
                           " \"trans\": [[1]], \"emit\": [[0.7, 0.7]]}";
  }
  EXPECT_THROW(load_model(path), InputError);
  std::filesystem::remove(path);
}

TEST(Model, ValidateCatchesBrokenInvariants) {
  HmmModel m(2, 3);
  EXPECT_NO_THROW(m.validate());
  m.emit(1, 0) = -0.1;
  EXPECT_THROW(m.validate(), InputError);
  m = HmmModel(2, 3);
  m.trans(0, 0) = 0.9;
  EXPECT_THROW(m.validate(), InputError);
  m = HmmModel(2, 3);
  m.pi(0) = 0.2;
  EXPECT_THROW(m.validate(), InputError);
}

TEST(Sequence, ValidateChecksTruthRange) {
  InteractionSequence s{"u", {0, 1, 2}, 3};
  EXPECT_THROW(s.validate(3), InputError);
  s.truth_change = 0;
  EXPECT_THROW(s.validate(3), InputError);
  s.truth_change = 2;
  EXPECT_NO_THROW(s.validate(3));
  EXPECT_THROW(s.validate(2), InputError);
}
