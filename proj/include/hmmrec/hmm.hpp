#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include <Eigen/QR>
#include <Eigen/Sparse>

#include "hmmrec/common.hpp"

namespace hmmrec {

/// Discrete-observation HMM. trans(z, z') = P(Z_t = z' | Z_{t-1} = z),
/// emit(z, i) = P(Y_t = i | Z_t = z).
struct HmmModel {
  std::size_t num_states = 0;
  std::size_t num_items = 0;
  Vector pi;
  Matrix trans;
  Matrix emit;

  HmmModel() = default;
  HmmModel(std::size_t h, std::size_t m)
      : num_states(h),
        num_items(m),
        pi(Vector::Constant(static_cast<Eigen::Index>(h), 1.0 / static_cast<double>(h))),
        trans(Matrix::Constant(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(h),
                               1.0 / static_cast<double>(h))),
        emit(Matrix::Constant(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(m),
                              1.0 / static_cast<double>(m))) {}

  /// Throws InputError unless shapes agree and every distribution is
  /// nonnegative and sums to one within tol.
  void validate(double tol = 1e-9) const {
    require(num_states >= 1 && num_items >= 1, "HmmModel: h and m must be positive");
    const auto h = static_cast<Eigen::Index>(num_states);
    const auto m = static_cast<Eigen::Index>(num_items);
    require(pi.size() == h && trans.rows() == h && trans.cols() == h && emit.rows() == h &&
                emit.cols() == m,
            "HmmModel: inconsistent shapes");
    require((pi.array() >= 0.0).all() && (trans.array() >= 0.0).all() &&
                (emit.array() >= 0.0).all(),
            "HmmModel: negative probability");
    require(std::abs(pi.sum() - 1.0) <= tol, "HmmModel: pi does not sum to 1");
    for (Eigen::Index z = 0; z < h; ++z) {
      require(std::abs(trans.row(z).sum() - 1.0) <= tol,
              "HmmModel: transition row " + std::to_string(z) + " does not sum to 1");
      require(std::abs(emit.row(z).sum() - 1.0) <= tol,
              "HmmModel: emission row " + std::to_string(z) + " does not sum to 1");
    }
  }
};

struct InteractionSequence {
  std::string user_id;
  ItemList items;
  /// Index of the first item after the change, in [1, T).
  std::optional<std::size_t> truth_change;

  std::size_t size() const noexcept { return items.size(); }

  void validate(std::size_t num_items) const {
    require(!items.empty(), "sequence '" + user_id + "' is empty");
    for (auto i : items)
      require(i < num_items, "sequence '" + user_id + "': item index " + std::to_string(i) +
                                 " out of range (m=" + std::to_string(num_items) + ")");
    if (truth_change)
      require(*truth_change >= 1 && *truth_change < items.size(),
              "sequence '" + user_id + "': truth change point out of range");
  }
};

struct DecodedPath {
  std::vector<std::size_t> states;
  double log_joint = 0.0;
};

/// Starting point(s) for EM. `best` runs from both and keeps the higher final likelihood.
enum class HmmInit { frequency, spectral, best };

inline const char* init_name(HmmInit i) {
  switch (i) {
    case HmmInit::frequency: return "frequency";
    case HmmInit::spectral: return "spectral";
    default: return "best";
  }
}

inline HmmInit parse_init(const std::string& s) {
  if (s == "frequency") return HmmInit::frequency;
  if (s == "spectral") return HmmInit::spectral;
  if (s == "best") return HmmInit::best;
  throw InputError("unknown HMM init '" + s + "' (frequency | spectral | best)");
}

struct TrainConfig {
  int max_iters = 100;
  double log_lik_tol = 1e-5;
  std::uint64_t seed = 0;
  /// Total emission mass reserved per state row; each entry is kept >= floor / m.
  double emission_floor = 1e-6;
  HmmInit init = HmmInit::best;
  unsigned threads = 1;

  void validate() const {
    require(max_iters >= 1, "TrainConfig: max_iters must be >= 1");
    require(log_lik_tol >= 0.0, "TrainConfig: log_lik_tol must be >= 0");
    require(emission_floor > 0.0, "TrainConfig: emission_floor must be > 0");
  }
};

/// Decoding failed because every state path has zero probability.
class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

namespace detail {

inline void check_items(const HmmModel& model, std::span<const ItemId> items) {
  for (auto i : items)
    require(i < model.num_items, "item index " + std::to_string(i) + " out of range (m=" +
                                     std::to_string(model.num_items) + ")");
}

inline double safe_log(double p) { return p > 0.0 ? std::log(p) : kNegInf; }

/// Scaled forward pass. alpha row t is normalized; scale[t] is the
/// normalizer. Returns false if the forward mass vanishes at some step.
inline bool forward_scaled(const HmmModel& model, std::span<const ItemId> obs, Matrix& alpha,
                           std::vector<double>& scale) {
  const auto h = static_cast<Eigen::Index>(model.num_states);
  const auto T = obs.size();
  alpha.resize(static_cast<Eigen::Index>(T), h);
  scale.assign(T, 0.0);
  for (Eigen::Index z = 0; z < h; ++z)
    alpha(0, z) = model.pi(z) * model.emit(z, static_cast<Eigen::Index>(obs[0]));
  for (std::size_t t = 0; t < T; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    if (t > 0) {
      const auto o = static_cast<Eigen::Index>(obs[t]);
      alpha.row(ti).noalias() = alpha.row(ti - 1) * model.trans;
      for (Eigen::Index z = 0; z < h; ++z) alpha(ti, z) *= model.emit(z, o);
    }
    const double c = alpha.row(ti).sum();
    if (!(c > 0.0)) return false;
    scale[t] = c;
    alpha.row(ti) /= c;
  }
  return true;
}

/// Row-normalizes `counts` maximizing sum c_i log b_i subject to b_i >= floor.
/// Water-filling on the KKT threshold: clamp every entry with c_i / lambda <= floor.
inline std::vector<double> floored_normalize(std::span<const double> counts, double floor) {
  const std::size_t m = counts.size();
  std::vector<bool> clamped(m, false);
  std::size_t n_clamped = 0;
  std::vector<double> out(m, floor);
  for (;;) {
    double free_mass = 0.0;
    for (std::size_t i = 0; i < m; ++i)
      if (!clamped[i]) free_mass += counts[i];
    const double lambda = free_mass / (1.0 - floor * static_cast<double>(n_clamped));
    bool changed = false;
    for (std::size_t i = 0; i < m; ++i) {
      if (!clamped[i] && counts[i] <= lambda * floor) {
        clamped[i] = true;
        ++n_clamped;
        changed = true;
      }
    }
    if (!changed) {
      for (std::size_t i = 0; i < m; ++i) out[i] = clamped[i] ? floor : counts[i] / lambda;
      return out;
    }
  }
}

struct SufficientStats {
  Vector pi;
  Matrix trans;
  Matrix emit;
  double log_lik = 0.0;

  SufficientStats(Eigen::Index h, Eigen::Index m)
      : pi(Vector::Zero(h)), trans(Matrix::Zero(h, h)), emit(Matrix::Zero(h, m)) {}

  void add(const SufficientStats& o) {
    pi += o.pi;
    trans += o.trans;
    emit += o.emit;
    log_lik += o.log_lik;
  }
};

inline void accumulate_sequence(const HmmModel& model, std::span<const ItemId> obs,
                                SufficientStats& acc, Matrix& alpha, Matrix& beta,
                                std::vector<double>& scale) {
  const auto h = static_cast<Eigen::Index>(model.num_states);
  const auto T = static_cast<Eigen::Index>(obs.size());
  if (!forward_scaled(model, obs, alpha, scale))
    throw DecodeError("sequence has zero likelihood under the current model");
  beta.resize(T, h);
  beta.row(T - 1).setOnes();
  Vector weighted(h);
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    const auto o = static_cast<Eigen::Index>(obs[static_cast<std::size_t>(t + 1)]);
    for (Eigen::Index z = 0; z < h; ++z) weighted(z) = model.emit(z, o) * beta(t + 1, z);
    weighted /= scale[static_cast<std::size_t>(t + 1)];
    beta.row(t).noalias() = (model.trans * weighted).transpose();
    for (Eigen::Index z = 0; z < h; ++z)
      acc.trans.row(z) += alpha(t, z) * model.trans.row(z).cwiseProduct(weighted.transpose());
  }
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto o = static_cast<Eigen::Index>(obs[static_cast<std::size_t>(t)]);
    for (Eigen::Index z = 0; z < h; ++z) {
      const double g = alpha(t, z) * beta(t, z);
      acc.emit(z, o) += g;
      if (t == 0) acc.pi(z) += g;
    }
  }
  for (double c : scale) acc.log_lik += std::log(c);
}

}  // namespace detail

/// log P(Y_1..Y_T | model); -inf when the sequence is impossible.
inline double forward_log_likelihood(const HmmModel& model, std::span<const ItemId> items) {
  require(!items.empty(), "forward_log_likelihood: empty sequence");
  detail::check_items(model, items);
  Matrix alpha;
  std::vector<double> scale;
  if (!detail::forward_scaled(model, items, alpha, scale)) return kNegInf;
  double ll = 0.0;
  for (double c : scale) ll += std::log(c);
  return ll;
}

inline double forward_log_likelihood(const HmmModel& model, const InteractionSequence& seq) {
  return forward_log_likelihood(model, std::span<const ItemId>(seq.items));
}

/// Log-space Viterbi. Ties resolve to the lowest state index.
inline DecodedPath viterbi_decode(const HmmModel& model, std::span<const ItemId> items) {
  require(!items.empty(), "viterbi_decode: empty sequence");
  detail::check_items(model, items);
  const std::size_t h = model.num_states;
  const std::size_t T = items.size();
  const auto hi = static_cast<Eigen::Index>(h);

  Matrix log_trans(hi, hi);
  for (Eigen::Index a = 0; a < hi; ++a)
    for (Eigen::Index b = 0; b < hi; ++b) log_trans(a, b) = detail::safe_log(model.trans(a, b));

  std::vector<double> delta(h), next(h);
  std::vector<std::size_t> back(T * h, 0);
  for (std::size_t z = 0; z < h; ++z) {
    const auto zi = static_cast<Eigen::Index>(z);
    delta[z] = detail::safe_log(model.pi(zi)) +
               detail::safe_log(model.emit(zi, static_cast<Eigen::Index>(items[0])));
  }
  for (std::size_t t = 1; t < T; ++t) {
    const auto o = static_cast<Eigen::Index>(items[t]);
    for (std::size_t z = 0; z < h; ++z) {
      double best = kNegInf;
      std::size_t arg = 0;
      for (std::size_t p = 0; p < h; ++p) {
        const double v = delta[p] + log_trans(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(z));
        if (v > best) {
          best = v;
          arg = p;
        }
      }
      back[t * h + z] = arg;
      next[z] = best + detail::safe_log(model.emit(static_cast<Eigen::Index>(z), o));
    }
    delta.swap(next);
  }
  double best = kNegInf;
  std::size_t last = 0;
  for (std::size_t z = 0; z < h; ++z) {
    if (delta[z] > best) {
      best = delta[z];
      last = z;
    }
  }
  if (best == kNegInf) throw DecodeError("sequence inconsistent with model");

  DecodedPath path;
  path.states.resize(T);
  path.states[T - 1] = last;
  for (std::size_t t = T - 1; t > 0; --t) path.states[t - 1] = back[t * h + path.states[t]];
  path.log_joint = best;
  return path;
}

inline DecodedPath viterbi_decode(const HmmModel& model, const InteractionSequence& seq) {
  return viterbi_decode(model, std::span<const ItemId>(seq.items));
}

/// log P(Z = states, Y = items | model) for an explicit path.
inline double path_log_joint(const HmmModel& model, std::span<const ItemId> items,
                             std::span<const std::size_t> states) {
  require(items.size() == states.size() && !items.empty(), "path_log_joint: length mismatch");
  double lp = detail::safe_log(model.pi(static_cast<Eigen::Index>(states[0])));
  for (std::size_t t = 0; t < items.size(); ++t) {
    const auto z = static_cast<Eigen::Index>(states[t]);
    if (t > 0) lp += detail::safe_log(model.trans(static_cast<Eigen::Index>(states[t - 1]), z));
    lp += detail::safe_log(model.emit(z, static_cast<Eigen::Index>(items[t])));
  }
  return lp;
}

/// Initial parameters: uniform pi, uniform-plus-Dirichlet transitions, and
/// emissions mixing corpus item frequencies with Dirichlet noise.
inline HmmModel initial_model(std::span<const InteractionSequence> corpus, std::size_t h,
                              std::size_t m, const TrainConfig& cfg) {
  HmmModel model(h, m);
  Rng rng = make_rng(cfg.seed, 0x686d6d);
  std::vector<double> freq(m, 0.0);
  double total = 0.0;
  for (const auto& s : corpus)
    for (auto i : s.items) {
      freq[i] += 1.0;
      total += 1.0;
    }
  for (auto& f : freq) f /= total;

  const double floor = cfg.emission_floor / static_cast<double>(m);
  for (std::size_t z = 0; z < h; ++z) {
    const auto zi = static_cast<Eigen::Index>(z);
    auto noise = sample_dirichlet(rng, h);
    for (std::size_t z2 = 0; z2 < h; ++z2)
      model.trans(zi, static_cast<Eigen::Index>(z2)) = 0.5 / static_cast<double>(h) + 0.5 * noise[z2];
    auto emit_noise = sample_dirichlet(rng, m);
    std::vector<double> mix(m);
    for (std::size_t i = 0; i < m; ++i) mix[i] = 0.5 * freq[i] + 0.5 * emit_noise[i];
    auto row = detail::floored_normalize(mix, floor);
    for (std::size_t i = 0; i < m; ++i) model.emit(zi, static_cast<Eigen::Index>(i)) = row[i];
  }
  return model;
}

namespace detail {

/// Leading k eigenvectors of the degree-normalized graph linking items that
/// follow each other in some sequence, by subspace iteration. Rows are items.
inline Matrix transition_graph_embedding(std::span<const InteractionSequence> corpus, std::size_t m,
                                         std::size_t k, Rng& rng, int iters = 300) {
  using Sparse = Eigen::SparseMatrix<double, Eigen::RowMajor>;
  std::vector<Eigen::Triplet<double>> trip;
  for (const auto& s : corpus)
    for (std::size_t t = 1; t < s.items.size(); ++t) {
      const auto a = static_cast<int>(s.items[t - 1]);
      const auto b = static_cast<int>(s.items[t]);
      if (a == b) continue;
      trip.emplace_back(a, b, 1.0);
      trip.emplace_back(b, a, 1.0);
    }
  const auto mi = static_cast<Eigen::Index>(m);
  Sparse W(mi, mi);
  W.setFromTriplets(trip.begin(), trip.end());
  Vector deg = Vector::Zero(mi);
  for (Eigen::Index r = 0; r < W.outerSize(); ++r)
    for (Sparse::InnerIterator it(W, r); it; ++it) deg(r) += it.value();
  // a small degree regularizer keeps rarely-seen items from dominating
  const double reg = 1e-2 * std::max(1.0, deg.mean());
  Vector inv_sqrt(mi);
  for (Eigen::Index i = 0; i < mi; ++i) inv_sqrt(i) = 1.0 / std::sqrt(deg(i) + reg);
  const Sparse N = inv_sqrt.asDiagonal() * W * inv_sqrt.asDiagonal();

  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto ki = static_cast<Eigen::Index>(std::min(k, m));
  Matrix X(mi, ki);
  for (Eigen::Index i = 0; i < mi; ++i)
    for (Eigen::Index c = 0; c < ki; ++c) X(i, c) = gauss(rng);
  Eigen::MatrixXd Y;
  for (int it = 0; it < iters; ++it) {
    // (I + N) / 2 has the same eigenvectors with a nonnegative spectrum
    Y = 0.5 * (X + N * X);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(Y);
    X = qr.householderQ() * Eigen::MatrixXd::Identity(mi, ki);
  }
  return X;
}

/// Lloyd's k-means with k-means++ seeding. Returns one label per row.
inline std::vector<std::size_t> kmeans_rows(const Matrix& X, std::size_t k, Rng& rng, int iters = 100) {
  const auto n = static_cast<std::size_t>(X.rows());
  k = std::min(k, n);
  auto sq = [&](std::size_t r, const Matrix& C, std::size_t c) {
    return (X.row(static_cast<Eigen::Index>(r)) - C.row(static_cast<Eigen::Index>(c))).squaredNorm();
  };
  Matrix C(static_cast<Eigen::Index>(k), X.cols());
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  C.row(0) = X.row(static_cast<Eigen::Index>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)));
  for (std::size_t c = 1; c < k; ++c) {
    for (std::size_t r = 0; r < n; ++r) best[r] = std::min(best[r], sq(r, C, c - 1));
    const double total = std::accumulate(best.begin(), best.end(), 0.0);
    std::size_t pick = 0;
    if (total > 0.0) {
      pick = std::discrete_distribution<std::size_t>(best.begin(), best.end())(rng);
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    C.row(static_cast<Eigen::Index>(c)) = X.row(static_cast<Eigen::Index>(pick));
  }
  std::vector<std::size_t> label(n, 0);
  for (int it = 0; it < iters; ++it) {
    bool changed = it == 0;
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t arg = 0;
      double d = sq(r, C, 0);
      for (std::size_t c = 1; c < k; ++c) {
        const double e = sq(r, C, c);
        if (e < d) {
          d = e;
          arg = c;
        }
      }
      if (label[r] != arg) changed = true;
      label[r] = arg;
    }
    if (!changed) break;
    Matrix sum = Matrix::Zero(C.rows(), C.cols());
    std::vector<std::size_t> count(k, 0);
    for (std::size_t r = 0; r < n; ++r) {
      sum.row(static_cast<Eigen::Index>(label[r])) += X.row(static_cast<Eigen::Index>(r));
      ++count[label[r]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      if (count[c] > 0) {
        C.row(ci) = sum.row(ci) / static_cast<double>(count[c]);
      } else {
        // empty cluster: move it to the row farthest from its centre
        std::size_t far = 0;
        double fd = -1.0;
        for (std::size_t r = 0; r < n; ++r) {
          const double e = sq(r, C, label[r]);
          if (e > fd) {
            fd = e;
            far = r;
          }
        }
        C.row(ci) = X.row(static_cast<Eigen::Index>(far));
      }
    }
  }
  return label;
}

}  // namespace detail

/// Emissions seeded from a spectral clustering of items over the
/// consecutive-item graph: state z starts concentrated on cluster z.
inline HmmModel spectral_initial_model(std::span<const InteractionSequence> corpus, std::size_t h,
                                       std::size_t m, const TrainConfig& cfg) {
  HmmModel model(h, m);
  Rng rng = make_rng(cfg.seed, 0x737065);
  std::vector<double> freq(m, 0.0);
  for (const auto& s : corpus)
    for (auto i : s.items) freq[i] += 1.0;

  Matrix X = detail::transition_graph_embedding(corpus, m, h, rng);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double n = X.row(i).norm();
    if (n > 0.0) X.row(i) /= n;
  }
  const auto label = h > 1 ? detail::kmeans_rows(X, h, rng) : std::vector<std::size_t>(m, 0);

  const double floor = cfg.emission_floor / static_cast<double>(m);
  for (std::size_t z = 0; z < h; ++z) {
    const auto zi = static_cast<Eigen::Index>(z);
    auto noise = sample_dirichlet(rng, h);
    for (std::size_t z2 = 0; z2 < h; ++z2)
      model.trans(zi, static_cast<Eigen::Index>(z2)) = 0.5 / static_cast<double>(h) + 0.5 * noise[z2];
    std::vector<double> cluster(m, 0.0);
    double mass = 0.0;
    for (std::size_t i = 0; i < m; ++i)
      if (label[i] == z) {
        cluster[i] = freq[i];
        mass += freq[i];
      }
    auto emit_noise = sample_dirichlet(rng, m);
    std::vector<double> mix(m);
    for (std::size_t i = 0; i < m; ++i)
      mix[i] = (mass > 0.0 ? 0.5 * cluster[i] / mass : 0.0) + 0.5 * emit_noise[i];
    auto row = detail::floored_normalize(mix, floor);
    for (std::size_t i = 0; i < m; ++i) model.emit(zi, static_cast<Eigen::Index>(i)) = row[i];
  }
  return model;
}

namespace detail {

/// E-step over the corpus. Sequences are reduced in fixed blocks so the
/// summation order does not depend on the thread count.
inline SufficientStats expected_counts(const HmmModel& model,
                                       std::span<const InteractionSequence> corpus,
                                       unsigned threads) {
  constexpr std::size_t kBlock = 64;
  const auto h = static_cast<Eigen::Index>(model.num_states);
  const auto m = static_cast<Eigen::Index>(model.num_items);
  const std::size_t n_blocks = (corpus.size() + kBlock - 1) / kBlock;
  std::vector<SufficientStats> blocks(n_blocks, SufficientStats(h, m));
  parallel_for(n_blocks, threads, [&](std::size_t b) {
    Matrix alpha, beta;
    std::vector<double> scale;
    const std::size_t hi = std::min(corpus.size(), (b + 1) * kBlock);
    for (std::size_t s = b * kBlock; s < hi; ++s)
      accumulate_sequence(model, corpus[s].items, blocks[b], alpha, beta, scale);
  });
  SufficientStats total(h, m);
  for (const auto& b : blocks) total.add(b);
  return total;
}

inline void maximize(HmmModel& model, const SufficientStats& stats, double floor) {
  const auto h = static_cast<Eigen::Index>(model.num_states);
  const auto m = static_cast<std::size_t>(model.num_items);
  if (stats.pi.sum() > 0.0) model.pi = stats.pi / stats.pi.sum();
  for (Eigen::Index z = 0; z < h; ++z) {
    const double row = stats.trans.row(z).sum();
    if (row > 0.0) model.trans.row(z) = stats.trans.row(z) / row;
    if (stats.emit.row(z).sum() > 0.0) {
      std::vector<double> counts(m);
      for (std::size_t i = 0; i < m; ++i) counts[i] = stats.emit(z, static_cast<Eigen::Index>(i));
      auto b = floored_normalize(counts, floor);
      for (std::size_t i = 0; i < m; ++i) model.emit(z, static_cast<Eigen::Index>(i)) = b[i];
    }
  }
}

}  // namespace detail

struct TrainResult {
  HmmModel model;
  /// Corpus log-likelihood of the initial model followed by one entry per EM iteration.
  std::vector<double> log_lik_history;
  int iterations = 0;
  bool converged = false;
  /// Which starting point produced the returned model.
  HmmInit init = HmmInit::frequency;
};

/// EM from an explicit starting model.
inline TrainResult baum_welch_from(HmmModel start, std::span<const InteractionSequence> corpus,
                                   const TrainConfig& cfg) {
  cfg.validate();
  const double floor = cfg.emission_floor / static_cast<double>(start.num_items);
  TrainResult result;
  result.model = std::move(start);
  auto stats = detail::expected_counts(result.model, corpus, cfg.threads);
  result.log_lik_history.push_back(stats.log_lik);
  for (int it = 1; it <= cfg.max_iters; ++it) {
    detail::maximize(result.model, stats, floor);
    stats = detail::expected_counts(result.model, corpus, cfg.threads);
    const double prev = result.log_lik_history.back();
    result.log_lik_history.push_back(stats.log_lik);
    result.iterations = it;
    if (stats.log_lik - prev < cfg.log_lik_tol * std::abs(prev)) {
      result.converged = true;
      break;
    }
  }
  return result;
}

/// Baum-Welch EM for one global model over the whole corpus. num_items = 0
/// infers m from the largest item index.
inline TrainResult baum_welch_fit(std::span<const InteractionSequence> corpus, std::size_t h,
                                  const TrainConfig& cfg, std::size_t num_items = 0) {
  require(!corpus.empty(), "baum_welch_train: empty corpus");
  require(h >= 1, "baum_welch_train: h must be >= 1");
  cfg.validate();
  std::size_t m = num_items;
  if (m == 0)
    for (const auto& s : corpus)
      for (auto i : s.items) m = std::max(m, i + 1);
  for (const auto& s : corpus) s.validate(m);

  if (cfg.init != HmmInit::spectral) {
    auto res = baum_welch_from(initial_model(corpus, h, m, cfg), corpus, cfg);
    res.init = HmmInit::frequency;
    if (cfg.init == HmmInit::frequency || h == 1) return res;
    auto alt = baum_welch_from(spectral_initial_model(corpus, h, m, cfg), corpus, cfg);
    alt.init = HmmInit::spectral;
    return alt.log_lik_history.back() > res.log_lik_history.back() ? alt : res;
  }
  auto res = baum_welch_from(spectral_initial_model(corpus, h, m, cfg), corpus, cfg);
  res.init = HmmInit::spectral;
  return res;
}

inline HmmModel baum_welch_train(std::span<const InteractionSequence> corpus, std::size_t h,
                                 const TrainConfig& cfg, std::size_t num_items = 0) {
  return baum_welch_fit(corpus, h, cfg, num_items).model;
}

inline double corpus_log_likelihood(const HmmModel& model,
                                    std::span<const InteractionSequence> corpus) {
  double ll = 0.0;
  for (const auto& s : corpus) ll += forward_log_likelihood(model, s);
  return ll;
}

// Serialization ---------------------------------------------------------------

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"max_iters", c.max_iters},
          {"log_lik_tol", c.log_lik_tol},
          {"seed", c.seed},
          {"emission_floor", c.emission_floor},
          {"init", init_name(c.init)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.max_iters = j.at("max_iters").get<int>();
  c.log_lik_tol = j.at("log_lik_tol").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.emission_floor = j.at("emission_floor").get<double>();
  if (j.contains("init")) c.init = parse_init(j.at("init").get<std::string>());
  return c;
}

/// Doubles are written in shortest round-trip form, so load(save(x)) == x bitwise.
inline nlohmann::json to_json(const HmmModel& model, const TrainConfig& cfg) {
  const auto h = static_cast<Eigen::Index>(model.num_states);
  const auto m = static_cast<Eigen::Index>(model.num_items);
  nlohmann::json j;
  j["format"] = "hmmrec.hmm";
  j["version"] = 1;
  j["num_states"] = model.num_states;
  j["num_items"] = model.num_items;
  j["pi"] = std::vector<double>(model.pi.data(), model.pi.data() + h);
  auto rows = [](const Matrix& mat, Eigen::Index r, Eigen::Index c) {
    nlohmann::json arr = nlohmann::json::array();
    for (Eigen::Index i = 0; i < r; ++i) {
      std::vector<double> row(static_cast<std::size_t>(c));
      for (Eigen::Index k = 0; k < c; ++k) row[static_cast<std::size_t>(k)] = mat(i, k);
      arr.push_back(std::move(row));
    }
    return arr;
  };
  j["trans"] = rows(model.trans, h, h);
  j["emit"] = rows(model.emit, h, m);
  j["train_config"] = to_json(cfg);
  return j;
}

inline HmmModel hmm_from_json(const nlohmann::json& j, TrainConfig* cfg = nullptr) {
  require(j.value("format", "") == "hmmrec.hmm", "not an hmmrec HMM file");
  HmmModel model(j.at("num_states").get<std::size_t>(), j.at("num_items").get<std::size_t>());
  const auto h = static_cast<Eigen::Index>(model.num_states);
  const auto m = static_cast<Eigen::Index>(model.num_items);
  const auto pi = j.at("pi").get<std::vector<double>>();
  require(pi.size() == model.num_states, "HMM file: pi has wrong length");
  for (Eigen::Index z = 0; z < h; ++z) model.pi(z) = pi[static_cast<std::size_t>(z)];
  auto fill = [](Matrix& mat, const nlohmann::json& arr, Eigen::Index r, Eigen::Index c,
                 const char* name) {
    require(arr.is_array() && static_cast<Eigen::Index>(arr.size()) == r,
            std::string("HMM file: bad row count for ") + name);
    for (Eigen::Index i = 0; i < r; ++i) {
      const auto row = arr[static_cast<std::size_t>(i)].get<std::vector<double>>();
      require(static_cast<Eigen::Index>(row.size()) == c,
              std::string("HMM file: bad column count for ") + name);
      for (Eigen::Index k = 0; k < c; ++k) mat(i, k) = row[static_cast<std::size_t>(k)];
    }
  };
  fill(model.trans, j.at("trans"), h, h, "trans");
  fill(model.emit, j.at("emit"), h, m, "emit");
  model.validate();
  if (cfg && j.contains("train_config")) *cfg = train_config_from_json(j.at("train_config"));
  return model;
}

inline void save_model(const std::string& path, const HmmModel& model, const TrainConfig& cfg,
                       const nlohmann::json& extra = nlohmann::json::object()) {
  auto j = to_json(model, cfg);
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write " + path);
  out << j.dump(1) << '\n';
}

inline HmmModel load_model(const std::string& path, TrainConfig* cfg = nullptr) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "missing model file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("cannot parse " + path + ": " + e.what());
  }
  return hmm_from_json(j, cfg);
}

}  // namespace hmmrec
