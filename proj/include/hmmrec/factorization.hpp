#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "hmmrec/common.hpp"
#include "hmmrec/incidence.hpp"

namespace hmmrec {

/// M ~= p q^T with p: rows x d, q: items x d.
struct FactorPair {
  Matrix p;
  Matrix q;
  std::size_t d = 0;

  double score(std::size_t row, ItemId item) const {
    return p.row(static_cast<Eigen::Index>(row)).dot(q.row(static_cast<Eigen::Index>(item)));
  }
};

struct FactorizationConfig {
  std::size_t d = 40;
  /// NMF sweeps or BPR epochs.
  int max_iters = 200;
  std::uint64_t seed = 0;
  double learning_rate = 0.05;
  double regularization = 0.01;
  double convergence_tol = 1e-5;

  static FactorizationConfig nmf_defaults() { return {}; }
  static FactorizationConfig bpr_defaults() {
    FactorizationConfig c;
    c.max_iters = 100;
    return c;
  }

  void validate() const {
    require(d >= 1, "FactorizationConfig: d must be >= 1");
    require(max_iters >= 1, "FactorizationConfig: max_iters must be >= 1");
    require(convergence_tol >= 0.0, "FactorizationConfig: convergence_tol must be >= 0");
  }
};

// NMF ----------------------------------------------------------------------

struct NmfResult {
  FactorPair factors;
  /// ||M - p q^T||_F^2 at initialization and after every sweep.
  std::vector<double> objective_history;
  int iterations = 0;
};

inline constexpr double kNmfEpsilon = 1e-12;

/// ||M||^2 - 2 tr(p^T M q) + tr((p^T p)(q^T q)); never forms p q^T.
inline double nmf_objective(const SparseMatrix& M, const Matrix& p, const Matrix& q) {
  const double m2 = M.squaredNorm();
  const Matrix Mq = M * q;
  const double cross = p.cwiseProduct(Mq).sum();
  const Matrix ptp = p.transpose() * p;
  const Matrix qtq = q.transpose() * q;
  return m2 - 2.0 * cross + ptp.cwiseProduct(qtq).sum();
}

/// Lee-Seung multiplicative updates for the Frobenius objective.
inline NmfResult nmf_fit(const SparseMatrix& M, const FactorizationConfig& cfg) {
  cfg.validate();
  require(M.rows() > 0 && M.cols() > 0, "nmf_fit: empty matrix");
  const double total = M.sum();
  require(M.nonZeros() > 0 && total != 0.0, "nmf_fit: all-zero matrix");
  for (Eigen::Index k = 0; k < M.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(M, k); it; ++it)
      require(it.value() >= 0.0, "nmf_fit: matrix has negative entries");

  const auto n = M.rows();
  const auto m = M.cols();
  const auto d = static_cast<Eigen::Index>(cfg.d);
  const double mean = total / (static_cast<double>(n) * static_cast<double>(m));
  const double scale = std::sqrt(mean / static_cast<double>(cfg.d));

  Rng rng = make_rng(cfg.seed, 0x6e6d66);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  NmfResult res;
  auto& p = res.factors.p;
  auto& q = res.factors.q;
  res.factors.d = cfg.d;
  p.resize(n, d);
  q.resize(m, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < d; ++k) p(i, k) = scale * unif(rng);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index k = 0; k < d; ++k) q(i, k) = scale * unif(rng);

  const SparseMatrix Mt = M.transpose();
  res.objective_history.push_back(nmf_objective(M, p, q));
  for (int it = 1; it <= cfg.max_iters; ++it) {
    {
      const Matrix num = M * q;
      const Matrix den = p * (q.transpose() * q);
      p = p.cwiseProduct(num).cwiseQuotient(den.cwiseMax(kNmfEpsilon));
    }
    {
      const Matrix num = Mt * p;
      const Matrix den = q * (p.transpose() * p);
      q = q.cwiseProduct(num).cwiseQuotient(den.cwiseMax(kNmfEpsilon));
    }
    const double prev = res.objective_history.back();
    const double cur = nmf_objective(M, p, q);
    res.objective_history.push_back(cur);
    res.iterations = it;
    if (prev - cur < cfg.convergence_tol * std::abs(prev)) break;
  }
  return res;
}

inline NmfResult nmf_fit(const IncidenceMatrix& M, const FactorizationConfig& cfg) {
  return nmf_fit(M.to_sparse(), cfg);
}

inline NmfResult nmf_fit(const Matrix& M, const FactorizationConfig& cfg) {
  return nmf_fit(SparseMatrix(M.sparseView()), cfg);
}

// BPR-MF -------------------------------------------------------------------

/// Per-triple BPR loss: -ln sigma(p.(qi - qj)) + reg/2 (|p|^2 + |qi|^2 + |qj|^2).
inline double bpr_triple_loss(const Vector& pu, const Vector& qi, const Vector& qj, double reg) {
  const double x = pu.dot(qi - qj);
  // -ln sigma(x) = ln(1 + e^{-x}), evaluated stably
  const double nll = x > 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
  return nll + 0.5 * reg * (pu.squaredNorm() + qi.squaredNorm() + qj.squaredNorm());
}

struct BprGradient {
  Vector pu, qi, qj;
};

inline BprGradient bpr_triple_gradient(const Vector& pu, const Vector& qi, const Vector& qj,
                                       double reg) {
  const double x = pu.dot(qi - qj);
  const double g = 1.0 / (1.0 + std::exp(x));  // sigma(-x)
  return {-g * (qi - qj) + reg * pu, -g * pu + reg * qi, g * pu + reg * qj};
}

struct BprResult {
  FactorPair factors;
  std::size_t skipped_users = 0;
  int epochs = 0;
};

using BprEpochObserver = std::function<void(int epoch, const FactorPair&)>;

/// SGD on uniformly sampled (user, positive, negative) triples. Rows that are
/// all-positive or all-negative are skipped and counted.
inline BprResult bpr_fit(const IncidenceMatrix& M, const FactorizationConfig& cfg,
                         const BprEpochObserver& observer = {}) {
  cfg.validate();
  require(M.num_rows() > 0 && M.cols > 0, "bpr_fit: empty matrix");
  const auto n = static_cast<Eigen::Index>(M.num_rows());
  const auto m = static_cast<Eigen::Index>(M.cols);
  const auto d = static_cast<Eigen::Index>(cfg.d);

  BprResult res;
  auto& f = res.factors;
  f.d = cfg.d;
  Rng rng = make_rng(cfg.seed, 0x627072);
  std::normal_distribution<double> init(0.0, 0.1);
  f.p.resize(n, d);
  f.q.resize(m, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < d; ++k) f.p(i, k) = init(rng);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index k = 0; k < d; ++k) f.q(i, k) = init(rng);

  std::vector<std::pair<std::size_t, ItemId>> positives;
  for (std::size_t u = 0; u < M.num_rows(); ++u) {
    const auto& row = M.rows[u];
    if (row.empty() || row.size() >= M.cols) {
      ++res.skipped_users;
      continue;
    }
    for (auto i : row) positives.emplace_back(u, i);
  }
  if (positives.empty()) return res;

  std::uniform_int_distribution<std::size_t> pick_pair(0, positives.size() - 1);
  std::uniform_int_distribution<ItemId> pick_item(0, M.cols - 1);
  Vector pu(d), qi(d), qj(d);
  for (int epoch = 1; epoch <= cfg.max_iters; ++epoch) {
    for (std::size_t s = 0; s < positives.size(); ++s) {
      const auto [u, i] = positives[pick_pair(rng)];
      ItemId j;
      do {
        j = pick_item(rng);
      } while (M.contains(u, j));
      const auto ui = static_cast<Eigen::Index>(u);
      const auto ii = static_cast<Eigen::Index>(i);
      const auto ji = static_cast<Eigen::Index>(j);
      pu = f.p.row(ui).transpose();
      qi = f.q.row(ii).transpose();
      qj = f.q.row(ji).transpose();
      const auto g = bpr_triple_gradient(pu, qi, qj, cfg.regularization);
      f.p.row(ui) -= cfg.learning_rate * g.pu.transpose();
      f.q.row(ii) -= cfg.learning_rate * g.qi.transpose();
      f.q.row(ji) -= cfg.learning_rate * g.qj.transpose();
    }
    res.epochs = epoch;
    if (observer) observer(epoch, f);
  }
  return res;
}

/// Mean per-row AUC over every (positive, negative) pair; rows without both are ignored.
inline double training_auc(const FactorPair& f, const IncidenceMatrix& M) {
  double total = 0.0;
  std::size_t users = 0;
  for (std::size_t u = 0; u < M.num_rows(); ++u) {
    const auto& row = M.rows[u];
    if (row.empty() || row.size() >= M.cols) continue;
    std::vector<double> neg;
    for (ItemId j = 0; j < M.cols; ++j)
      if (!M.contains(u, j)) neg.push_back(f.score(u, j));
    double correct = 0.0;
    for (auto i : row) {
      const double si = f.score(u, i);
      for (double sj : neg) correct += si > sj ? 1.0 : (si == sj ? 0.5 : 0.0);
    }
    total += correct / (static_cast<double>(row.size()) * static_cast<double>(neg.size()));
    ++users;
  }
  return users ? total / static_cast<double>(users) : 0.0;
}

// Serialization ------------------------------------------------------------

inline nlohmann::json matrix_to_json(const Matrix& mat) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < mat.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(mat.cols()));
    for (Eigen::Index k = 0; k < mat.cols(); ++k) row[static_cast<std::size_t>(k)] = mat(i, k);
    arr.push_back(std::move(row));
  }
  return arr;
}

inline Matrix matrix_from_json(const nlohmann::json& arr, std::size_t cols, const char* name) {
  require(arr.is_array(), std::string("factor file: ") + name + " is not an array");
  Matrix mat(static_cast<Eigen::Index>(arr.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto row = arr[i].get<std::vector<double>>();
    require(row.size() == cols, std::string("factor file: bad row width in ") + name);
    for (std::size_t k = 0; k < cols; ++k)
      mat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = row[k];
  }
  return mat;
}

inline void save_factors(const std::string& path, const FactorPair& f, const std::string& source,
                         const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j;
  j["format"] = "hmmrec.factors";
  j["version"] = 1;
  j["source"] = source;
  j["d"] = f.d;
  j["rows"] = f.p.rows();
  j["items"] = f.q.rows();
  j["p"] = matrix_to_json(f.p);
  j["q"] = matrix_to_json(f.q);
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write " + path);
  out << j.dump() << '\n';
}

inline FactorPair load_factors(const std::string& path, std::string* source = nullptr) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "missing factor file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("cannot parse " + path + ": " + e.what());
  }
  require(j.value("format", "") == "hmmrec.factors", path + " is not an hmmrec factor file");
  FactorPair f;
  f.d = j.at("d").get<std::size_t>();
  f.p = matrix_from_json(j.at("p"), f.d, "p");
  f.q = matrix_from_json(j.at("q"), f.d, "q");
  require(f.p.rows() == j.at("rows").get<Eigen::Index>() && f.q.rows() == j.at("items").get<Eigen::Index>(),
          "factor file: shape header mismatch");
  if (source) *source = j.value("source", "");
  return f;
}

}  // namespace hmmrec
