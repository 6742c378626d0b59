#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "hmmrec/changepoint.hpp"
#include "hmmrec/common.hpp"
#include "hmmrec/dataset.hpp"
#include "hmmrec/eval.hpp"
#include "hmmrec/factorization.hpp"
#include "hmmrec/hmm.hpp"
#include "hmmrec/recommend.hpp"

namespace hmmrec {

/// Every field is a key of the JSON config file.
struct ExperimentConfig {
  std::string corpus_path;
  std::size_t min_len = 1;
  std::size_t sample_size = 6000;
  std::uint64_t seed = 42;
  std::vector<std::size_t> hidden_state_counts{2, 10};
  std::size_t k = 1;
  std::size_t latent_factors = 40;
  std::size_t neighbor_size = 10;
  std::size_t holdout_size = 10;
  std::vector<std::size_t> n_grid{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<std::string> methods;  // empty = every method
  std::string output_dir = "out";
  std::size_t benchmark_size = 1000;
  std::size_t min_window = 10;
  bool cross_group = false;
  int hmm_max_iters = 100;
  double hmm_tol = 1e-5;
  double emission_floor = 1e-6;
  std::string hmm_init = "best";
  int nmf_max_iters = 200;
  double nmf_tol = 1e-5;
  int bpr_epochs = 100;
  double bpr_learning_rate = 0.05;
  double bpr_regularization = 0.01;
  unsigned threads = 1;
};

class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

namespace detail {

template <typename T>
T config_field(const nlohmann::json& j, const std::string& key, const char* expected) {
  const auto& v = j.at(key);
  auto bad = [&] { return ConfigError("config field '" + key + "': expected " + expected); };
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw bad();
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!v.is_number_unsigned()) throw bad();
  } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
    if (!v.is_array()) throw bad();
    for (const auto& e : v)
      if (!e.is_number_unsigned()) throw bad();
  } else if constexpr (std::is_same_v<T, int>) {
    if (!v.is_number_integer()) throw bad();
  } else if constexpr (std::is_same_v<T, double>) {
    if (!v.is_number()) throw bad();
  }
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field '" + key + "': expected " + expected);
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"corpus_path", c.corpus_path},
          {"min_len", c.min_len},
          {"sample_size", c.sample_size},
          {"seed", c.seed},
          {"hidden_state_counts", c.hidden_state_counts},
          {"k", c.k},
          {"latent_factors", c.latent_factors},
          {"neighbor_size", c.neighbor_size},
          {"holdout_size", c.holdout_size},
          {"n_grid", c.n_grid},
          {"methods", c.methods},
          {"output_dir", c.output_dir},
          {"benchmark_size", c.benchmark_size},
          {"min_window", c.min_window},
          {"cross_group", c.cross_group},
          {"hmm_max_iters", c.hmm_max_iters},
          {"hmm_tol", c.hmm_tol},
          {"emission_floor", c.emission_floor},
          {"hmm_init", c.hmm_init},
          {"nmf_max_iters", c.nmf_max_iters},
          {"nmf_tol", c.nmf_tol},
          {"bpr_epochs", c.bpr_epochs},
          {"bpr_learning_rate", c.bpr_learning_rate},
          {"bpr_regularization", c.bpr_regularization},
          {"threads", c.threads}};
}

inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("config field '" + field + "': " + why);
  };
  if (c.hidden_state_counts.empty()) fail("hidden_state_counts", "must not be empty");
  for (auto h : c.hidden_state_counts)
    if (h < 1) fail("hidden_state_counts", "every entry must be >= 1");
  if (c.k < 1) fail("k", "must be >= 1");
  if (c.latent_factors < 1) fail("latent_factors", "must be >= 1");
  if (c.neighbor_size < 1) fail("neighbor_size", "must be >= 1");
  if (c.holdout_size < 1) fail("holdout_size", "must be >= 1");
  if (c.n_grid.empty()) fail("n_grid", "must not be empty");
  for (std::size_t i = 0; i < c.n_grid.size(); ++i)
    if (c.n_grid[i] < 1 || (i > 0 && c.n_grid[i] <= c.n_grid[i - 1])) fail("n_grid", "must be ascending positive integers");
  if (c.benchmark_size < 1) fail("benchmark_size", "must be >= 1");
  if (c.min_window < 1) fail("min_window", "must be >= 1");
  if (c.hmm_max_iters < 1) fail("hmm_max_iters", "must be >= 1");
  if (c.hmm_tol < 0) fail("hmm_tol", "must be >= 0");
  if (c.emission_floor <= 0) fail("emission_floor", "must be > 0");
  if (c.hmm_init != "best" && c.hmm_init != "frequency" && c.hmm_init != "spectral")
    fail("hmm_init", "must be one of best, frequency, spectral");
  if (c.nmf_max_iters < 1) fail("nmf_max_iters", "must be >= 1");
  if (c.nmf_tol < 0) fail("nmf_tol", "must be >= 0");
  if (c.bpr_epochs < 1) fail("bpr_epochs", "must be >= 1");
  if (c.output_dir.empty()) fail("output_dir", "must not be empty");
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::config_field;
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  ExperimentConfig c;
  const auto known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError("config: unknown field '" + it.key() + "'");
  auto has = [&](const char* k) { return j.contains(k); };
  if (has("corpus_path")) c.corpus_path = config_field<std::string>(j, "corpus_path", "string");
  if (has("min_len")) c.min_len = config_field<std::size_t>(j, "min_len", "non-negative integer");
  if (has("sample_size")) c.sample_size = config_field<std::size_t>(j, "sample_size", "non-negative integer");
  if (has("seed")) c.seed = config_field<std::uint64_t>(j, "seed", "non-negative integer");
  if (has("hidden_state_counts"))
    c.hidden_state_counts = config_field<std::vector<std::size_t>>(j, "hidden_state_counts", "list of positive integers");
  if (has("k")) c.k = config_field<std::size_t>(j, "k", "positive integer");
  if (has("latent_factors")) c.latent_factors = config_field<std::size_t>(j, "latent_factors", "positive integer");
  if (has("neighbor_size")) c.neighbor_size = config_field<std::size_t>(j, "neighbor_size", "positive integer");
  if (has("holdout_size")) c.holdout_size = config_field<std::size_t>(j, "holdout_size", "positive integer");
  if (has("n_grid")) c.n_grid = config_field<std::vector<std::size_t>>(j, "n_grid", "list of positive integers");
  if (has("methods")) c.methods = config_field<std::vector<std::string>>(j, "methods", "list of method names");
  if (has("output_dir")) c.output_dir = config_field<std::string>(j, "output_dir", "string");
  if (has("benchmark_size")) c.benchmark_size = config_field<std::size_t>(j, "benchmark_size", "positive integer");
  if (has("min_window")) c.min_window = config_field<std::size_t>(j, "min_window", "positive integer");
  if (has("cross_group")) c.cross_group = config_field<bool>(j, "cross_group", "boolean");
  if (has("hmm_max_iters")) c.hmm_max_iters = config_field<int>(j, "hmm_max_iters", "positive integer");
  if (has("hmm_tol")) c.hmm_tol = config_field<double>(j, "hmm_tol", "number");
  if (has("emission_floor")) c.emission_floor = config_field<double>(j, "emission_floor", "number");
  if (has("hmm_init")) c.hmm_init = config_field<std::string>(j, "hmm_init", "string");
  if (has("nmf_max_iters")) c.nmf_max_iters = config_field<int>(j, "nmf_max_iters", "positive integer");
  if (has("nmf_tol")) c.nmf_tol = config_field<double>(j, "nmf_tol", "number");
  if (has("bpr_epochs")) c.bpr_epochs = config_field<int>(j, "bpr_epochs", "positive integer");
  if (has("bpr_learning_rate")) c.bpr_learning_rate = config_field<double>(j, "bpr_learning_rate", "number");
  if (has("bpr_regularization")) c.bpr_regularization = config_field<double>(j, "bpr_regularization", "number");
  if (has("threads")) c.threads = config_field<unsigned>(j, "threads", "non-negative integer");
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  return config_from_json(j);
}

/// Fingerprint of the fields that determine results (output_dir and threads excluded).
inline std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("output_dir");
  j.erase("threads");
  return hex64(fnv1a(j.dump()));
}

// Method plan -----------------------------------------------------------------

struct MethodPlan {
  std::vector<std::size_t> hmm_states;           // models to train
  std::vector<std::string> detectors;            // HMCD-S<h>, CUSUM, SW, RP
  std::vector<std::string> recommenders;         // SMF-S<h>, HMMR-S<h>, <CPD>-NMF, NMF, BPR-MF, PopRank
};

inline std::string hmcd_name(std::size_t h) { return "HMCD-S" + std::to_string(h); }
inline std::string smf_name(std::size_t h) { return "SMF-S" + std::to_string(h); }
inline std::string hmmr_name(std::size_t h) { return "HMMR-S" + std::to_string(h); }

inline std::vector<std::string> default_methods(const ExperimentConfig& c) {
  std::vector<std::string> m;
  for (auto h : c.hidden_state_counts) m.push_back(hmcd_name(h));
  for (const char* b : {"CUSUM", "SW", "RP"}) m.push_back(b);
  for (auto h : c.hidden_state_counts) m.push_back(smf_name(h));
  for (auto h : c.hidden_state_counts) m.push_back(hmmr_name(h));
  for (const char* b : {"CUSUM-NMF", "SW-NMF", "RP-NMF", "NMF", "BPR-MF", "PopRank"}) m.push_back(b);
  return m;
}

/// Resolves the method list and pulls in upstream dependencies
/// (SMF-S<h> needs HMCD-S<h>, CUSUM-NMF needs CUSUM, ...).
inline MethodPlan plan_methods(const ExperimentConfig& c) {
  const auto requested = c.methods.empty() ? default_methods(c) : c.methods;
  std::set<std::size_t> states;
  std::set<std::string> det, rec;
  auto parse_h = [&](const std::string& name, const std::string& prefix) -> std::size_t {
    const auto tail = name.substr(prefix.size());
    std::size_t h = 0;
    try {
      std::size_t pos = 0;
      h = std::stoul(tail, &pos);
      if (pos != tail.size()) throw std::invalid_argument(tail);
    } catch (const std::exception&) {
      throw ConfigError("config field 'methods': bad method name '" + name + "'");
    }
    if (std::find(c.hidden_state_counts.begin(), c.hidden_state_counts.end(), h) == c.hidden_state_counts.end())
      throw ConfigError("config field 'methods': " + name + " needs " + std::to_string(h) +
                        " in hidden_state_counts");
    return h;
  };
  for (const auto& name : requested) {
    if (name.rfind("HMCD-S", 0) == 0) {
      states.insert(parse_h(name, "HMCD-S"));
      det.insert(name);
    } else if (name.rfind("SMF-S", 0) == 0) {
      const auto h = parse_h(name, "SMF-S");
      states.insert(h);
      det.insert(hmcd_name(h));
      rec.insert(name);
    } else if (name.rfind("HMMR-S", 0) == 0) {
      const auto h = parse_h(name, "HMMR-S");
      states.insert(h);
      det.insert(hmcd_name(h));
      rec.insert(name);
    } else if (name == "CUSUM" || name == "SW" || name == "RP") {
      det.insert(name);
    } else if (name == "CUSUM-NMF" || name == "SW-NMF" || name == "RP-NMF") {
      det.insert(name.substr(0, name.size() - 4));
      rec.insert(name);
    } else if (name == "NMF" || name == "BPR-MF" || name == "PopRank") {
      rec.insert(name);
    } else {
      throw ConfigError("config field 'methods': unknown method '" + name + "'");
    }
  }
  // stable, documented ordering: follow default_methods
  MethodPlan plan;
  plan.hmm_states.assign(states.begin(), states.end());
  for (const auto& name : default_methods(c)) {
    if (det.count(name)) plan.detectors.push_back(name);
    if (rec.count(name)) plan.recommenders.push_back(name);
  }
  return plan;
}

// Paths and small formatting helpers -----------------------------------------

struct Layout {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.resolved.json"; }
  std::filesystem::path benchmark() const { return root / "benchmark.tsv"; }
  std::filesystem::path vocab() const { return root / "vocab.tsv"; }
  std::filesystem::path corpus_stats() const { return root / "corpus_stats.json"; }
  std::filesystem::path model(std::size_t h) const { return root / "models" / ("hmm_s" + std::to_string(h) + ".json"); }
  std::filesystem::path detection(const std::string& m) const { return root / "detect" / (m + ".tsv"); }
  std::filesystem::path factors(const std::string& m) const { return root / "factors" / (m + ".json"); }
  std::filesystem::path recs(const std::string& m) const { return root / "recs" / (m + ".tsv"); }
  std::filesystem::path report(const std::string& f) const { return root / "report" / f; }
};

namespace detail {

inline std::string fmt(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

inline void require_file(const std::filesystem::path& p, const std::string& stage) {
  if (!std::filesystem::exists(p))
    throw InputError("missing artifact " + p.string() + " (run '" + stage + "' first)");
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write " + p.string());
  return out;
}

inline std::string header(const std::string& kind, const ExperimentConfig& c) {
  return "# hmmrec-" + kind + " v1\n# seed=" + std::to_string(c.seed) + "\n# config_hash=" + config_hash(c) + "\n";
}

}  // namespace detail

// Report I/O --------------------------------------------------------------------

inline void write_detections(std::ostream& out, const std::string& method, const ExperimentConfig& c,
                             const std::vector<DetectionRecord>& recs) {
  out << detail::header("cpd", c) << "# method=" << method << '\n';
  out << "method\tuser_id\tT\ttruth\tpredicted\tscores\tflag\n";
  for (const auto& r : recs) {
    out << r.method << '\t' << r.user_id << '\t' << r.length << '\t' << (r.truth ? std::to_string(*r.truth) : "-")
        << '\t';
    if (r.predicted.empty()) out << '-';
    for (std::size_t i = 0; i < r.predicted.size(); ++i) out << (i ? "," : "") << r.predicted[i];
    out << '\t';
    if (r.scores.empty()) out << '-';
    for (std::size_t i = 0; i < r.scores.size(); ++i) out << (i ? "," : "") << detail::fmt(r.scores[i]);
    out << '\t' << (r.flagged ? 1 : 0) << '\n';
  }
}

inline std::vector<DetectionRecord> read_detections(std::istream& in) {
  std::vector<DetectionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  auto split_list = [&](const std::string& s, auto conv) {
    using T = decltype(conv(std::string()));
    std::vector<T> v;
    if (s == "-") return v;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) v.push_back(conv(tok));
    return v;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    const auto cols = detail::split_tabs(line);
    if (cols.size() != 7) throw ParseError("change-point report: expected 7 columns", lineno);
    try {
      DetectionRecord r;
      r.method = cols[0];
      r.user_id = cols[1];
      r.length = std::stoull(cols[2]);
      if (cols[3] != "-") r.truth = std::stoull(cols[3]);
      r.predicted = split_list(cols[4], [](const std::string& t) { return static_cast<std::size_t>(std::stoull(t)); });
      r.scores = split_list(cols[5], [](const std::string& t) { return std::stod(t); });
      r.flagged = cols[6] == "1";
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw ParseError("change-point report: bad numeric field", lineno);
    }
  }
  return out;
}

inline void write_recommendations(std::ostream& out, const std::string& method, const ExperimentConfig& c,
                                  const std::vector<Recommendation>& recs) {
  std::size_t fallback = 0;
  for (const auto& r : recs) fallback += r.fell_back ? 1 : 0;
  out << detail::header("recs", c) << "# method=" << method << "\n# fallback_users=" << fallback << '\n';
  out << "user_id\trank\titem_id\tscore\n";
  for (const auto& r : recs)
    for (std::size_t k = 0; k < r.ranked_items.size(); ++k)
      out << r.user_id << '\t' << (k + 1) << '\t' << r.ranked_items[k] << '\t' << detail::fmt(r.scores[k]) << '\n';
}

/// user_id -> ranked items, in file order.
inline std::map<std::string, std::vector<ItemId>> read_recommendations(std::istream& in) {
  std::map<std::string, std::vector<ItemId>> out;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    const auto cols = detail::split_tabs(line);
    if (cols.size() != 4) throw ParseError("recommendation file: expected 4 columns", lineno);
    try {
      auto& list = out[cols[0]];
      const auto rank = std::stoull(cols[1]);
      if (rank != list.size() + 1) throw ParseError("recommendation file: ranks out of order", lineno);
      list.push_back(static_cast<ItemId>(std::stoull(cols[2])));
    } catch (const std::logic_error&) {
      throw ParseError("recommendation file: bad numeric field", lineno);
    }
  }
  return out;
}

// Stages ------------------------------------------------------------------------

namespace detail {

inline Benchmark load_benchmark(const Layout& L) {
  require_file(L.benchmark(), "synthesize");
  std::ifstream in(L.benchmark());
  return read_benchmark(in);
}

inline std::vector<InteractionSequence> observed_sequences(const Benchmark& b) {
  return to_interaction_sequences(b.sequences).sequences;
}

inline std::vector<DetectionRecord> load_detections(const Layout& L, const std::string& method) {
  require_file(L.detection(method), "detect");
  std::ifstream in(L.detection(method));
  return read_detections(in);
}

inline IncidenceMatrix user_matrix(const std::vector<InteractionSequence>& seqs, std::size_t m) {
  IncidenceMatrix M(m);
  for (const auto& s : seqs) M.add_row(s.items);
  return M;
}

inline void write_resolved_config(const ExperimentConfig& c) {
  auto out = open_out(Layout{c.output_dir}.config());
  auto j = to_json(c);
  j["config_hash"] = config_hash(c);
  out << j.dump(1) << '\n';
}

inline void log(std::ostream* os, const std::string& msg) {
  if (os) *os << msg << '\n';
}

}  // namespace detail

inline void cmd_synthesize(const ExperimentConfig& c, std::ostream* log = nullptr) {
  validate(c);
  if (c.corpus_path.empty()) throw ConfigError("config field 'corpus_path': required for synthesize");
  const Layout L{c.output_dir};
  auto corpus = load_corpus(c.corpus_path, c.min_len, c.sample_size, c.seed);
  for (const auto& w : corpus.warnings) detail::log(log, "warning: " + w);
  MixOptions mo;
  mo.count = c.benchmark_size;
  mo.seed = c.seed;
  mo.min_window = c.min_window;
  mo.holdout_size = c.holdout_size;
  mo.cross_group = c.cross_group;
  Benchmark b;
  b.seed = c.seed;
  b.num_items = corpus.num_items();
  b.min_window = c.min_window;
  b.holdout_size = c.holdout_size;
  b.config_hash = config_hash(c);
  b.sequences = synthesize_mixed(corpus, mo);
  {
    auto out = detail::open_out(L.benchmark());
    write_benchmark(out, b);
  }
  {
    auto out = detail::open_out(L.vocab());
    out << "# seed=" << c.seed << "\n# config_hash=" << config_hash(c) << "\nindex\tkey\n";
    for (std::size_t i = 0; i < corpus.vocab.size(); ++i) out << i << '\t' << corpus.vocab[i] << '\n';
  }
  {
    auto out = detail::open_out(L.corpus_stats());
    nlohmann::json j{{"playlists", corpus.stats.playlists}, {"items", corpus.stats.items},
                     {"tokens", corpus.stats.tokens},       {"pairs", corpus.stats.pairs},
                     {"sparsity", corpus.stats.sparsity},   {"mean_length", corpus.stats.mean_length},
                     {"seed", c.seed},                      {"config_hash", config_hash(c)}};
    out << j.dump(1) << '\n';
  }
  detail::write_resolved_config(c);
  detail::log(log, "synthesize: " + std::to_string(b.sequences.size()) + " mixed sequences over " +
                       std::to_string(b.num_items) + " items from " + std::to_string(corpus.stats.playlists) +
                       " playlists");
}

inline void cmd_train(const ExperimentConfig& c, std::ostream* log = nullptr) {
  validate(c);
  detail::write_resolved_config(c);
  const Layout L{c.output_dir};
  const auto b = detail::load_benchmark(L);
  const auto seqs = detail::observed_sequences(b);
  for (auto h : plan_methods(c).hmm_states) {
    TrainConfig tc;
    tc.max_iters = c.hmm_max_iters;
    tc.log_lik_tol = c.hmm_tol;
    tc.emission_floor = c.emission_floor;
    tc.init = parse_init(c.hmm_init);
    tc.seed = c.seed + 1000003ULL * h;
    tc.threads = c.threads;
    const auto res = baum_welch_fit(seqs, h, tc, b.num_items);
    std::filesystem::create_directories(L.model(h).parent_path());
    save_model(L.model(h).string(), res.model, tc,
               {{"seed", c.seed},
                {"config_hash", config_hash(c)},
                {"iterations", res.iterations},
                {"converged", res.converged},
                {"init_used", init_name(res.init)},
                {"log_lik_history", res.log_lik_history}});
    detail::log(log, "train: S" + std::to_string(h) + " after " + std::to_string(res.iterations) +
                         " iterations from the " + init_name(res.init) + " start, log-likelihood " + detail::fmt(res.log_lik_history.back(), "%.4f"));
  }
}

inline void cmd_detect(const ExperimentConfig& c, std::ostream* log = nullptr) {
  validate(c);
  detail::write_resolved_config(c);
  const Layout L{c.output_dir};
  const auto b = detail::load_benchmark(L);
  const auto seqs = detail::observed_sequences(b);
  const auto plan = plan_methods(c);
  for (const auto& method : plan.detectors) {
    std::vector<DetectionRecord> recs(seqs.size());
    if (method.rfind("HMCD-S", 0) == 0) {
      const std::size_t h = std::stoul(method.substr(6));
      detail::require_file(L.model(h), "train");
      const auto model = load_model(L.model(h).string());
      parallel_for(seqs.size(), c.threads,
                   [&](std::size_t u) { recs[u] = to_record(method, seqs[u], hmcd_detect(model, seqs[u], c.k)); });
    } else if (method == "CUSUM") {
      const double tau = tune_cusum_threshold(seqs);
      detail::log(log, "detect: CUSUM threshold " + detail::fmt(tau, "%.3f"));
      for (std::size_t u = 0; u < seqs.size(); ++u) {
        const auto r = cusum_detect(seqs[u].items, tau);
        recs[u] = {method, seqs[u].user_id, seqs[u].size(), seqs[u].truth_change, {r.index}, {}, !r.crossed};
      }
    } else if (method == "SW") {
      const ItemGram gram(cooccurrence_item_vectors(seqs, b.num_items));
      parallel_for(seqs.size(), c.threads, [&](std::size_t u) {
        const auto& s = seqs[u];
        if (s.size() < 2) {
          recs[u] = {method, s.user_id, s.size(), s.truth_change, {}, {}, true};
          return;
        }
        const auto r = sliding_window_detect(s.items, gram);
        recs[u] = {method, s.user_id, s.size(), s.truth_change, {r.index}, {}, r.degenerate};
      });
    } else if (method == "RP") {
      for (std::size_t u = 0; u < seqs.size(); ++u)
        recs[u] = {method, seqs[u].user_id, seqs[u].size(), seqs[u].truth_change,
                   {random_partition(seqs[u].size(), c.seed, u)}, {}, false};
    }
    auto out = detail::open_out(L.detection(method));
    write_detections(out, method, c, recs);
    std::size_t flagged = 0;
    for (const auto& r : recs) flagged += r.flagged ? 1 : 0;
    detail::log(log, "detect: " + method + " (" + std::to_string(flagged) + " flagged)");
  }
}

namespace detail {

/// Detector feeding a segmented recommender, or "" for static methods.
inline std::string segmentation_source(const std::string& rec) {
  if (rec.rfind("SMF-S", 0) == 0) return hmcd_name(std::stoul(rec.substr(5)));
  if (rec.rfind("HMMR-S", 0) == 0) return hmcd_name(std::stoul(rec.substr(6)));
  if (rec == "CUSUM-NMF" || rec == "SW-NMF" || rec == "RP-NMF") return rec.substr(0, rec.size() - 4);
  return "";
}

inline std::vector<UserHistory> segment_users(const std::vector<InteractionSequence>& seqs,
                                              const std::vector<DetectionRecord>& recs, std::size_t k) {
  require(recs.size() == seqs.size(), "change-point report does not match the benchmark");
  std::vector<UserHistory> out;
  out.reserve(seqs.size());
  for (std::size_t u = 0; u < seqs.size(); ++u) {
    require(recs[u].user_id == seqs[u].user_id, "change-point report user order differs from the benchmark");
    out.push_back({seqs[u].user_id, partition_padded(seqs[u].items, recs[u].predicted, k)});
  }
  return out;
}

inline std::vector<UserHistory> unsegmented_users(const std::vector<InteractionSequence>& seqs) {
  std::vector<UserHistory> out;
  for (const auto& s : seqs) out.push_back({s.user_id, {s.items}});
  return out;
}

}  // namespace detail

inline void cmd_fit(const ExperimentConfig& c, std::ostream* log = nullptr) {
  validate(c);
  detail::write_resolved_config(c);
  const Layout L{c.output_dir};
  const auto b = detail::load_benchmark(L);
  const auto seqs = detail::observed_sequences(b);
  const auto plan = plan_methods(c);
  const nlohmann::json extra{{"seed", c.seed}, {"config_hash", config_hash(c)}};
  std::filesystem::create_directories(L.factors("x").parent_path());

  FactorizationConfig nmf = FactorizationConfig::nmf_defaults();
  nmf.d = c.latent_factors;
  nmf.max_iters = c.nmf_max_iters;
  nmf.convergence_tol = c.nmf_tol;
  nmf.seed = c.seed + 17;
  for (const auto& rec : plan.recommenders) {
    if (rec.rfind("HMMR-S", 0) == 0 || rec == "PopRank") continue;
    if (rec == "BPR-MF") {
      FactorizationConfig bpr = FactorizationConfig::bpr_defaults();
      bpr.d = c.latent_factors;
      bpr.max_iters = c.bpr_epochs;
      bpr.learning_rate = c.bpr_learning_rate;
      bpr.regularization = c.bpr_regularization;
      bpr.seed = c.seed + 29;
      const auto res = bpr_fit(detail::user_matrix(seqs, b.num_items), bpr);
      save_factors(L.factors(rec).string(), res.factors, "bpr", extra);
      detail::log(log, "fit: BPR-MF (" + std::to_string(res.skipped_users) + " users skipped)");
      continue;
    }
    IncidenceMatrix M(b.num_items);
    const auto source = detail::segmentation_source(rec);
    if (source.empty()) {
      M = detail::user_matrix(seqs, b.num_items);
    } else {
      const auto users = detail::segment_users(seqs, detail::load_detections(L, source), c.k);
      std::vector<std::pair<std::string, std::vector<ItemList>>> segs;
      for (const auto& u : users) segs.emplace_back(u.user_id, u.segments);
      M = build_segmented_matrix(segs, b.num_items).matrix;
    }
    const auto res = nmf_fit(M, nmf);
    save_factors(L.factors(rec).string(), res.factors, "nmf", extra);
    detail::log(log, "fit: " + rec + " on " + std::to_string(M.num_rows()) + " rows, objective " +
                         detail::fmt(res.objective_history.back(), "%.4f") + " after " +
                         std::to_string(res.iterations) + " sweeps");
  }
}

inline void cmd_recommend(const ExperimentConfig& c, std::ostream* log = nullptr) {
  validate(c);
  detail::write_resolved_config(c);
  const Layout L{c.output_dir};
  const auto b = detail::load_benchmark(L);
  const auto seqs = detail::observed_sequences(b);
  const auto plan = plan_methods(c);
  const auto popularity = detail::user_matrix(seqs, b.num_items).column_counts();
  const std::size_t top_n = c.n_grid.back();
  const RecommendOptions opt{c.neighbor_size, top_n};

  for (const auto& rec : plan.recommenders) {
    std::vector<Recommendation> out(seqs.size());
    const auto source = detail::segmentation_source(rec);
    const auto users = source.empty() ? detail::unsegmented_users(seqs)
                                      : detail::segment_users(seqs, detail::load_detections(L, source), c.k);
    if (rec == "PopRank") {
      for (std::size_t u = 0; u < users.size(); ++u) out[u] = pop_rank(popularity, users[u], top_n);
    } else if (rec.rfind("HMMR-S", 0) == 0) {
      const std::size_t h = std::stoul(rec.substr(6));
      detail::require_file(L.model(h), "train");
      const auto factors = hmm_item_factors(load_model(L.model(h).string()));
      parallel_for(users.size(), c.threads,
                   [&](std::size_t u) { out[u] = segment_recommend(factors, users[u], popularity, opt); });
    } else {
      detail::require_file(L.factors(rec), "fit");
      const auto f = load_factors(L.factors(rec).string());
      if (source.empty()) {
        parallel_for(users.size(), c.threads, [&](std::size_t u) {
          out[u] = user_factor_recommend(f, u, users[u], popularity, top_n);
        });
      } else {
        const auto q = item_factors(f);
        parallel_for(users.size(), c.threads,
                     [&](std::size_t u) { out[u] = segment_recommend(q, users[u], popularity, opt); });
      }
    }
    auto os = detail::open_out(L.recs(rec));
    write_recommendations(os, rec, c, out);
    detail::log(log, "recommend: " + rec);
  }
}

inline EvalReport cmd_evaluate(const ExperimentConfig& c, std::ostream* log = nullptr) {
  validate(c);
  detail::write_resolved_config(c);
  const Layout L{c.output_dir};
  const auto b = detail::load_benchmark(L);
  const auto plan = plan_methods(c);
  EvalReport report;
  report.n_users = b.sequences.size();
  report.n_grid = c.n_grid;
  report.parameters = {{"seed", std::to_string(c.seed)},
                       {"config_hash", config_hash(c)},
                       {"k", std::to_string(c.k)},
                       {"latent_factors", std::to_string(c.latent_factors)},
                       {"neighbor_size", std::to_string(c.neighbor_size)},
                       {"holdout_size", std::to_string(c.holdout_size)}};

  std::map<std::string, std::vector<DetectionRecord>> detections;
  for (const auto& m : plan.detectors) detections[m] = detail::load_detections(L, m);
  const auto deltas = aggregate_cpd(detections);
  for (const auto& [m, d] : deltas) report.per_method[m].mean_delta = d;

  for (const auto& rec : plan.recommenders) {
    detail::require_file(L.recs(rec), "recommend");
    std::ifstream in(L.recs(rec));
    auto lists = read_recommendations(in);
    std::vector<RankedCase> cases;
    for (const auto& s : b.sequences) cases.push_back({s.user_id, lists[s.user_id], s.holdout});
    const auto mm = ranking_metrics(cases, c.n_grid);
    report.per_method[rec].curve = mm.curve;
    report.per_method[rec].ndcg = mm.ndcg;
  }

  const std::string head = detail::header("report", c);
  {
    auto out = detail::open_out(L.report("cpd.tsv"));
    out << head << "method\tmean_delta\tn_users\n";
    for (const auto& m : plan.detectors)
      out << m << '\t' << detail::fmt(report.per_method[m].mean_delta) << '\t' << report.n_users << '\n';
  }
  {
    auto out = detail::open_out(L.report("cpd_table.txt"));
    out << head << "Error of change point detection methods (mean |truth - predicted|)\n\n";
    char line[128];
    std::snprintf(line, sizeof line, "%-14s %12s\n", "Method", "Delta");
    out << line;
    for (const auto& m : plan.detectors) {
      std::snprintf(line, sizeof line, "%-14s %12.3f\n", m.c_str(), report.per_method[m].mean_delta);
      out << line;
    }
  }
  {
    // mean Delta per number of hidden states, with the monotone-trend check
    std::vector<std::pair<std::size_t, double>> trend;
    for (auto h : plan.hmm_states)
      if (report.per_method.count(hmcd_name(h))) trend.emplace_back(h, report.per_method[hmcd_name(h)].mean_delta);
    bool nondecreasing = true;
    for (std::size_t i = 1; i < trend.size(); ++i) nondecreasing = nondecreasing && trend[i].second >= trend[i - 1].second;
    auto out = detail::open_out(L.report("state_trend.tsv"));
    out << head << "# trend=" << (nondecreasing ? "non-decreasing" : "NOT-non-decreasing") << '\n';
    out << "hidden_states\tmean_delta\n";
    for (const auto& [h, d] : trend) out << h << '\t' << detail::fmt(d) << '\n';
    report.parameters["state_trend_nondecreasing"] = nondecreasing ? "true" : "false";
  }
  {
    auto out = detail::open_out(L.report("metrics.tsv"));
    out << head << "method\tmetric\tN\tvalue\n";
    for (const auto& rec : plan.recommenders) {
      const auto& mm = report.per_method[rec];
      for (std::size_t i = 0; i < c.n_grid.size(); ++i) {
        const auto n = std::to_string(c.n_grid[i]);
        out << rec << "\tprecision\t" << n << '\t' << detail::fmt(mm.curve[i].precision) << '\n';
        out << rec << "\trecall\t" << n << '\t' << detail::fmt(mm.curve[i].recall) << '\n';
        out << rec << "\tndcg\t" << n << '\t' << detail::fmt(mm.ndcg[i]) << '\n';
      }
    }
  }
  {
    auto out = detail::open_out(L.report("metrics_table.txt"));
    out << head << "Ranking accuracy at N = " << c.n_grid.back() << " over " << report.n_users << " users\n\n";
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %10s %10s %10s\n", "Method", "NDCG", "Precision", "Recall");
    out << line;
    for (const auto& rec : plan.recommenders) {
      const auto& mm = report.per_method[rec];
      std::snprintf(line, sizeof line, "%-12s %10.4f %10.4f %10.4f\n", rec.c_str(), mm.ndcg.back(),
                    mm.curve.back().precision, mm.curve.back().recall);
      out << line;
    }
    out << "\nNDCG@N\n";
    std::string hdr = "Method      ";
    for (auto n : c.n_grid) hdr += detail::fmt(static_cast<double>(n), " %8.0f");
    out << hdr << '\n';
    for (const auto& rec : plan.recommenders) {
      std::snprintf(line, sizeof line, "%-12s", rec.c_str());
      out << line;
      for (double v : report.per_method[rec].ndcg) out << detail::fmt(v, " %8.4f");
      out << '\n';
    }
  }
  detail::log(log, "evaluate: reports written to " + L.report("").string());
  return report;
}

inline EvalReport cmd_run_all(const ExperimentConfig& c, std::ostream* log = nullptr) {
  cmd_synthesize(c, log);
  cmd_train(c, log);
  cmd_detect(c, log);
  cmd_fit(c, log);
  cmd_recommend(c, log);
  return cmd_evaluate(c, log);
}

}  // namespace hmmrec
