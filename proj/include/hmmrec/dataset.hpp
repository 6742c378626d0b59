#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hmmrec/common.hpp"
#include "hmmrec/hmm.hpp"

namespace hmmrec {

/// One playlist before indexing: external item keys plus an optional group tag.
struct RawPlaylist {
  std::string group;
  std::vector<std::string> keys;
};

struct CorpusStats {
  std::size_t playlists = 0;
  std::size_t items = 0;
  std::size_t tokens = 0;
  /// Distinct (playlist, item) pairs.
  std::size_t pairs = 0;
  double sparsity = 0.0;
  double mean_length = 0.0;
};

struct PlaylistCorpus {
  std::vector<ItemList> playlists;
  std::vector<std::string> groups;
  std::vector<std::string> vocab;
  std::unordered_map<std::string, ItemId> index;
  CorpusStats stats;
  std::vector<std::string> warnings;

  std::size_t num_items() const noexcept { return vocab.size(); }
};

/// Line format: one playlist per line, whitespace-separated item keys. A
/// leading "[tag]" token assigns the playlist to a group. Blank lines and
/// lines starting with '#' are ignored.
inline std::vector<RawPlaylist> parse_playlist_lines(std::istream& in) {
  std::vector<RawPlaylist> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    RawPlaylist p;
    std::string tok;
    bool head = true;
    while (ss >> tok) {
      if (head && tok.front() == '[') {
        if (tok.size() < 3 || tok.back() != ']') throw ParseError("malformed group tag '" + tok + "'", lineno);
        p.group = tok.substr(1, tok.size() - 2);
      } else {
        if (tok.front() == '[' || tok.back() == ']')
          throw ParseError("unexpected bracketed token '" + tok + "'", lineno);
        p.keys.push_back(tok);
      }
      head = false;
    }
    if (p.keys.empty()) throw ParseError("playlist has no items", lineno);
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<RawPlaylist> read_playlist_file(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open corpus file: " + path);
  return parse_playlist_lines(in);
}

/// Directory of Million-Playlist-Dataset style JSON slices
/// ({"playlists": [{"pid": .., "tracks": [{"album_uri": ..}, ..]}]}).
/// Items are albums; files are read in lexicographic order.
inline std::vector<RawPlaylist> read_mpd_directory(const std::string& dir) {
  namespace fs = std::filesystem;
  require(fs::is_directory(dir), "not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<RawPlaylist> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(f.string() + ": " + e.what(), 0);
    }
    require(j.contains("playlists") && j["playlists"].is_array(), f.string() + ": no playlists array");
    for (const auto& pl : j["playlists"]) {
      RawPlaylist p;
      for (const auto& t : pl.at("tracks")) p.keys.push_back(t.at("album_uri").get<std::string>());
      if (!p.keys.empty()) out.push_back(std::move(p));
    }
  }
  return out;
}

inline CorpusStats compute_stats(const std::vector<ItemList>& playlists, std::size_t num_items) {
  CorpusStats s;
  s.playlists = playlists.size();
  s.items = num_items;
  for (const auto& p : playlists) {
    s.tokens += p.size();
    s.pairs += std::set<ItemId>(p.begin(), p.end()).size();
  }
  if (s.playlists > 0 && s.items > 0) {
    s.sparsity = 1.0 - static_cast<double>(s.pairs) /
                           (static_cast<double>(s.playlists) * static_cast<double>(s.items));
    s.mean_length = static_cast<double>(s.tokens) / static_cast<double>(s.playlists);
  }
  return s;
}

/// Filters short playlists, draws a seeded uniform sample without
/// replacement (kept in input order), and indexes items by first appearance
/// within the sample.
inline PlaylistCorpus build_corpus(const std::vector<RawPlaylist>& raw, std::size_t min_len,
                                   std::size_t sample_size, std::uint64_t seed) {
  PlaylistCorpus c;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < raw.size(); ++i)
    if (raw[i].keys.size() >= std::max<std::size_t>(min_len, 1)) keep.push_back(i);
  if (sample_size < keep.size()) {
    Rng rng = make_rng(seed, 0x73616d70);
    std::shuffle(keep.begin(), keep.end(), rng);
    keep.resize(sample_size);
    std::sort(keep.begin(), keep.end());
  } else if (sample_size > keep.size()) {
    c.warnings.push_back("sample_size " + std::to_string(sample_size) + " exceeds the " +
                         std::to_string(keep.size()) + " eligible playlists; using all");
  }
  for (auto idx : keep) {
    ItemList items;
    for (const auto& k : raw[idx].keys) {
      auto [it, fresh] = c.index.emplace(k, c.vocab.size());
      if (fresh) c.vocab.push_back(k);
      items.push_back(it->second);
    }
    c.playlists.push_back(std::move(items));
    c.groups.push_back(raw[idx].group);
  }
  c.stats = compute_stats(c.playlists, c.vocab.size());
  return c;
}

/// Reads a line-format file, or an MPD JSON directory when `path` is a directory.
inline PlaylistCorpus load_corpus(const std::string& path, std::size_t min_len,
                                  std::size_t sample_size, std::uint64_t seed) {
  const auto raw = std::filesystem::is_directory(path) ? read_mpd_directory(path) : read_playlist_file(path);
  return build_corpus(raw, min_len, sample_size, seed);
}

// Synthetic corpus ----------------------------------------------------------

/// Parameters for a genre-structured playlist generator. Genres own disjoint
/// vocabularies and are split evenly across pools; each playlist stays in one
/// pool, centres on a primary genre, drifts into a secondary genre in short
/// runs, and favours a few artists of its primary genre.
struct GenreCorpusSpec {
  std::size_t pools = 2;
  std::size_t genres_per_pool = 5;
  std::size_t artists_per_genre = 35;
  std::size_t tracks_per_artist = 20;
  std::size_t playlists_per_pool = 3000;
  std::size_t mean_length = 80;
  std::size_t length_spread = 20;
  std::size_t favourite_artists = 4;
  double favourite_share = 0.5;
  double drift_prob = 0.05;
  double return_prob = 0.25;
  double zipf_exponent = 0.8;
  std::uint64_t seed = 7;
};

inline std::vector<RawPlaylist> generate_genre_corpus(const GenreCorpusSpec& spec) {
  require(spec.pools >= 1 && spec.genres_per_pool >= 1 && spec.artists_per_genre >= 1 &&
              spec.tracks_per_artist >= 1,
          "generate_genre_corpus: sizes must be positive");
  require(spec.mean_length > spec.length_spread, "generate_genre_corpus: length_spread too large");
  const std::size_t genre_size = spec.artists_per_genre * spec.tracks_per_artist;
  require(genre_size >= spec.mean_length + spec.length_spread,
          "generate_genre_corpus: genre vocabulary smaller than the longest playlist");

  auto key = [&](std::size_t genre, std::size_t local) {
    return "g" + std::to_string(genre) + "-a" + std::to_string(local / spec.tracks_per_artist) + "-t" +
           std::to_string(local % spec.tracks_per_artist);
  };
  Rng rng = make_rng(spec.seed, 0x67656e);
  // Zipf weights over a genre's tracks, in a random per-genre popularity order
  std::vector<double> zipf(genre_size);
  for (std::size_t r = 0; r < genre_size; ++r) zipf[r] = 1.0 / std::pow(static_cast<double>(r + 1), spec.zipf_exponent);
  const std::size_t n_genres = spec.pools * spec.genres_per_pool;
  std::vector<std::vector<double>> genre_weights(n_genres, std::vector<double>(genre_size));
  for (auto& w : genre_weights) {
    std::vector<std::size_t> order(genre_size);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t r = 0; r < genre_size; ++r) w[order[r]] = zipf[r];
  }

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<RawPlaylist> out;
  for (std::size_t pl = 0; pl < spec.pools * spec.playlists_per_pool; ++pl) {
    const std::size_t pool = pl % spec.pools;
    RawPlaylist p;
    p.group = std::string(1, static_cast<char>('A' + pool % 26)) + (pool >= 26 ? std::to_string(pool / 26) : "");
    const std::size_t base = pool * spec.genres_per_pool;
    const std::size_t primary = base + std::uniform_int_distribution<std::size_t>(0, spec.genres_per_pool - 1)(rng);
    std::size_t secondary = primary;
    if (spec.genres_per_pool > 1) {
      const auto off = std::uniform_int_distribution<std::size_t>(1, spec.genres_per_pool - 1)(rng);
      secondary = base + (primary - base + off) % spec.genres_per_pool;
    }
    std::vector<std::size_t> artists(spec.artists_per_genre);
    std::iota(artists.begin(), artists.end(), 0);
    std::shuffle(artists.begin(), artists.end(), rng);
    artists.resize(std::min(spec.favourite_artists, artists.size()));

    const std::size_t len = std::uniform_int_distribution<std::size_t>(
        spec.mean_length - spec.length_spread, spec.mean_length + spec.length_spread)(rng);
    std::vector<std::vector<bool>> used(n_genres);
    used[primary].assign(genre_size, false);
    used[secondary].assign(genre_size, false);
    bool in_primary = true;
    for (std::size_t t = 0; t < len; ++t) {
      if (t > 0) {
        const double u = unif(rng);
        if (in_primary && u < spec.drift_prob && secondary != primary) in_primary = false;
        else if (!in_primary && u < spec.return_prob) in_primary = true;
      }
      const std::size_t g = in_primary ? primary : secondary;
      std::vector<double> w = genre_weights[g];
      if (in_primary && unif(rng) < spec.favourite_share) {
        std::vector<double> fav(genre_size, 0.0);
        for (auto a : artists)
          for (std::size_t k = 0; k < spec.tracks_per_artist; ++k) {
            const auto local = a * spec.tracks_per_artist + k;
            fav[local] = w[local];
          }
        double left = 0.0;
        for (std::size_t i = 0; i < genre_size; ++i)
          if (!used[g][i]) left += fav[i];
        if (left > 0.0) w = std::move(fav);
      }
      for (std::size_t i = 0; i < genre_size; ++i)
        if (used[g][i]) w[i] = 0.0;
      double total = std::accumulate(w.begin(), w.end(), 0.0);
      if (total <= 0.0) {
        // genre exhausted: switch to the other genre of the playlist
        const std::size_t other = g == primary ? secondary : primary;
        w = genre_weights[other];
        for (std::size_t i = 0; i < genre_size; ++i)
          if (used[other][i]) w[i] = 0.0;
        in_primary = other == primary;
      }
      const std::size_t gg = in_primary ? primary : secondary;
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      const std::size_t local = pick(rng);
      used[gg][local] = true;
      p.keys.push_back(key(gg, local));
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline void write_playlist_file(const std::string& path, const std::vector<RawPlaylist>& playlists) {
  std::ofstream out(path);
  require(static_cast<bool>(out), "cannot write " + path);
  for (const auto& p : playlists) {
    if (!p.group.empty()) out << '[' << p.group << "] ";
    for (std::size_t i = 0; i < p.keys.size(); ++i) out << (i ? " " : "") << p.keys[i];
    out << '\n';
  }
}

// Mixed-sequence benchmark --------------------------------------------------

struct MixedSequence {
  std::string user_id;
  ItemList items;
  std::size_t truth_change = 0;
  std::pair<std::size_t, std::size_t> source_ids;
  ItemList holdout;
};

struct MixOptions {
  std::size_t count = 1000;
  std::uint64_t seed = 0;
  std::size_t min_window = 10;
  std::size_t holdout_size = 10;
  /// Require p1 and p2 to carry different group tags.
  bool cross_group = false;
};

/// Concatenates a prefix window of p1 with a prefix window of p2 and holds out
/// the last holdout_size items of the p2 window. Windows are uniform over
/// their feasible lengths; infeasible pairs are rejected and redrawn.
inline std::vector<MixedSequence> synthesize_mixed(const PlaylistCorpus& corpus, const MixOptions& opt) {
  require(opt.min_window >= 1, "synthesize_mixed: min_window must be >= 1");
  const std::size_t n = corpus.playlists.size();
  const std::size_t need1 = opt.min_window;
  const std::size_t need2 = opt.min_window + opt.holdout_size;
  auto group = [&](std::size_t i) { return i < corpus.groups.size() ? corpus.groups[i] : std::string(); };

  std::set<std::string> g1, g2;
  std::size_t n1 = 0, n2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (corpus.playlists[i].size() >= need1) ++n1, g1.insert(group(i));
    if (corpus.playlists[i].size() >= need2) ++n2, g2.insert(group(i));
  }
  bool feasible = n1 >= 1 && n2 >= 1 && !(n1 == 1 && n2 == 1 && n == 1);
  if (feasible && n1 == 1 && n2 == 1) {
    std::size_t a = 0, b = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (corpus.playlists[i].size() >= need1) a = i;
      if (corpus.playlists[i].size() >= need2) b = i;
    }
    feasible = a != b;
  }
  if (opt.cross_group)
    feasible = feasible && !g1.empty() && !g2.empty() &&
               !(g1.size() == 1 && g2.size() == 1 && *g1.begin() == *g2.begin());
  require(feasible, "synthesize_mixed: need two distinct playlists with >= " + std::to_string(need1) +
                        " and >= " + std::to_string(need2) + " items (min_window + holdout)" +
                        (opt.cross_group ? " in different groups" : ""));

  Rng rng = make_rng(opt.seed, 0x6d6978);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<MixedSequence> out;
  out.reserve(opt.count);
  const int width = 6;
  for (std::size_t c = 0; c < opt.count; ++c) {
    std::size_t a, b;
    for (;;) {
      a = pick(rng);
      b = pick(rng);
      if (a == b) continue;
      if (corpus.playlists[a].size() < need1 || corpus.playlists[b].size() < need2) continue;
      if (opt.cross_group && group(a) == group(b)) continue;
      break;
    }
    const auto& p1 = corpus.playlists[a];
    const auto& p2 = corpus.playlists[b];
    const std::size_t w1 = std::uniform_int_distribution<std::size_t>(need1, p1.size())(rng);
    const std::size_t w2 = std::uniform_int_distribution<std::size_t>(need2, p2.size())(rng);
    MixedSequence ms;
    std::string id = std::to_string(c);
    ms.user_id = "u" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(id.size()))), '0') + id;
    ms.items.assign(p1.begin(), p1.begin() + static_cast<std::ptrdiff_t>(w1));
    ms.items.insert(ms.items.end(), p2.begin(), p2.begin() + static_cast<std::ptrdiff_t>(w2 - opt.holdout_size));
    ms.holdout.assign(p2.begin() + static_cast<std::ptrdiff_t>(w2 - opt.holdout_size),
                      p2.begin() + static_cast<std::ptrdiff_t>(w2));
    ms.truth_change = w1;
    ms.source_ids = {a, b};
    out.push_back(std::move(ms));
  }
  return out;
}

struct SequenceSet {
  std::vector<InteractionSequence> sequences;
  std::map<std::string, ItemList> holdout;
};

inline SequenceSet to_interaction_sequences(const std::vector<MixedSequence>& mixed) {
  SequenceSet out;
  for (const auto& ms : mixed) {
    out.sequences.push_back({ms.user_id, ms.items, ms.truth_change});
    out.holdout[ms.user_id] = ms.holdout;
  }
  return out;
}

// Benchmark file --------------------------------------------------------------

struct Benchmark {
  std::uint64_t seed = 0;
  std::size_t num_items = 0;
  std::size_t min_window = 10;
  std::size_t holdout_size = 10;
  std::string config_hash;
  std::vector<MixedSequence> sequences;
};

namespace detail {

inline std::string join_items(const ItemList& items) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(items[i]);
  }
  return s;
}

inline ItemList split_items(const std::string& s, std::size_t lineno) {
  ItemList out;
  std::istringstream ss(s);
  std::string tok;
  while (ss >> tok) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != tok.size()) throw ParseError("bad item index '" + tok + "'", lineno);
    out.push_back(static_cast<ItemId>(v));
  }
  return out;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find('\t', start);
    cols.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return cols;
}

}  // namespace detail

/// Header lines "# key=value", then a column header and one tab-separated
/// record per sequence: user_id, truth, p1, p2, observed items, holdout items.
inline void write_benchmark(std::ostream& out, const Benchmark& b) {
  out << "# hmmrec-benchmark v1\n";
  out << "# seed=" << b.seed << "\n# num_items=" << b.num_items << "\n# min_window=" << b.min_window
      << "\n# holdout_size=" << b.holdout_size << "\n# count=" << b.sequences.size()
      << "\n# config_hash=" << b.config_hash << "\n";
  out << "user_id\ttruth\tsource_p1\tsource_p2\tobserved\tholdout\n";
  for (const auto& s : b.sequences)
    out << s.user_id << '\t' << s.truth_change << '\t' << s.source_ids.first << '\t' << s.source_ids.second
        << '\t' << detail::join_items(s.items) << '\t' << detail::join_items(s.holdout) << '\n';
}

inline Benchmark read_benchmark(std::istream& in) {
  Benchmark b;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  std::map<std::string, std::string> meta;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq != std::string::npos) meta[line.substr(2, eq - 2)] = line.substr(eq + 1);
      continue;
    }
    if (!header_seen) {
      if (line.rfind("user_id\t", 0) != 0) throw ParseError("missing column header", lineno);
      header_seen = true;
      continue;
    }
    const auto cols = detail::split_tabs(line);
    if (cols.size() != 6) throw ParseError("expected 6 columns, got " + std::to_string(cols.size()), lineno);
    MixedSequence s;
    s.user_id = cols[0];
    try {
      s.truth_change = std::stoull(cols[1]);
      s.source_ids = {std::stoull(cols[2]), std::stoull(cols[3])};
    } catch (const std::exception&) {
      throw ParseError("bad numeric field", lineno);
    }
    s.items = detail::split_items(cols[4], lineno);
    s.holdout = detail::split_items(cols[5], lineno);
    if (s.items.empty()) throw ParseError("empty observed sequence", lineno);
    b.sequences.push_back(std::move(s));
  }
  auto num = [&](const char* k) -> std::uint64_t {
    auto it = meta.find(k);
    if (it == meta.end()) throw ParseError(std::string("missing header field ") + k, 0);
    return std::stoull(it->second);
  };
  b.seed = num("seed");
  b.num_items = static_cast<std::size_t>(num("num_items"));
  b.min_window = static_cast<std::size_t>(num("min_window"));
  b.holdout_size = static_cast<std::size_t>(num("holdout_size"));
  b.config_hash = meta.count("config_hash") ? meta["config_hash"] : "";
  for (const auto& s : b.sequences) {
    for (auto i : s.items) require(i < b.num_items, "benchmark: item index out of range in " + s.user_id);
    for (auto i : s.holdout) require(i < b.num_items, "benchmark: holdout index out of range in " + s.user_id);
  }
  return b;
}

}  // namespace hmmrec
