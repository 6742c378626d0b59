// Command-line driver for the change-point / sequential recommendation pipeline.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hmmrec.hpp"

int main(int argc, char** argv) {
  CLI::App app{"HMM change-point detection and sequential recommendation"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON experiment config")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out_dir, "output directory (overrides output_dir)");
    cmd->add_option("--seed", seed, "random seed (overrides seed)");
    cmd->add_option("--threads", threads, "worker threads for per-user stages");
  };

  struct Stage {
    const char* name;
    const char* help;
  };
  const Stage stages[] = {{"synthesize", "build the mixed-playlist benchmark from the corpus"},
                          {"train", "fit one HMM per hidden-state count"},
                          {"detect", "write change-point reports for every detector"},
                          {"fit", "fit NMF / BPR factor models"},
                          {"recommend", "write top-N lists for every recommender"},
                          {"evaluate", "write change-point and ranking reports"},
                          {"run-all", "run every stage in order"}};
  for (const auto& s : stages) add_common(app.add_subcommand(s.name, s.help));

  auto* gen = app.add_subcommand("gen-corpus", "write a synthetic genre-structured playlist corpus");
  hmmrec::GenreCorpusSpec spec;
  std::string gen_out;
  gen->add_option("--out", gen_out, "output playlist file")->required();
  gen->add_option("--seed", spec.seed, "generator seed");
  gen->add_option("--pools", spec.pools, "pools with disjoint vocabularies");
  gen->add_option("--genres-per-pool", spec.genres_per_pool);
  gen->add_option("--artists-per-genre", spec.artists_per_genre);
  gen->add_option("--tracks-per-artist", spec.tracks_per_artist);
  gen->add_option("--playlists-per-pool", spec.playlists_per_pool);
  gen->add_option("--mean-length", spec.mean_length);
  gen->add_option("--length-spread", spec.length_spread);
  gen->add_option("--favourite-artists", spec.favourite_artists);
  gen->add_option("--favourite-share", spec.favourite_share, "share of primary-genre picks from favourite artists");
  gen->add_option("--drift", spec.drift_prob, "per-step probability of drifting into the secondary genre");
  gen->add_option("--return", spec.return_prob, "per-step probability of returning to the primary genre");
  gen->add_option("--zipf", spec.zipf_exponent, "popularity skew within a genre");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      hmmrec::write_playlist_file(gen_out, hmmrec::generate_genre_corpus(spec));
      std::cerr << "gen-corpus: wrote " << spec.pools * spec.playlists_per_pool << " playlists to " << gen_out << '\n';
      return EXIT_SUCCESS;
    }
    auto cfg = hmmrec::load_config(config_path);
    if (out_dir) cfg.output_dir = *out_dir;
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    hmmrec::validate(cfg);

    std::ostream* log = &std::cerr;
    const auto* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    if (name == "synthesize") hmmrec::cmd_synthesize(cfg, log);
    else if (name == "train") hmmrec::cmd_train(cfg, log);
    else if (name == "detect") hmmrec::cmd_detect(cfg, log);
    else if (name == "fit") hmmrec::cmd_fit(cfg, log);
    else if (name == "recommend") hmmrec::cmd_recommend(cfg, log);
    else if (name == "evaluate") hmmrec::cmd_evaluate(cfg, log);
    else if (name == "run-all") hmmrec::cmd_run_all(cfg, log);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return EXIT_FAILURE;
  }
  return EXIT_SUCCESS;
}
