#include "condigsum/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "condigsum/corpus.hpp"
#include "condigsum/error.hpp"
#include "condigsum/evalgen.hpp"
#include "condigsum/model.hpp"
#include "condigsum/pairs.hpp"
#include "condigsum/trainer.hpp"

namespace condigsum {

using nlohmann::json;
namespace fs = std::filesystem;

void configure_logging_from_env() {
  const char* level = std::getenv("CONDIGSUM_LOG");
  if (level == nullptr) return;
  const std::string v = level;
  if (v == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (v == "info") {
    spdlog::set_level(spdlog::level::info);
  } else if (v == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::warn("ignoring CONDIGSUM_LOG={} (expected error, info or debug)", v);
  }
}

namespace {

struct CommonTrainFlags {
  std::string config_path;
  std::string preset_name = "toy";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<std::size_t> epochs;
  std::size_t threads = 1;
};

void add_train_flags(CLI::App* cmd, CommonTrainFlags& f) {
  cmd->add_option("--config", f.config_path, "TrainConfig JSON; fields override the preset")
      ->check(CLI::ExistingFile);
  cmd->add_option("--preset", f.preset_name, "Base hyperparameters")
      ->check(CLI::IsMember({"paper", "toy"}));
  cmd->add_option("--seed", f.seed, "Run seed; overrides the config");
  cmd->add_option("--strategy", f.strategy, "Update strategy")
      ->check(CLI::IsMember({"alternating", "summed"}));
  cmd->add_option("--epochs", f.epochs, "Overrides the config");
  cmd->add_option("--threads", f.threads, "Worker threads (training is sequential)")
      ->check(CLI::PositiveNumber);
}

TrainConfig resolve_config(const CommonTrainFlags& f) {
  TrainConfig c = preset(f.preset_name);
  if (!f.config_path.empty()) {
    std::ifstream in(f.config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ParseError("config '" + f.config_path + "': " + e.what());
    }
    c = train_config_from_json(j, c);
  }
  if (f.seed) c.seed = *f.seed;
  if (f.strategy) c.strategy = parse_strategy(*f.strategy);
  if (f.epochs) c.epochs = *f.epochs;
  return c;
}


Vocabulary vocab_for(const std::string& vocab_path, const std::string& checkpoint_path) {
  const std::string path = vocab_path.empty()
                               ? (fs::path(checkpoint_path).parent_path() / "vocab.txt").string()
                               : vocab_path;
  if (!fs::exists(path)) throw Error("vocabulary file '" + path + "' not found (use --vocab)");
  return Vocabulary::load(path);
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ParseError("--values: '" + item + "' is not a number");
    }
  }
  if (values.empty()) throw ParseError("--values: no values given");
  return values;
}

int run_synth(std::ostream& out, const SynthOptions& opts, const std::string& path) {
  const auto corpus = synth_corpus(opts);
  save_corpus(path, corpus);
  out << "wrote " << corpus.size() << " dialogues to " << path << '\n';
  return 0;
}

int run_prepare_pairs(std::ostream& out, const CommonTrainFlags& flags, const std::string& corpus_path,
                      std::size_t epoch, const std::string& out_path) {
  const TrainConfig config = resolve_config(flags);
  config.validate();
  const auto corpus = load_corpus(corpus_path);
  std::ofstream dump(out_path);
  if (!dump) throw Error("cannot write '" + out_path + "'");
  // Same stream and order as the trainer's per-epoch pair generation.
  Rng rng(pairs_seed(config.seed, epoch));
  std::size_t n_co = 0;
  std::size_t n_su = 0;
  for (const auto& d : corpus) {
    if (config.w_co > 0.0) {
      for (const auto& p : make_coherence_pairs(d, config.k, config.n_co, rng)) {
        dump << to_json(p, d.id).dump() << '\n';
        ++n_co;
      }
    }
    if (config.w_su > 0.0) {
      const auto subs = training_sub_summaries(d, config);
      for (const auto& p : make_subsummary_pairs(d, subs, config.n_su, config.a, config.b, rng)) {
        dump << to_json(p, d.id).dump() << '\n';
        ++n_su;
      }
    }
  }
  out << "wrote " << n_co << " coherence and " << n_su << " sub-summary pairs to " << out_path
      << '\n';
  return 0;
}

struct TrainOutcome {
  TrainResult result;
  Vocabulary vocab;
};

TrainOutcome train_from_files(const TrainConfig& config, const std::string& corpus_path,
                              const std::string& valid_path, const std::optional<std::string>& out_dir) {
  const auto corpus = load_corpus(corpus_path);
  std::vector<DialogueRecord> valid;
  if (!valid_path.empty()) valid = load_corpus(valid_path);
  Vocabulary vocab = build_vocab(corpus, config.max_vocab);
  TrainOptions options;
  options.out_dir = out_dir;
  options.valid = valid;
  return {train(corpus, vocab, config, options), std::move(vocab)};
}

int run_train(std::ostream& out, const CommonTrainFlags& flags, const std::string& corpus_path,
              const std::string& valid_path, const std::string& out_dir) {
  const TrainConfig config = resolve_config(flags);
  if (flags.threads > 1) spdlog::info("--threads {}: training runs sequentially", flags.threads);
  const auto outcome = train_from_files(config, corpus_path, valid_path, out_dir);
  out << "trained " << outcome.result.epochs.size() << " epochs, "
      << outcome.result.optimizer_steps << " optimizer steps; checkpoints in " << out_dir << '\n';
  return 0;
}

int run_evaluate(std::ostream& out, const std::string& checkpoint, const std::string& vocab_path,
                 const std::string& corpus_path, const BeamConfig& beam, const std::string& out_path) {
  auto model = load_checkpoint(checkpoint);
  const Vocabulary vocab = vocab_for(vocab_path, checkpoint);
  if (vocab.size() != model.config().vocab_size) {
    throw ValidationError("vocabulary has " + std::to_string(vocab.size()) +
                          " entries, checkpoint expects " +
                          std::to_string(model.config().vocab_size));
  }
  const auto corpus = load_corpus(corpus_path);
  const RougeReport report = evaluate_rouge(model, corpus, vocab, beam);
  write_json(out_path, to_json(report));
  out << "rouge-1 " << report.overall.mean.r1 << " rouge-2 " << report.overall.mean.r2
      << " rouge-l " << report.overall.mean.rl << " (" << report.overall.count
      << " dialogues); report in " << out_path << '\n';
  return 0;
}

int run_diagnose(std::ostream& out, const std::string& checkpoint, const std::string& vocab_path,
                 const std::string& corpus_path, std::size_t n_examples, std::uint64_t seed,
                 const std::string& out_dir) {
  auto model = load_checkpoint(checkpoint);
  const Vocabulary vocab = vocab_for(vocab_path, checkpoint);
  const auto corpus = load_corpus(corpus_path);
  const DiagnosticsReport report = run_diagnostics(model, corpus, vocab, n_examples, seed);
  const fs::path dir(out_dir);
  write_json(dir / "diagnostics.json", to_json(report));
  for (const auto& [id, m] : report.matrices) {
    std::ofstream csv(dir / ("correlation-" + id + ".csv"));
    write_matrix_csv(csv, m);
  }
  out << "coherence: ordered " << report.mean_ordered << " vs shuffled " << report.mean_shuffled
      << " (sign test p=" << report.sign_test_p << "); substitution: original "
      << report.substitution.mean_original << " vs substituted "
      << report.substitution.mean_substituted << "; diagonal columns " << report.diagonal_columns
      << "/" << report.total_columns << '\n';
  return 0;
}

int run_sweep(std::ostream& out, const CommonTrainFlags& flags, const std::string& corpus_path,
              const std::string& valid_path, const std::string& out_dir,
              const std::string& coefficient, const std::string& values_text,
              const std::string& strategies_text) {
  const TrainConfig base = resolve_config(flags);
  if (valid_path.empty()) throw ValidationError("sweep needs --valid");
  std::vector<double> values = values_text.empty() ? std::vector<double>{} : parse_values(values_text);
  if (values.empty()) values.push_back(coefficient == "w_co" ? base.w_co : base.w_su);
  std::vector<Strategy> strategies;
  if (strategies_text.empty()) {
    strategies.push_back(base.strategy);
  } else {
    std::stringstream ss(strategies_text);
    std::string item;
    while (std::getline(ss, item, ',')) strategies.push_back(parse_strategy(item));
  }
  fs::create_directories(out_dir);
  const fs::path csv_path = fs::path(out_dir) / "sweep.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw Error("cannot write '" + csv_path.string() + "'");
  csv.precision(10);
  csv << "coefficient,value,strategy,seed,final_train_main,final_valid_main,best_valid_main\n";
  for (Strategy strategy : strategies) {
    for (double value : values) {
      TrainConfig config = base;
      config.strategy = strategy;
      (coefficient == "w_co" ? config.w_co : config.w_su) = value;
      auto outcome = train_from_files(config, corpus_path, valid_path, std::nullopt);
      const auto& epochs = outcome.result.epochs;
      const double train_main = epochs.empty() ? 0.0 : epochs.back().train_main;
      const double valid_main = epochs.empty() || !epochs.back().valid_main
                                    ? validation_main_loss(outcome.result.model,
                                                           load_corpus(valid_path), outcome.vocab)
                                    : *epochs.back().valid_main;
      const double best = outcome.result.best_valid_main.value_or(valid_main);
      csv << coefficient << ',' << value << ',' << strategy_name(strategy) << ',' << config.seed
          << ',' << train_main << ',' << valid_main << ',' << best << '\n';
      csv.flush();
      out << coefficient << '=' << value << ' ' << strategy_name(strategy) << ": valid main "
          << valid_main << '\n';
    }
  }
  out << "sweep results in " << csv_path.string() << '\n';
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Topic-aware contrastive dialogue summarization toolkit", "condigsum"};
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  SynthOptions synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth-data", "Write a synthetic topic-structured corpus");
  synth_cmd->add_option("--out", synth_out, "Output JSONL")->required();
  synth_cmd->add_option("--n", synth.n_dialogues, "Number of dialogues");
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");
  synth_cmd->add_option("--min-topics", synth.min_topics);
  synth_cmd->add_option("--max-topics", synth.max_topics);
  synth_cmd->add_option("--min-utterances", synth.min_utterances_per_topic);
  synth_cmd->add_option("--max-utterances", synth.max_utterances_per_topic);

  CommonTrainFlags pairs_flags;
  std::string pairs_corpus;
  std::string pairs_out;
  std::size_t pairs_epoch = 1;
  auto* pairs_cmd = app.add_subcommand("prepare-pairs", "Dump one epoch of contrastive pairs");
  add_train_flags(pairs_cmd, pairs_flags);
  pairs_cmd->add_option("--corpus", pairs_corpus, "Corpus JSONL")->required()->check(CLI::ExistingFile);
  pairs_cmd->add_option("--out", pairs_out, "Pair dump JSONL")->required();
  pairs_cmd->add_option("--epoch", pairs_epoch, "Epoch whose pairs to dump (1-based)")
      ->check(CLI::PositiveNumber);

  CommonTrainFlags train_flags;
  std::string train_corpus;
  std::string train_valid;
  std::string train_out;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_train_flags(train_cmd, train_flags);
  train_cmd->add_option("--corpus", train_corpus, "Training corpus JSONL")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--valid", train_valid, "Validation corpus JSONL")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "Output directory")->required();

  std::string eval_ckpt;
  std::string eval_vocab;
  std::string eval_corpus;
  std::string eval_out;
  BeamConfig beam;
  auto* eval_cmd = app.add_subcommand("evaluate", "Decode a corpus and score it with ROUGE");
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--vocab", eval_vocab, "Defaults to vocab.txt next to the checkpoint");
  eval_cmd->add_option("--corpus", eval_corpus)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", eval_out, "Report JSON")->required();
  eval_cmd->add_option("--beam", beam.beam_size)->check(CLI::PositiveNumber);
  eval_cmd->add_option("--max-len", beam.max_decode_len)->check(CLI::PositiveNumber);
  eval_cmd->add_option("--length-penalty", beam.length_penalty);

  std::string diag_ckpt;
  std::string diag_vocab;
  std::string diag_corpus;
  std::string diag_out;
  std::size_t diag_examples = 70;
  std::uint64_t diag_seed = 1;
  auto* diag_cmd = app.add_subcommand("diagnose", "Coherence, correlation and substitution probes");
  diag_cmd->add_option("--checkpoint", diag_ckpt)->required()->check(CLI::ExistingFile);
  diag_cmd->add_option("--vocab", diag_vocab, "Defaults to vocab.txt next to the checkpoint");
  diag_cmd->add_option("--corpus", diag_corpus, "Corpus with topic_spans")->required()->check(CLI::ExistingFile);
  diag_cmd->add_option("--out", diag_out, "Output directory")->required();
  diag_cmd->add_option("--examples", diag_examples, "Substitution probe size");
  diag_cmd->add_option("--seed", diag_seed);

  CommonTrainFlags sweep_flags;
  std::string sweep_corpus;
  std::string sweep_valid;
  std::string sweep_out;
  std::string sweep_coefficient = "w_co";
  std::string sweep_values;
  std::string sweep_strategies;
  auto* sweep_cmd = app.add_subcommand("sweep", "Validation loss over a coefficient grid");
  add_train_flags(sweep_cmd, sweep_flags);
  sweep_cmd->add_option("--corpus", sweep_corpus)->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--valid", sweep_valid)->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--out", sweep_out, "Output directory")->required();
  sweep_cmd->add_option("--coefficient", sweep_coefficient)->check(CLI::IsMember({"w_co", "w_su"}));
  sweep_cmd->add_option("--values", sweep_values, "Comma-separated coefficient values");
  sweep_cmd->add_option("--strategies", sweep_strategies, "Comma-separated: alternating,summed");

  if (argv.size() <= 1) {
    err << app.help();
    return 2;
  }
  std::vector<std::string> args(argv.rbegin(), argv.rend() - 1);
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  if (app.get_subcommands().empty()) {
    err << app.help();
    return 2;
  }

  try {
    if (synth_cmd->parsed()) return run_synth(out, synth, synth_out);
    if (pairs_cmd->parsed()) return run_prepare_pairs(out, pairs_flags, pairs_corpus, pairs_epoch, pairs_out);
    if (train_cmd->parsed()) return run_train(out, train_flags, train_corpus, train_valid, train_out);
    if (eval_cmd->parsed()) return run_evaluate(out, eval_ckpt, eval_vocab, eval_corpus, beam, eval_out);
    if (diag_cmd->parsed()) {
      return run_diagnose(out, diag_ckpt, diag_vocab, diag_corpus, diag_examples, diag_seed, diag_out);
    }
    if (sweep_cmd->parsed()) {
      return run_sweep(out, sweep_flags, sweep_corpus, sweep_valid, sweep_out, sweep_coefficient,
                       sweep_values, sweep_strategies);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace condigsum
