// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any fails. Pass criterion numbers to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "condigsum/cli.hpp"
#include "condigsum/corpus.hpp"
#include "condigsum/error.hpp"
#include "condigsum/evalgen.hpp"
#include "condigsum/losses.hpp"
#include "condigsum/model.hpp"
#include "condigsum/pairs.hpp"
#include "condigsum/rouge.hpp"
#include "condigsum/trainer.hpp"
#include "helpers.hpp"

using namespace condigsum;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------- 1

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

// Snippet text as the encoder sees it: "speaker : words" joined by <sep>.
std::vector<std::string> oracle_snippet_tokens(const DialogueRecord& d, std::size_t start,
                                               std::size_t w) {
  std::vector<std::string> out;
  for (std::size_t i = start; i < start + w; ++i) {
    if (i > start) out.push_back("<sep>");
    out.push_back(d.utterances[i].speaker);
    out.push_back(":");
    for (auto& t : words_of(d.utterances[i].text)) out.push_back(t);
  }
  return out;
}

double oracle_bigram_recall(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
  if (ref.size() < 2) return 0.0;
  std::vector<bool> used(cand.size() > 0 ? cand.size() - 1 : 0, false);
  std::size_t hits = 0;
  // Greedy matching of identical bigrams equals the clipped count.
  for (std::size_t j = 0; j + 1 < ref.size(); ++j) {
    for (std::size_t i = 0; i + 1 < cand.size(); ++i) {
      if (!used[i] && cand[i] == ref[j] && cand[i + 1] == ref[j + 1]) {
        used[i] = true;
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(ref.size() - 1);
}

Outcome criterion1() {
  const auto t0 = Clock::now();
  Rng rng(101);
  const std::vector<std::string> lexicon{"the", "cat", "dog", "sat", "on", "mat", "and", "ran", "far", "a", "red", "hat"};
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 12);
    std::vector<std::string> texts;
    for (std::size_t i = 0; i < n; ++i) {
      std::string text;
      const std::size_t len = 1 + uniform_index(rng, 6);
      for (std::size_t k = 0; k < len; ++k) text += (k ? " " : "") + lexicon[uniform_index(rng, lexicon.size())];
      texts.push_back(text);
    }
    const auto d = testutil::dialogue("d" + std::to_string(trial), texts);
    const std::size_t b = 1 + uniform_index(rng, 6);
    const std::size_t a = 1 + uniform_index(rng, b);
    std::string summary;
    const std::size_t slen = 2 + uniform_index(rng, 6);
    for (std::size_t k = 0; k < slen; ++k) {
      summary += (k ? " " : "") + (uniform_index(rng, 4) == 0 ? std::string("ann")
                                                             : lexicon[uniform_index(rng, lexicon.size())]);
    }
    const SubSummary sub{summary, 0};

    // Exhaustive scan over every (start, w); keep the windows on the
    // half-window stride grid and take the first maximum in (w, start) order.
    double best = -1.0;
    std::size_t best_start = 0, best_w = 0;
    for (std::size_t w = a; w <= std::min(b, n); ++w) {
      for (std::size_t start = 0; start + w <= n; ++start) {
        if (start % std::max<std::size_t>(1, w / 2) != 0) continue;
        const double r = oracle_bigram_recall(oracle_snippet_tokens(d, start, w), words_of(summary));
        if (r > best) {
          best = r;
          best_start = start;
          best_w = w;
        }
      }
    }
    if (a > n) {
      bool threw = false;
      try {
        select_positive_snippet(sub, d, a, b);
      } catch (const ValidationError&) {
        threw = true;
      }
      if (!threw) ++mismatches;
      continue;
    }
    const auto sel = select_positive_snippet(sub, d, a, b);
    if (sel.positive.start != best_start || sel.positive.length != best_w ||
        std::abs(sel.recall - best) > 1e-12) {
      ++mismatches;
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 10.0,
          fmt::format("200 dialogues, {} mismatches, {:.2f}s (limit 10s)", mismatches, secs)};
}

// ---------------------------------------------------------------- 2

std::size_t brute_lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  // Every subsequence of `a`, checked for containment in `b`.
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
    const std::size_t bits = static_cast<std::size_t>(__builtin_popcount(mask));
    if (bits <= best) continue;
    std::size_t j = 0;
    bool ok = true;
    for (std::size_t i = 0; i < a.size() && ok; ++i) {
      if (!(mask & (1u << i))) continue;
      while (j < b.size() && b[j] != a[i]) ++j;
      if (j == b.size()) ok = false;
      else ++j;
    }
    if (ok) best = bits;
  }
  return best;
}

std::size_t brute_overlap(const std::vector<std::string>& c, const std::vector<std::string>& r, std::size_t n) {
  auto grams = [n](const std::vector<std::string>& t) {
    std::vector<std::vector<std::string>> g;
    for (std::size_t i = 0; i + n <= t.size(); ++i) g.emplace_back(t.begin() + i, t.begin() + i + n);
    return g;
  };
  const auto cg = grams(c), rg = grams(r);
  std::set<std::vector<std::string>> distinct(rg.begin(), rg.end());
  std::size_t total = 0;
  for (const auto& g : distinct) {
    total += std::min(std::count(cg.begin(), cg.end(), g), std::count(rg.begin(), rg.end(), g));
  }
  return total;
}

bool close_score(const RougeScore& s, double overlap, double c_total, double r_total) {
  const double p = c_total > 0 ? overlap / c_total : 0.0;
  const double r = r_total > 0 ? overlap / r_total : 0.0;
  const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  return std::abs(s.precision - p) <= 1e-9 && std::abs(s.recall - r) <= 1e-9 && std::abs(s.f1 - f) <= 1e-9;
}

Outcome criterion2() {
  Rng rng(202);
  const std::vector<std::string> lex{"a", "b", "c", "d", "e"};
  std::size_t bad = 0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::string> c(uniform_index(rng, 13)), r(uniform_index(rng, 13));
    for (auto& w : c) w = lex[uniform_index(rng, lex.size())];
    for (auto& w : r) w = lex[uniform_index(rng, lex.size())];
    for (std::size_t n : {1u, 2u}) {
      const double cn = c.size() >= n ? static_cast<double>(c.size() - n + 1) : 0.0;
      const double rn = r.size() >= n ? static_cast<double>(r.size() - n + 1) : 0.0;
      if (!close_score(rouge_n(c, r, n), static_cast<double>(brute_overlap(c, r, n)), cn, rn)) ++bad;
    }
    if (!close_score(rouge_l(c, r), static_cast<double>(brute_lcs(c, r)), static_cast<double>(c.size()),
                     static_cast<double>(r.size()))) {
      ++bad;
    }
  }
  return {bad == 0, fmt::format("500 pairs x (R-1, R-2, R-L), {} disagreements beyond 1e-9", bad)};
}

// ---------------------------------------------------------------- 3

struct ToyData {
  std::vector<DialogueRecord> corpus;
  Vocabulary vocab;
};

ToyData toy_data(std::size_t n, std::uint64_t seed) {
  SynthOptions o;
  o.n_dialogues = n;
  o.seed = seed;
  ToyData t{synth_corpus(o), {}};
  t.vocab = build_vocab(t.corpus, preset("toy").max_vocab);
  return t;
}

Outcome criterion3() {
  const auto t0 = Clock::now();
  const auto data = toy_data(8, 303);
  TrainConfig cfg = preset("toy");
  cfg.model_config.vocab_size = data.vocab.size();
  cfg.model_config.dropout = 0.0;
  auto model = Transformer<float>(cfg.model_config, init_seed(1)).cast<double>();

  const auto& d = data.corpus[0];
  const std::size_t maxp = cfg.model_config.max_positions;
  const auto subs = split_sub_summaries(d.summary);
  const TokenSeq src = encode_dialogue(d, UtteranceRange{0, 3}, data.vocab, maxp);
  const TokenSeq tgt = encode_summary(subs[0].text, data.vocab, maxp);
  const Snippet pos = identity_snippet(d, 0, 3);
  Snippet neg = pos;
  neg.order = {2, 0, 1};
  const CoherenceExample co{encode_snippet(d, pos, data.vocab, maxp), encode_snippet(d, neg, data.vocab, maxp)};
  const SubSummaryExample su{encode_snippet(d, pos, data.vocab, maxp),
                             encode_snippet(d, identity_snippet(d, 2, 2), data.vocab, maxp), tgt};

  // Eight seeded coordinates per parameter tensor, every tensor covered.
  Rng rng(33);
  double worst[3] = {0, 0, 0};
  std::string worst_name[3];
  std::size_t checked = 0, zero = 0;
  const std::function<Var(Tape<double>&)> losses[3] = {
      [&](Tape<double>& t) { return sequence_nll(model, t, src, tgt); },
      [&](Tape<double>& t) { return coherence_loss(model, t, co); },
      [&](Tape<double>& t) { return subsummary_loss(model, t, su); }};
  for (std::size_t pi = 0; pi < model.parameters().size(); ++pi) {
    auto& param = model.parameters()[pi];
    std::vector<std::size_t> coords;
    for (int k = 0; k < 8; ++k) coords.push_back(uniform_index(rng, param.value.size()));
    for (int l = 0; l < 3; ++l) {
      const auto r = grad_check(losses[l], param, coords);
      checked += coords.size();
      zero += r.zero_coordinates;
      if (r.max_relative_error > worst[l]) {
        worst[l] = r.max_relative_error;
        worst_name[l] = param.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = worst[0] <= 1e-5 && worst[1] <= 1e-5 && worst[2] <= 1e-5 && secs < 120.0;
  return {ok, fmt::format("max rel err nll {:.2e} ({}), coherence {:.2e} ({}), subsummary {:.2e} ({}); "
                          "{} coordinate checks ({} with both gradients below {:.0e}), {:.1f}s (limit 1e-5, 120s)",
                          worst[0], worst_name[0], worst[1], worst_name[1], worst[2], worst_name[2],
                          checked, zero, kGradZeroTolerance, secs)};
}

// ---------------------------------------------------------------- 4

Outcome criterion4() {
  Rng rng(404);
  std::size_t bound = 0, shift = 0, mono = 0;
  for (int i = 0; i < 1000; ++i) {
    const double x = (uniform_real(rng) - 0.5) * 16.0;
    const double y = (uniform_real(rng) - 0.5) * 16.0;
    const double c = (uniform_real(rng) - 0.5) * 200.0;
    const double dx = 0.01 + uniform_real(rng);
    const double co = coherence_margin(x, y), su = subsummary_margin(x, y);
    if (!(co > 0 && co < 2 && su > 0 && su < 2)) ++bound;
    if (std::abs(coherence_margin(x + c, y + c) - co) > 1e-6 || std::abs(subsummary_margin(x + c, y + c) - su) > 1e-6) ++shift;
    // Coherence falls as y_pos - y_neg grows; sub-summary falls as L_neg - L_pos grows.
    if (!(coherence_margin(x + dx, y) < co) || !(subsummary_margin(x, y + dx) < su)) ++mono;
  }
  return {bound + shift + mono == 0,
          fmt::format("1000 pairs: {} bound, {} shift, {} monotonicity violations", bound, shift, mono)};
}

// ---------------------------------------------------------------- 5

Outcome criterion5() {
  const auto data = toy_data(60, 505);
  TrainConfig cfg = preset("toy");
  cfg.model_config.vocab_size = data.vocab.size();
  Transformer<float> model(cfg.model_config, init_seed(cfg.seed));
  OptimizerState state(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
  const auto decoder = partition_indices(model, Partition::kDecoder);

  std::vector<std::vector<SubSummary>> subs;
  for (const auto& d : data.corpus) subs.push_back(training_sub_summaries(d, cfg));
  std::vector<Tensor<float>> snapshot;
  std::size_t coherence_updates = 0, violations = 0, steps = 0;
  const SubstepHook hook = [&](Task task, const Transformer<float>& m) {
    if (task == Task::kCoherence) {
      ++coherence_updates;
      for (std::size_t k = 0; k < decoder.size(); ++k) {
        if (!(m.parameters()[decoder[k]].value == snapshot[k])) ++violations;
      }
    }
    snapshot.clear();
    for (std::size_t i : decoder) snapshot.push_back(m.parameters()[i].value);
  };
  for (std::size_t epoch = 1; steps < 50; ++epoch) {
    const auto inst = build_instances(data.corpus, subs, data.vocab, cfg, epoch);
    Rng brng(batching_seed(cfg.seed, epoch));
    const auto batches = batch_by_tokens(data.corpus, data.vocab, cfg.model_config.max_positions,
                                         cfg.max_tokens_per_batch, brng);
    for (std::size_t bi = 0; bi < batches.size() && steps < 50; ++bi) {
      std::vector<const TrainInstance*> batch;
      for (std::size_t i : batches[bi]) batch.push_back(&inst[i]);
      snapshot.clear();
      for (std::size_t i : decoder) snapshot.push_back(model.parameters()[i].value);
      ++steps;
      alternating_step(model, batch, cfg, state, {epoch, bi, lr_schedule(steps, cfg.learning_rate, cfg.warmup_steps)}, hook);
    }
  }
  return {violations == 0 && coherence_updates == 50,
          fmt::format("{} steps, {} coherence updates, {} decoder tensors changed by them", steps,
                      coherence_updates, violations)};
}

// ---------------------------------------------------------------- 6

Outcome criterion6() {
  const auto data = toy_data(40, 606);
  TrainConfig cfg = preset("toy");
  cfg.w_co = 0.0;
  cfg.w_su = 0.0;
  cfg.epochs = 2;
  const auto trained = train(data.corpus, data.vocab, cfg).model;

  // Plain seq2seq loop with the same seeds.
  ModelConfig mc = cfg.model_config;
  mc.vocab_size = data.vocab.size();
  Transformer<float> model(mc, init_seed(cfg.seed));
  OptimizerState state(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
  const auto everything = all_indices(model);
  std::size_t global = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng brng(batching_seed(cfg.seed, epoch));
    const auto batches = batch_by_tokens(data.corpus, data.vocab, mc.max_positions, cfg.max_tokens_per_batch, brng);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      ++global;
      Rng drop(dropout_seed(cfg.seed, epoch, bi, Task::kMain));
      for (std::size_t i : batches[bi]) {
        const auto& d = data.corpus[i];
        Tape<float> tape(true, &drop);
        const Var loss = sequence_nll(model, tape, encode_dialogue(d, std::nullopt, data.vocab, mc.max_positions),
                                      encode_summary(d.summary, data.vocab, mc.max_positions));
        tape.backward(loss, 1.0f / static_cast<float>(batches[bi].size()));
      }
      adam_step(model.parameters(), everything, state, lr_schedule(global, cfg.learning_rate, cfg.warmup_steps));
    }
  }
  std::size_t differing = 0;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    if (!(model.parameters()[i].value == trained.parameters()[i].value)) ++differing;
  }
  return {differing == 0, fmt::format("{} optimizer steps, {} of {} parameter tensors differ bitwise", global,
                                      differing, model.parameters().size())};
}

// ---------------------------------------------------------------- 7

Outcome criterion7() {
  const auto t0 = Clock::now();
  SynthOptions o;
  o.n_dialogues = 500;
  o.seed = 7;
  o.min_topics = 2;
  o.max_topics = 3;
  const auto all = synth_corpus(o);
  const std::vector<DialogueRecord> train_split(all.begin(), all.begin() + 400);
  const std::vector<DialogueRecord> held_out(all.begin() + 400, all.end());
  const TrainConfig full_cfg = preset("toy");
  const Vocabulary vocab = build_vocab(train_split, full_cfg.max_vocab);
  TrainConfig base_cfg = full_cfg;
  base_cfg.w_co = 0.0;
  base_cfg.w_su = 0.0;

  auto full = train(train_split, vocab, full_cfg, {std::nullopt, held_out});
  auto base = train(train_split, vocab, base_cfg, {std::nullopt, held_out});
  const BeamConfig beam;
  const auto full_rouge = evaluate_rouge(full.model, held_out, vocab, beam);
  const auto base_rouge = evaluate_rouge(base.model, held_out, vocab, beam);
  const auto diag = run_diagnostics(full.model, held_out, vocab, 70, 7);
  const double secs = seconds_since(t0);

  const bool a = full_rouge.overall.mean.r2 >= base_rouge.overall.mean.r2;
  const std::size_t pairs = diag.ordered_wins + diag.ordered_losses;
  const bool b = pairs >= 100 && diag.sign_test_p < 0.05 && diag.mean_ordered > diag.mean_shuffled;
  const bool c = diag.substitution.examples.size() == 70 &&
                 diag.substitution.mean_original > diag.substitution.mean_substituted;
  const bool d = 2 * diag.diagonal_columns > diag.total_columns;
  const bool budget = secs <= 1800.0;
  return {a && b && c && d && budget,
          fmt::format("vocab {}; (a) R-2 F1 full {:.4f} vs baseline {:.4f} [{}]; "
                      "(b) ordered {:.3f} vs shuffled {:.3f}, {}/{} wins, p={:.2e} [{}]; "
                      "(c) original {:.3f} vs substituted {:.3f} over {} [{}]; "
                      "(d) diagonal {}/{} columns [{}]; {:.0f}s (limit 1800s)",
                      vocab.size(), full_rouge.overall.mean.r2, base_rouge.overall.mean.r2, a ? "ok" : "FAIL",
                      diag.mean_ordered, diag.mean_shuffled, diag.ordered_wins, pairs, diag.sign_test_p,
                      b ? "ok" : "FAIL", diag.substitution.mean_original, diag.substitution.mean_substituted,
                      diag.substitution.examples.size(), c ? "ok" : "FAIL", diag.diagonal_columns,
                      diag.total_columns, d ? "ok" : "FAIL", secs)};
}

// ---------------------------------------------------------------- 8 and 9

int quiet_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "condigsum");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != 0) spdlog::error("cli failed: {}", err.str());
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome criterion8() {
  testutil::TempDir dir;
  const auto data = toy_data(48, 808);
  save_corpus(dir / "train.jsonl", std::span(data.corpus).first(40));
  save_corpus(dir / "valid.jsonl", std::span(data.corpus).subspan(40));
  if (quiet_cli({"sweep", "--preset", "toy", "--epochs", "2", "--seed", "3", "--corpus", dir / "train.jsonl",
                 "--valid", dir / "valid.jsonl", "--out", dir / "sweep", "--coefficient", "w_co", "--values",
                 "0.01,0.05", "--strategies", "alternating,summed"}) != 0) {
    return {false, "sweep command failed"};
  }
  std::istringstream csv(slurp(dir.path() / "sweep" / "sweep.csv"));
  std::string line;
  std::getline(csv, line);
  std::map<std::string, std::vector<double>> valid;
  std::set<std::string> seeds;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 7) return {false, "malformed sweep row: " + line};
    seeds.insert(f[3]);
    valid[f[2]].push_back(std::stod(f[5]));
  }
  bool ok = valid["alternating"].size() == 2 && valid["summed"].size() == 2 && seeds.size() == 1;
  std::string detail;
  for (std::size_t i = 0; ok && i < 2; ++i) {
    const double a = valid["alternating"][i], s = valid["summed"][i];
    ok = std::isfinite(a) && std::isfinite(s);
    detail += fmt::format("w_co={}: alternating {:.4f}, summed {:.4f} ({} lower); ", i == 0 ? "0.01" : "0.05", a, s,
                          a < s ? "alternating" : "summed");
  }
  return {ok, detail + "same seed for every row; ordering reported, not asserted"};
}

Outcome criterion9() {
  testutil::TempDir dir;
  const auto data = toy_data(40, 909);
  save_corpus(dir / "train.jsonl", data.corpus);
  for (const char* run : {"r1", "r2"}) {
    if (quiet_cli({"train", "--preset", "toy", "--epochs", "2", "--seed", "11", "--threads", "1", "--corpus",
                   dir / "train.jsonl", "--valid", dir / "train.jsonl", "--out", dir / run}) != 0) {
      return {false, "train command failed"};
    }
  }
  std::size_t files = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(dir.path() / "r1")) {
    if (entry.path().extension() != ".bin") continue;
    ++files;
    if (slurp(entry.path()) != slurp(dir.path() / "r2" / entry.path().filename())) ++differing;
  }
  return {files >= 3 && differing == 0, fmt::format("{} checkpoint files compared, {} differ", files, differing)};
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::err);
  configure_logging_from_env();
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4}, {5, criterion5},
      {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& [id, run] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
