#include "condigsum/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "condigsum/error.hpp"

namespace condigsum {

using nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("train config: " + msg); };
  if (a < 1 || a > b) fail("need 1 <= a <= b, got a=" + std::to_string(a) + " b=" + std::to_string(b));
  if (k < 1) fail("k must be >= 1");
  for (auto [value, name] : {std::pair{w_co, "w_co"}, std::pair{w_su, "w_su"},
                             std::pair{w_main, "w_main"}}) {
    if (!(value >= 0.0) || !std::isfinite(value)) fail(std::string(name) + " must be a finite value >= 0");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
  if (max_tokens_per_batch < 1) fail("max_tokens_per_batch must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1 must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2 must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) fail("adam_epsilon must be > 0");
  if (!(grad_clip_norm >= 0.0)) fail("grad_clip_norm must be >= 0");
  if (!(min_match_recall >= 0.0 && min_match_recall <= 1.0)) fail("min_match_recall must lie in [0, 1]");
  if (max_vocab <= Vocabulary::kReserved) fail("max_vocab must exceed the reserved tokens");
  ModelConfig mc = model_config;
  if (mc.vocab_size == 0) mc.vocab_size = max_vocab;
  mc.validate();
}

std::string strategy_name(Strategy s) { return s == Strategy::kAlternating ? "alternating" : "summed"; }

Strategy parse_strategy(const std::string& name) {
  if (name == "alternating") return Strategy::kAlternating;
  if (name == "summed") return Strategy::kSummed;
  throw ParseError("unknown strategy '" + name + "' (expected alternating or summed)");
}

json to_json(const TrainConfig& c) {
  return {{"k", c.k},
          {"a", c.a},
          {"b", c.b},
          {"n_co", c.n_co},
          {"n_su", c.n_su},
          {"delta_co", c.delta_co},
          {"delta_su", c.delta_su},
          {"learning_rate", c.learning_rate},
          {"warmup_steps", c.warmup_steps},
          {"w_co", c.w_co},
          {"w_su", c.w_su},
          {"w_main", c.w_main},
          {"max_tokens_per_batch", c.max_tokens_per_batch},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"strategy", strategy_name(c.strategy)},
          {"coefficient_mode", c.coefficient_mode == CoefficientMode::kRate ? "rate" : "loss"},
          {"adam_moments", c.adam_moments == AdamMoments::kShared ? "shared" : "per_task"},
          {"min_match_recall", c.min_match_recall},
          {"grad_clip_norm", c.grad_clip_norm},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_epsilon", c.adam_epsilon},
          {"max_vocab", c.max_vocab},
          {"model_config", to_json(c.model_config)}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ParseError("train config: expected a JSON object");
  static const std::set<std::string> known = {
      "k",          "a",           "b",           "n_co",          "n_su",
      "delta_co",   "delta_su",    "learning_rate", "warmup_steps", "w_co",
      "w_su",       "w_main",      "max_tokens_per_batch", "epochs", "seed",
      "strategy",   "coefficient_mode", "adam_moments", "min_match_recall", "grad_clip_norm", "adam_beta1",
      "adam_beta2", "adam_epsilon", "max_vocab",   "model_config"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ParseError("train config: unknown field '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("k", c.k);
    get("a", c.a);
    get("b", c.b);
    get("n_co", c.n_co);
    get("n_su", c.n_su);
    get("delta_co", c.delta_co);
    get("delta_su", c.delta_su);
    get("learning_rate", c.learning_rate);
    get("warmup_steps", c.warmup_steps);
    get("w_co", c.w_co);
    get("w_su", c.w_su);
    get("w_main", c.w_main);
    get("max_tokens_per_batch", c.max_tokens_per_batch);
    get("epochs", c.epochs);
    get("seed", c.seed);
    get("min_match_recall", c.min_match_recall);
    get("grad_clip_norm", c.grad_clip_norm);
    get("adam_beta1", c.adam_beta1);
    get("adam_beta2", c.adam_beta2);
    get("adam_epsilon", c.adam_epsilon);
    get("max_vocab", c.max_vocab);
    if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    if (j.contains("coefficient_mode")) {
      const auto mode = j.at("coefficient_mode").get<std::string>();
      if (mode == "rate") {
        c.coefficient_mode = CoefficientMode::kRate;
      } else if (mode == "loss") {
        c.coefficient_mode = CoefficientMode::kLoss;
      } else {
        throw ParseError("train config: unknown coefficient_mode '" + mode + "'");
      }
    }
    if (j.contains("adam_moments")) {
      const auto moments = j.at("adam_moments").get<std::string>();
      if (moments == "shared") {
        c.adam_moments = AdamMoments::kShared;
      } else if (moments == "per_task") {
        c.adam_moments = AdamMoments::kPerTask;
      } else {
        throw ParseError("train config: unknown adam_moments '" + moments + "'");
      }
    }
    if (j.contains("model_config")) {
      json merged = to_json(c.model_config);
      merged.update(j.at("model_config"));
      c.model_config = model_config_from_json(merged);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("train config: ") + e.what());
  }
  return c;
}

TrainConfig preset(const std::string& name) {
  TrainConfig c;
  if (name == "toy") {
    // From-scratch training at this size wants a higher rate than the
    // struct default, and auxiliary moments kept out of the main update.
    c.learning_rate = 1e-3;
    c.warmup_steps = 100;
    c.epochs = 20;
    c.adam_moments = AdamMoments::kPerTask;
    return c;
  }
  if (name == "paper") {
    c.k = 14;
    c.a = 5;
    c.b = 25;
    c.n_co = 2;
    c.n_su = 2;
    c.w_co = 0.005;
    c.w_su = 0.0001;
    c.w_main = 1.0;
    c.learning_rate = 4e-5;
    return c;
  }
  throw ValidationError("unknown preset '" + name + "' (expected paper or toy)");
}

double lr_schedule(std::size_t step, double peak, std::size_t warmup_steps) {
  if (step < 1) throw ValidationError("lr_schedule: step must be >= 1");
  if (warmup_steps == 0) return peak;
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup_steps);
  return step <= warmup_steps ? peak * s / w : peak * std::sqrt(w / s);
}

std::vector<std::vector<std::size_t>> batch_by_tokens(std::span<const std::size_t> lengths,
                                                      std::size_t max_tokens, Rng& rng) {
  std::vector<std::size_t> order(lengths.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(std::span<std::size_t>(order), rng);
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t tokens = 0;
  for (std::size_t i : order) {
    if (!current.empty() && tokens + lengths[i] > max_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(i);
    tokens += lengths[i];
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

std::vector<std::vector<std::size_t>> batch_by_tokens(std::span<const DialogueRecord> corpus,
                                                      const Vocabulary& vocab,
                                                      std::size_t max_positions,
                                                      std::size_t max_tokens, Rng& rng) {
  std::vector<std::size_t> lengths;
  lengths.reserve(corpus.size());
  for (const auto& d : corpus) {
    lengths.push_back(encode_dialogue(d, std::nullopt, vocab, max_positions).size());
  }
  return batch_by_tokens(lengths, max_tokens, rng);
}

OptimizerState::OptimizerState(std::span<const Parameter<float>> params, double b1, double b2,
                               double eps)
    : beta1(b1), beta2(b2), epsilon(eps) {
  for (const auto& p : params) {
    m.emplace_back(p.value.rows(), p.value.cols());
    v.emplace_back(p.value.rows(), p.value.cols());
  }
}

void adam_step(std::span<Parameter<float>> params, std::span<const std::size_t> subset,
               OptimizerState& state, double rate, double clip_norm) {
  if (state.m.size() != params.size()) {
    throw ValidationError("adam_step: optimizer state has " + std::to_string(state.m.size()) +
                          " buffers for " + std::to_string(params.size()) + " parameters");
  }
  double norm_sq = 0.0;
  for (std::size_t i : subset) {
    if (!params[i].grad.all_finite()) {
      throw NumericError("adam_step: non-finite gradient in parameter '" + params[i].name + "'");
    }
    if (clip_norm > 0.0) {
      for (float g : params[i].grad.data()) norm_sq += static_cast<double>(g) * g;
    }
  }
  double grad_scale = 1.0;
  if (clip_norm > 0.0) {
    const double norm = std::sqrt(norm_sq);
    if (norm > clip_norm) grad_scale = clip_norm / norm;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i : subset) {
    auto value = params[i].value.data();
    auto grad = params[i].grad.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = static_cast<double>(grad[j]) * grad_scale;
      const double mj = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      const double vj = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = rate * (mj / bc1) / (std::sqrt(vj / bc2) + state.epsilon);
      value[j] = static_cast<float>(value[j] - update);
    }
    params[i].zero_grad();
  }
}

std::uint64_t init_seed(std::uint64_t seed) { return derive_seed(seed, {0x1417}); }

std::uint64_t batching_seed(std::uint64_t seed, std::size_t epoch) {
  return derive_seed(seed, {0xba7c, epoch});
}

std::uint64_t pairs_seed(std::uint64_t seed, std::size_t epoch) {
  return derive_seed(seed, {0x9a15, epoch});
}

std::uint64_t dropout_seed(std::uint64_t seed, std::size_t epoch, std::size_t batch, Task task) {
  return derive_seed(seed, {0xd120, epoch, batch, static_cast<std::uint64_t>(task)});
}

std::vector<std::size_t> partition_indices(const Transformer<float>& model, Partition part) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    if (model.partition(i) == part) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> all_indices(const Transformer<float>& model) {
  std::vector<std::size_t> out(model.parameters().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  return out;
}

namespace {

const char* task_name(Task t) {
  switch (t) {
    case Task::kCoherence:
      return "coherence";
    case Task::kSubsummary:
      return "subsummary";
    case Task::kMain:
      return "main";
  }
  return "?";
}

[[noreturn]] void non_finite(const StepContext& ctx, Task task, double value) {
  throw NumericError("non-finite loss " + std::to_string(value) + " at epoch " +
                     std::to_string(ctx.epoch) + ", batch " + std::to_string(ctx.batch) +
                     ", sub-step " + task_name(task));
}

struct TaskResult {
  double loss = 0.0;
  std::size_t count = 0;
  bool contributed = false;
};

// Runs one task over the batch on per-instance tapes. With `weight` > 0 every
// backward is seeded so the accumulated gradient is weight times the batch
// loss; with `weight` == 0 only values are computed.
TaskResult run_task(Transformer<float>& model, std::span<const TrainInstance* const> batch,
                    const TrainConfig& config, const StepContext& ctx, Task task,
                    double weight) {
  Rng rng(dropout_seed(config.seed, ctx.epoch, ctx.batch, task));
  const bool track = weight > 0.0;
  TaskResult result;
  auto run = [&](auto&& make_loss, double seed) {
    Tape<float> tape(true, &rng, track);
    const Var loss = make_loss(tape);
    const double value = tape.scalar(loss);
    if (!std::isfinite(value)) non_finite(ctx, task, value);
    if (track) tape.backward(loss, static_cast<float>(seed));
    return value;
  };

  if (task == Task::kMain) {
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const TrainInstance* inst : batch) {
      result.loss += inv * run([&](Tape<float>& t) {
        return sequence_nll(model, t, inst->source, inst->target);
      }, weight * inv);
    }
    result.count = batch.size();
    result.contributed = true;
    return result;
  }

  std::size_t dialogues = 0;
  for (const TrainInstance* inst : batch) {
    const std::size_t n = task == Task::kCoherence ? inst->coherence.size() : inst->subsummary.size();
    if (n > 0) ++dialogues;
  }
  if (dialogues == 0) return result;
  for (const TrainInstance* inst : batch) {
    const std::size_t n = task == Task::kCoherence ? inst->coherence.size() : inst->subsummary.size();
    if (n == 0) continue;
    const double share = 1.0 / (static_cast<double>(dialogues) * static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      double value;
      if (task == Task::kCoherence) {
        value = run([&](Tape<float>& t) {
          return coherence_loss(model, t, inst->coherence[i], config.delta_co);
        }, weight * share);
      } else {
        value = run([&](Tape<float>& t) {
          return subsummary_loss(model, t, inst->subsummary[i], config.delta_su);
        }, weight * share);
      }
      result.loss += share * value;
    }
    result.count += n;
  }
  result.contributed = true;
  return result;
}

void record(LossBreakdown& losses, Task task, const TaskResult& r) {
  switch (task) {
    case Task::kCoherence:
      losses.coherence = r.loss;
      losses.coherence_pairs = r.count;
      break;
    case Task::kSubsummary:
      losses.subsummary = r.loss;
      losses.subsummary_pairs = r.count;
      break;
    case Task::kMain:
      losses.main = r.loss;
      losses.main_instances = r.count;
      break;
  }
}

}  // namespace

namespace {

OptimizerState& moments_for(OptimizerState& state, Task task, const TrainConfig& config,
                            Transformer<float>& model) {
  if (config.adam_moments == AdamMoments::kShared || task == Task::kMain) return state;
  if (state.task_moments.empty()) {
    for (int i = 0; i < 2; ++i) {
      state.task_moments.emplace_back(model.parameters(), state.beta1, state.beta2, state.epsilon);
    }
  }
  return state.task_moments[task == Task::kCoherence ? 0 : 1];
}

}  // namespace

StepReport alternating_step(Transformer<float>& model, std::span<const TrainInstance* const> batch,
                            const TrainConfig& config, OptimizerState& state,
                            const StepContext& ctx, const SubstepHook& hook) {
  if (batch.empty()) throw ValidationError("alternating_step: empty batch");
  StepReport report;
  const auto encoder = partition_indices(model, Partition::kEncoder);
  const auto everything = all_indices(model);
  const bool by_rate = config.coefficient_mode == CoefficientMode::kRate;
  struct Sub {
    Task task;
    double w;
    const std::vector<std::size_t>* subset;
  };
  const Sub subs[] = {{Task::kCoherence, config.w_co, &encoder},
                      {Task::kSubsummary, config.w_su, &everything},
                      {Task::kMain, config.w_main, &everything}};
  for (const Sub& sub : subs) {
    model.zero_grad();
    // A zero coefficient means no update at all; auxiliary losses are then
    // not even evaluated, the main loss still is.
    if (sub.w == 0.0 && sub.task != Task::kMain) {
      report.skipped_substeps.emplace_back(task_name(sub.task));
      continue;
    }
    const double seed_weight = sub.w == 0.0 ? 0.0 : (by_rate ? 1.0 : sub.w);
    const TaskResult r = run_task(model, batch, config, ctx, sub.task, seed_weight);
    record(report.losses, sub.task, r);
    if (!r.contributed || sub.w == 0.0) {
      report.skipped_substeps.emplace_back(task_name(sub.task));
      continue;
    }
    const double rate = by_rate ? ctx.rate * sub.w : ctx.rate;
    adam_step(model.parameters(), *sub.subset, moments_for(state, sub.task, config, model), rate,
              config.grad_clip_norm);
    if (hook) hook(sub.task, model);
  }
  model.zero_grad();
  return report;
}

StepReport summed_step(Transformer<float>& model, std::span<const TrainInstance* const> batch,
                       const TrainConfig& config, OptimizerState& state, const StepContext& ctx) {
  if (batch.empty()) throw ValidationError("summed_step: empty batch");
  StepReport report;
  model.zero_grad();
  // Coherence gradients can only reach encoder-side parameters, so the
  // encoder-only restriction holds without explicit masking.
  bool any = false;
  for (auto [task, w] : {std::pair{Task::kCoherence, config.w_co},
                         std::pair{Task::kSubsummary, config.w_su},
                         std::pair{Task::kMain, config.w_main}}) {
    if (w == 0.0 && task != Task::kMain) {
      report.skipped_substeps.emplace_back(task_name(task));
      continue;
    }
    const TaskResult r = run_task(model, batch, config, ctx, task, w);
    record(report.losses, task, r);
    if (!r.contributed) report.skipped_substeps.emplace_back(task_name(task));
    any = any || (r.contributed && w > 0.0);
  }
  if (any) {
    adam_step(model.parameters(), all_indices(model), state, ctx.rate, config.grad_clip_norm);
  }
  model.zero_grad();
  return report;
}

std::vector<SubSummary> training_sub_summaries(const DialogueRecord& dialogue,
                                               const TrainConfig& config) {
  const auto subs = split_sub_summaries(dialogue.summary);
  return filter_sub_summaries(dialogue, subs,
                              SubSummaryFilter{config.a, config.b, config.min_match_recall});
}

std::vector<TrainInstance> build_instances(std::span<const DialogueRecord> corpus,
                                           std::span<const std::vector<SubSummary>> subs,
                                           const Vocabulary& vocab, const TrainConfig& config,
                                           std::size_t epoch) {
  if (subs.size() != corpus.size()) {
    throw ValidationError("build_instances: sub-summary lists do not match the corpus");
  }
  const std::size_t max_pos = config.model_config.max_positions;
  Rng rng(pairs_seed(config.seed, epoch));
  std::vector<TrainInstance> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const DialogueRecord& d = corpus[i];
    TrainInstance inst;
    inst.source = encode_dialogue(d, std::nullopt, vocab, max_pos);
    inst.target = encode_summary(d.summary, vocab, max_pos);
    if (config.w_co > 0.0) {
      for (const auto& pair : make_coherence_pairs(d, config.k, config.n_co, rng)) {
        inst.coherence.push_back({encode_snippet(d, pair.positive, vocab, max_pos),
                                  encode_snippet(d, pair.negative, vocab, max_pos)});
      }
    }
    if (config.w_su > 0.0) {
      for (const auto& pair :
           make_subsummary_pairs(d, subs[i], config.n_su, config.a, config.b, rng)) {
        inst.subsummary.push_back({encode_snippet(d, pair.positive, vocab, max_pos),
                                   encode_snippet(d, pair.negative, vocab, max_pos),
                                   encode_summary(pair.sub_summary.text, vocab, max_pos)});
      }
    }
    out.push_back(std::move(inst));
  }
  return out;
}

json to_json(const StepLog& s) {
  return {{"epoch", s.epoch},
          {"step", s.step},
          {"sub_losses",
           {{"main", s.losses.main},
            {"coherence", s.losses.coherence},
            {"subsummary", s.losses.subsummary}}},
          {"lr", s.lr},
          {"skipped_substeps", s.skipped_substeps}};
}

json to_json(const EpochLog& e) {
  json j = {{"epoch", e.epoch},
            {"train_main", e.train_main},
            {"train_coherence", e.train_coherence},
            {"train_subsummary", e.train_subsummary}};
  j["valid_main"] = e.valid_main ? json(*e.valid_main) : json(nullptr);
  return j;
}

double validation_main_loss(Transformer<float>& model, std::span<const DialogueRecord> corpus,
                            const Vocabulary& vocab) {
  if (corpus.empty()) throw ValidationError("validation_main_loss: empty corpus");
  const std::size_t max_pos = model.config().max_positions;
  double total = 0.0;
  for (const auto& d : corpus) {
    total += sequence_nll_value(model, encode_dialogue(d, std::nullopt, vocab, max_pos),
                                encode_summary(d.summary, vocab, max_pos));
  }
  return total / static_cast<double>(corpus.size());
}

TrainResult train(std::span<const DialogueRecord> corpus, const Vocabulary& vocab,
                  const TrainConfig& config_in, const TrainOptions& options) {
  if (corpus.empty()) throw ValidationError("train: empty corpus");
  TrainConfig config = config_in;
  config.model_config.vocab_size = vocab.size();
  config.validate();

  TrainResult result{Transformer<float>(config.model_config, init_seed(config.seed)), {}, {}, {}, 0};
  Transformer<float>& model = result.model;
  OptimizerState state(model.parameters(), config.adam_beta1, config.adam_beta2,
                       config.adam_epsilon);

  std::ofstream step_log;
  std::ofstream epoch_log;
  fs::path out;
  if (options.out_dir) {
    out = *options.out_dir;
    fs::create_directories(out);
    step_log.open(out / "train_log.jsonl");
    epoch_log.open(out / "epochs.jsonl");
    if (!step_log || !epoch_log) throw Error("cannot write logs in '" + out.string() + "'");
    vocab.save((out / "vocab.txt").string());
    std::ofstream(out / "config.json") << to_json(config).dump(2) << '\n';
  }

  std::vector<std::vector<SubSummary>> subs;
  subs.reserve(corpus.size());
  std::vector<std::size_t> lengths;
  lengths.reserve(corpus.size());
  for (const auto& d : corpus) {
    subs.push_back(config.w_su > 0.0 ? training_sub_summaries(d, config) : std::vector<SubSummary>{});
    lengths.push_back(encode_dialogue(d, std::nullopt, vocab, config.model_config.max_positions).size());
  }

  std::size_t global_batch = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto instances = build_instances(corpus, subs, vocab, config, epoch);
    Rng batch_rng(batching_seed(config.seed, epoch));
    const auto batches = batch_by_tokens(lengths, config.max_tokens_per_batch, batch_rng);
    EpochLog elog;
    elog.epoch = epoch;
    std::size_t co_batches = 0;
    std::size_t su_batches = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      std::vector<const TrainInstance*> batch;
      batch.reserve(batches[bi].size());
      for (std::size_t idx : batches[bi]) batch.push_back(&instances[idx]);
      ++global_batch;
      const StepContext ctx{epoch, bi, lr_schedule(global_batch, config.learning_rate, config.warmup_steps)};
      StepReport report = config.strategy == Strategy::kAlternating
                              ? alternating_step(model, batch, config, state, ctx)
                              : summed_step(model, batch, config, state, ctx);
      StepLog slog{epoch, global_batch, report.losses, ctx.rate, std::move(report.skipped_substeps)};
      elog.train_main += slog.losses.main;
      if (slog.losses.coherence_pairs > 0) {
        elog.train_coherence += slog.losses.coherence;
        ++co_batches;
      }
      if (slog.losses.subsummary_pairs > 0) {
        elog.train_subsummary += slog.losses.subsummary;
        ++su_batches;
      }
      if (step_log.is_open()) step_log << to_json(slog).dump() << '\n';
      spdlog::debug("epoch {} batch {} main {:.4f} coherence {:.4f} subsummary {:.4f} lr {:.3g}",
                    epoch, bi, slog.losses.main, slog.losses.coherence, slog.losses.subsummary,
                    slog.lr);
      result.steps.push_back(std::move(slog));
    }
    elog.train_main /= static_cast<double>(std::max<std::size_t>(batches.size(), 1));
    if (co_batches > 0) elog.train_coherence /= static_cast<double>(co_batches);
    if (su_batches > 0) elog.train_subsummary /= static_cast<double>(su_batches);
    if (!options.valid.empty()) elog.valid_main = validation_main_loss(model, options.valid, vocab);
    spdlog::info("epoch {}/{}: main {:.4f} coherence {:.4f} subsummary {:.4f}{}", epoch,
                 config.epochs, elog.train_main, elog.train_coherence, elog.train_subsummary,
                 elog.valid_main ? fmt::format(" valid {:.4f}", *elog.valid_main) : "");
    if (options.out_dir) {
      char name[48];
      std::snprintf(name, sizeof name, "checkpoint-epoch%03zu.bin", epoch);
      save_checkpoint(model, (out / name).string());
      if (elog.valid_main && (!result.best_valid_main || *elog.valid_main < *result.best_valid_main)) {
        save_checkpoint(model, (out / "best.bin").string());
      }
      epoch_log << to_json(elog).dump() << '\n';
    }
    if (elog.valid_main && (!result.best_valid_main || *elog.valid_main < *result.best_valid_main)) {
      result.best_valid_main = elog.valid_main;
    }
    result.epochs.push_back(elog);
  }
  result.optimizer_steps = state.step;
  for (const auto& t : state.task_moments) result.optimizer_steps += t.step;
  if (options.out_dir) save_checkpoint(model, (out / "model.bin").string());
  return result;
}

}  // namespace condigsum
