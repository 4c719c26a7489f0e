#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "condigsum/corpus.hpp"
#include "condigsum/losses.hpp"
#include "condigsum/model.hpp"
#include "condigsum/pairs.hpp"

namespace condigsum {

enum class Strategy { kAlternating, kSummed };
/// How w_co, w_su and w_main act in the alternating strategy.
enum class CoefficientMode { kRate, kLoss };
/// Whether the auxiliary sub-steps share Adam moments with the main one.
enum class AdamMoments { kShared, kPerTask };

struct TrainConfig {
  std::size_t k = 4;
  std::size_t a = 1;
  std::size_t b = 3;
  std::size_t n_co = 2;
  std::size_t n_su = 2;
  double delta_co = 1.0;
  double delta_su = 1.0;
  double learning_rate = 3e-4;
  std::size_t warmup_steps = 200;
  double w_co = 0.05;
  double w_su = 0.05;
  double w_main = 1.0;
  std::size_t max_tokens_per_batch = 800;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  Strategy strategy = Strategy::kAlternating;
  CoefficientMode coefficient_mode = CoefficientMode::kRate;
  AdamMoments adam_moments = AdamMoments::kShared;
  double min_match_recall = 0.1;
  /// 0 disables clipping.
  double grad_clip_norm = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t max_vocab = 300;
  ModelConfig model_config;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Fields absent from `j` keep the values already in `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
/// "paper" or "toy".
TrainConfig preset(const std::string& name);

std::string strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);

/// Linear warmup to `peak`, then peak * sqrt(warmup / step).
double lr_schedule(std::size_t step, double peak, std::size_t warmup_steps);

/// Greedy packing of a seeded shuffle; a batch closes before the source
/// length total would exceed max_tokens. Oversized items form singletons.
std::vector<std::vector<std::size_t>> batch_by_tokens(std::span<const std::size_t> lengths,
                                                      std::size_t max_tokens, Rng& rng);
std::vector<std::vector<std::size_t>> batch_by_tokens(std::span<const DialogueRecord> corpus,
                                                      const Vocabulary& vocab,
                                                      std::size_t max_positions,
                                                      std::size_t max_tokens, Rng& rng);

struct OptimizerState {
  std::vector<Tensor<float>> m;
  std::vector<Tensor<float>> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Coherence and sub-summary moments under AdamMoments::kPerTask; filled
  /// on first use. Empty when moments are shared.
  std::vector<OptimizerState> task_moments;

  OptimizerState() = default;
  OptimizerState(std::span<const Parameter<float>> params, double beta1, double beta2,
                 double epsilon);
};

/// Adam with bias correction on params[i] for i in `subset`; everything else,
/// including its moments, is left alone. Zeroes the subset's gradients.
/// Throws NumericError naming the first parameter with a non-finite gradient.
void adam_step(std::span<Parameter<float>> params, std::span<const std::size_t> subset,
               OptimizerState& state, double rate, double clip_norm = 0.0);

/// Encoded training material for one dialogue.
struct TrainInstance {
  TokenSeq source;
  TokenSeq target;
  std::vector<CoherenceExample> coherence;
  std::vector<SubSummaryExample> subsummary;
};

enum class Task : std::uint64_t { kCoherence = 1, kSubsummary = 2, kMain = 3 };

// Every random stream is derived from the run seed.
std::uint64_t init_seed(std::uint64_t seed);
std::uint64_t batching_seed(std::uint64_t seed, std::size_t epoch);
std::uint64_t pairs_seed(std::uint64_t seed, std::size_t epoch);
std::uint64_t dropout_seed(std::uint64_t seed, std::size_t epoch, std::size_t batch, Task task);

struct StepContext {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double rate = 0.0;
};

struct StepReport {
  LossBreakdown losses;
  std::vector<std::string> skipped_substeps;
};

/// Optional observer called after each sub-step that updated parameters.
using SubstepHook = std::function<void(Task, const Transformer<float>&)>;

std::vector<std::size_t> partition_indices(const Transformer<float>& model, Partition part);
std::vector<std::size_t> all_indices(const Transformer<float>& model);

/// Coherence, then sub-summary, then main update, each on a fresh gradient.
StepReport alternating_step(Transformer<float>& model, std::span<const TrainInstance* const> batch,
                            const TrainConfig& config, OptimizerState& state,
                            const StepContext& ctx, const SubstepHook& hook = {});

/// One backward of w_co L_co + w_su L_su + w_main L_main, one Adam update.
StepReport summed_step(Transformer<float>& model, std::span<const TrainInstance* const> batch,
                       const TrainConfig& config, OptimizerState& state, const StepContext& ctx);

/// Sub-summaries kept for training: split, then recall-filtered.
std::vector<SubSummary> training_sub_summaries(const DialogueRecord& dialogue,
                                               const TrainConfig& config);

/// Fresh pairs for one epoch; `subs[i]` are the filtered sub-summaries of
/// corpus[i].
std::vector<TrainInstance> build_instances(std::span<const DialogueRecord> corpus,
                                           std::span<const std::vector<SubSummary>> subs,
                                           const Vocabulary& vocab, const TrainConfig& config,
                                           std::size_t epoch);

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  LossBreakdown losses;
  double lr = 0.0;
  std::vector<std::string> skipped_substeps;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_main = 0.0;
  double train_coherence = 0.0;
  double train_subsummary = 0.0;
  std::optional<double> valid_main;
};

nlohmann::json to_json(const StepLog& s);
nlohmann::json to_json(const EpochLog& e);

struct TrainOptions {
  /// When set, checkpoints, the step log and the vocabulary go here.
  std::optional<std::string> out_dir;
  std::span<const DialogueRecord> valid;
};

struct TrainResult {
  Transformer<float> model;
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  std::optional<double> best_valid_main;
  std::size_t optimizer_steps = 0;
};

/// `config.model_config.vocab_size` is taken from `vocab`.
TrainResult train(std::span<const DialogueRecord> corpus, const Vocabulary& vocab,
                  const TrainConfig& config, const TrainOptions& options = {});

/// Eval-mode mean sequence NLL over whole dialogues.
double validation_main_loss(Transformer<float>& model, std::span<const DialogueRecord> corpus,
                            const Vocabulary& vocab);

}  // namespace condigsum
