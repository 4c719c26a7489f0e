#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "condigsum/corpus.hpp"
#include "condigsum/model.hpp"
#include "condigsum/pairs.hpp"
#include "condigsum/rng.hpp"

namespace condigsum {

struct BeamConfig {
  std::size_t beam_size = 4;
  std::size_t max_decode_len = 64;
  double length_penalty = 1.0;

  void validate() const;
};

/// Generated tokens after BOS, ending with EOS when one was produced.
/// Finished hypotheses are ranked by log p / length^length_penalty; score ties
/// go to the lower token id.
TokenSeq beam_decode(Transformer<float>& model, std::span<const TokenId> source,
                     const BeamConfig& cfg);
TokenSeq greedy_decode(Transformer<float>& model, std::span<const TokenId> source,
                       std::size_t max_decode_len);

/// Decoded ids as words, with reserved tokens removed.
std::vector<std::string> decoded_words(std::span<const TokenId> ids, const Vocabulary& vocab);

struct RougeTriple {
  double r1 = 0.0;
  double r2 = 0.0;
  double rl = 0.0;
};

struct RougeGroup {
  RougeTriple mean;
  std::size_t count = 0;
};

struct RougeReport {
  RougeGroup overall;
  /// Summaries with one sub-summary, and with more than one.
  RougeGroup one;
  RougeGroup more;
  std::vector<RougeTriple> per_instance;
};

using Decoder = std::function<std::vector<std::string>(const DialogueRecord&)>;

/// F-measures of each decode against tokenize(summary).
RougeReport evaluate_rouge(std::span<const DialogueRecord> split, const Decoder& decode);
RougeReport evaluate_rouge(Transformer<float>& model, std::span<const DialogueRecord> split,
                           const Vocabulary& vocab, const BeamConfig& cfg);

struct CoherenceProbe {
  UtteranceRange range;
  double ordered = 0.0;
  /// Absent for single-utterance spans.
  std::optional<double> shuffled;
};

/// Eval-mode coherence score of a snippet.
double snippet_score(Transformer<float>& model, const DialogueRecord& dialogue,
                     const Snippet& snippet, const Vocabulary& vocab);

/// Seeded non-identity permutation of 0..n-1 (n >= 2).
std::vector<std::size_t> non_identity_permutation(std::size_t n, Rng& rng);

std::vector<CoherenceProbe> coherence_diagnostic(Transformer<float>& model,
                                                 const DialogueRecord& dialogue,
                                                 std::span<const UtteranceRange> spans,
                                                 const Vocabulary& vocab, Rng& rng);

struct DiagnosticMatrix {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  /// values[i][j]: snippet i, sub-summary j. Every column sums to 1.
  std::vector<std::vector<double>> values;
  std::vector<std::vector<double>> nll;
};

/// Column-wise softmax of -losses.
std::vector<std::vector<double>> column_softmax_of_negated(
    const std::vector<std::vector<double>>& losses);

DiagnosticMatrix correlation_matrix(Transformer<float>& model, const DialogueRecord& dialogue,
                                    std::span<const Snippet> snippets,
                                    std::span<const SubSummary> subs, const Vocabulary& vocab);

/// Number of columns whose argmax row equals the column index.
std::size_t diagonal_argmax_count(const DiagnosticMatrix& m);

struct SubstitutionExample {
  std::string dialogue_id;
  UtteranceRange range;
  std::size_t replaced_offset = 0;
  std::size_t replacement_utterance = 0;
  double original = 0.0;
  double substituted = 0.0;
};

struct SubstitutionResult {
  double mean_original = 0.0;
  double mean_substituted = 0.0;
  std::vector<SubstitutionExample> examples;
};

/// Template slot of an utterance: its first token. Stands in for the
/// dialogue-act type, which the corpus does not annotate.
std::string utterance_slot(const Utterance& u);

/// Builds n_examples (original, substituted) pairs from one dialogue. The
/// original is a whole topic span of >= 2 utterances; one of its utterances
/// is replaced by a same-slot utterance from another span.
SubstitutionResult substitution_probe(Transformer<float>& model, const DialogueRecord& dialogue,
                                      std::size_t n_examples, const Vocabulary& vocab, Rng& rng);
/// Cycles over the eligible dialogues, one example each, until n_examples.
SubstitutionResult substitution_probe(Transformer<float>& model,
                                      std::span<const DialogueRecord> corpus,
                                      std::size_t n_examples, const Vocabulary& vocab, Rng& rng);

/// One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
double sign_test_p_value(std::size_t wins, std::size_t losses);

struct DiagnosticsReport {
  std::vector<std::pair<std::string, CoherenceProbe>> probes;
  std::size_t ordered_wins = 0;
  std::size_t ordered_losses = 0;
  double mean_ordered = 0.0;
  double mean_shuffled = 0.0;
  double sign_test_p = 1.0;
  SubstitutionResult substitution;
  std::vector<std::pair<std::string, DiagnosticMatrix>> matrices;
  std::size_t diagonal_columns = 0;
  std::size_t total_columns = 0;
};

/// Runs the three probes over every dialogue with topic spans: ordered vs
/// shuffled scores for each multi-utterance topic span, the substitution
/// probe, and a topic-span x sub-summary matrix wherever the two counts agree.
DiagnosticsReport run_diagnostics(Transformer<float>& model, std::span<const DialogueRecord> corpus,
                                  const Vocabulary& vocab, std::size_t n_substitutions,
                                  std::uint64_t seed);

nlohmann::json to_json(const DiagnosticsReport& r);

nlohmann::json to_json(const RougeReport& r);
nlohmann::json to_json(const DiagnosticMatrix& m);
nlohmann::json to_json(const SubstitutionResult& r);
void write_matrix_csv(std::ostream& out, const DiagnosticMatrix& m);

}  // namespace condigsum
