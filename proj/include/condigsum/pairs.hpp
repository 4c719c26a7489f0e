#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "condigsum/corpus.hpp"
#include "condigsum/rng.hpp"

namespace condigsum {

/// A window of `length` consecutive utterances starting at `start`, presented
/// in `order` (a permutation of 0..length-1; identity for positives).
struct Snippet {
  std::string dialogue_id;
  std::size_t start = 0;
  std::size_t length = 0;
  std::vector<std::size_t> order;

  bool is_identity() const;
  /// Same window, ignoring order.
  bool same_window(const Snippet& other) const;
  bool operator==(const Snippet&) const = default;
};

Snippet identity_snippet(const DialogueRecord& dialogue, std::size_t start, std::size_t length);

/// Utterances of the snippet in presentation order.
std::vector<Utterance> snippet_utterances(const DialogueRecord& dialogue, const Snippet& snippet);
std::vector<std::string> snippet_tokens(const DialogueRecord& dialogue, const Snippet& snippet);
TokenSeq encode_snippet(const DialogueRecord& dialogue, const Snippet& snippet,
                        const Vocabulary& vocab, std::size_t max_positions);

struct CoherencePair {
  Snippet positive;
  Snippet negative;
};

struct SubSummaryPair {
  SubSummary sub_summary;
  Snippet positive;
  Snippet negative;
  double positive_recall = 0.0;
};

/// Candidate windows for sizes a..min(b, |dialogue|), stride max(1, w/2),
/// ordered by size then start. Throws ValidationError unless 1 <= a <= b.
std::vector<Snippet> enumerate_snippets(const DialogueRecord& dialogue, std::size_t a,
                                        std::size_t b);

/// Closed-form size of enumerate_snippets' output.
std::size_t candidate_count(std::size_t dialogue_size, std::size_t a, std::size_t b);

struct SnippetSelection {
  Snippet positive;
  double recall = 0.0;
  std::vector<Snippet> candidates;
};

/// Window with the highest ROUGE-2 recall of the sub-summary; ties go to the
/// smaller window, then the earlier start. Throws ValidationError when there
/// are no candidates.
SnippetSelection select_positive_snippet(const SubSummary& sub_summary,
                                         const DialogueRecord& dialogue, std::size_t a,
                                         std::size_t b);

inline constexpr int kShuffleRetries = 16;

std::vector<CoherencePair> make_coherence_pairs(const DialogueRecord& dialogue, std::size_t k,
                                                std::size_t n_pairs, Rng& rng);

std::vector<SubSummaryPair> make_subsummary_pairs(const DialogueRecord& dialogue,
                                                  std::span<const SubSummary> subs,
                                                  std::size_t n_pairs, std::size_t a,
                                                  std::size_t b, Rng& rng);

// Pair-dump JSONL records.
nlohmann::json to_json(const CoherencePair& pair, const std::string& dialogue_id);
nlohmann::json to_json(const SubSummaryPair& pair, const std::string& dialogue_id);

}  // namespace condigsum
