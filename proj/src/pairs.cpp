#include "condigsum/pairs.hpp"

#include <algorithm>
#include <numeric>

#include <nlohmann/json.hpp>

#include "condigsum/error.hpp"
#include "condigsum/rouge.hpp"

namespace condigsum {

using nlohmann::json;

bool Snippet::is_identity() const {
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] != i) return false;
  }
  return true;
}

bool Snippet::same_window(const Snippet& other) const {
  return dialogue_id == other.dialogue_id && start == other.start && length == other.length;
}

Snippet identity_snippet(const DialogueRecord& dialogue, std::size_t start, std::size_t length) {
  Snippet s{dialogue.id, start, length, std::vector<std::size_t>(length)};
  std::iota(s.order.begin(), s.order.end(), std::size_t{0});
  return s;
}

std::vector<Utterance> snippet_utterances(const DialogueRecord& dialogue, const Snippet& snippet) {
  if (snippet.length == 0 || snippet.start + snippet.length > dialogue.size()) {
    throw ValidationError("snippet [" + std::to_string(snippet.start) + ", +" +
                          std::to_string(snippet.length) + ") is out of bounds for dialogue '" +
                          dialogue.id + "'");
  }
  if (snippet.order.size() != snippet.length) {
    throw ValidationError("snippet order does not match its length");
  }
  std::vector<Utterance> out;
  out.reserve(snippet.length);
  for (std::size_t offset : snippet.order) {
    if (offset >= snippet.length) throw ValidationError("snippet order is not a permutation");
    out.push_back(dialogue.utterances[snippet.start + offset]);
  }
  return out;
}

std::vector<std::string> snippet_tokens(const DialogueRecord& dialogue, const Snippet& snippet) {
  return utterance_run_tokens(snippet_utterances(dialogue, snippet));
}

TokenSeq encode_snippet(const DialogueRecord& dialogue, const Snippet& snippet,
                        const Vocabulary& vocab, std::size_t max_positions) {
  return encode_utterances(snippet_utterances(dialogue, snippet), vocab, max_positions);
}

std::vector<Snippet> enumerate_snippets(const DialogueRecord& dialogue, std::size_t a,
                                        std::size_t b) {
  if (a < 1 || a > b) {
    throw ValidationError("window bounds must satisfy 1 <= a <= b (got a=" + std::to_string(a) +
                          ", b=" + std::to_string(b) + ")");
  }
  std::vector<Snippet> out;
  const std::size_t n = dialogue.size();
  for (std::size_t w = a; w <= std::min(b, n); ++w) {
    const std::size_t stride = std::max<std::size_t>(1, w / 2);
    for (std::size_t start = 0; start + w <= n; start += stride) {
      out.push_back(identity_snippet(dialogue, start, w));
    }
  }
  return out;
}

std::size_t candidate_count(std::size_t dialogue_size, std::size_t a, std::size_t b) {
  std::size_t total = 0;
  for (std::size_t w = a; w <= std::min(b, dialogue_size); ++w) {
    const std::size_t stride = std::max<std::size_t>(1, w / 2);
    total += (dialogue_size - w + 1 + stride - 1) / stride;
  }
  return total;
}

SnippetSelection select_positive_snippet(const SubSummary& sub_summary,
                                         const DialogueRecord& dialogue, std::size_t a,
                                         std::size_t b) {
  SnippetSelection result;
  result.candidates = enumerate_snippets(dialogue, a, b);
  if (result.candidates.empty()) {
    throw ValidationError("sub-summary " + std::to_string(sub_summary.index) +
                          " is unselectable: dialogue '" + dialogue.id + "' has no window in [" +
                          std::to_string(a) + ", " + std::to_string(b) + "]");
  }
  const auto reference = tokenize(sub_summary.text);
  std::size_t best = 0;
  double best_recall = -1.0;
  for (std::size_t i = 0; i < result.candidates.size(); ++i) {
    const double r = rouge_n(snippet_tokens(dialogue, result.candidates[i]), reference, 2).recall;
    if (r > best_recall) {
      best_recall = r;
      best = i;
    }
  }
  result.positive = result.candidates[best];
  result.recall = best_recall;
  return result;
}

std::vector<CoherencePair> make_coherence_pairs(const DialogueRecord& dialogue, std::size_t k,
                                                std::size_t n_pairs, Rng& rng) {
  if (n_pairs < 1) throw ValidationError("coherence pair count must be at least 1");
  if (k < 1) throw ValidationError("coherence window must be at least 1");
  const std::size_t window = std::min(k, dialogue.size());
  if (window < 2) return {};

  std::vector<std::size_t> starts(dialogue.size() - window + 1);
  std::iota(starts.begin(), starts.end(), std::size_t{0});
  const std::size_t count = std::min(n_pairs, starts.size());
  // Partial Fisher-Yates: the first `count` entries are a uniform sample without replacement.
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(starts[i], starts[i + uniform_index(rng, starts.size() - i)]);
  }

  std::vector<CoherencePair> pairs;
  for (std::size_t i = 0; i < count; ++i) {
    CoherencePair pair{identity_snippet(dialogue, starts[i], window), {}};
    Snippet negative = pair.positive;
    bool shuffled = false;
    for (int attempt = 0; attempt < kShuffleRetries && !shuffled; ++attempt) {
      shuffle(std::span<std::size_t>(negative.order), rng);
      shuffled = !negative.is_identity();
    }
    if (!shuffled) continue;
    pair.negative = std::move(negative);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

std::vector<SubSummaryPair> make_subsummary_pairs(const DialogueRecord& dialogue,
                                                  std::span<const SubSummary> subs,
                                                  std::size_t n_pairs, std::size_t a,
                                                  std::size_t b, Rng& rng) {
  std::vector<SubSummaryPair> pairs;
  if (n_pairs == 0 || subs.empty()) return pairs;
  // The candidate set depends only on the dialogue, so either every sub-summary
  // has a negative available or none has.
  if (candidate_count(dialogue.size(), a, b) < 2) return pairs;

  std::vector<std::size_t> picks(subs.size());
  std::iota(picks.begin(), picks.end(), std::size_t{0});
  const std::size_t count = std::min(n_pairs, picks.size());
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(picks[i], picks[i + uniform_index(rng, picks.size() - i)]);
  }

  for (std::size_t i = 0; i < count; ++i) {
    const SubSummary& sub = subs[picks[i]];
    auto selection = select_positive_snippet(sub, dialogue, a, b);
    std::size_t positive_index = 0;
    while (!(selection.candidates[positive_index] == selection.positive)) ++positive_index;
    std::size_t negative_index = uniform_index(rng, selection.candidates.size() - 1);
    if (negative_index >= positive_index) ++negative_index;
    pairs.push_back({sub, std::move(selection.positive),
                     std::move(selection.candidates[negative_index]), selection.recall});
  }
  return pairs;
}

namespace {

json snippet_json(const Snippet& s) {
  return {{"start", s.start}, {"length", s.length}, {"order", s.order}};
}

}  // namespace

json to_json(const CoherencePair& pair, const std::string& dialogue_id) {
  return {{"dialogue_id", dialogue_id},
          {"kind", "coherence"},
          {"positive", snippet_json(pair.positive)},
          {"negative", snippet_json(pair.negative)}};
}

json to_json(const SubSummaryPair& pair, const std::string& dialogue_id) {
  return {{"dialogue_id", dialogue_id},
          {"kind", "subsummary"},
          {"positive", snippet_json(pair.positive)},
          {"negative", snippet_json(pair.negative)},
          {"sub_summary_index", pair.sub_summary.index},
          {"positive_recall", pair.positive_recall}};
}

}  // namespace condigsum
