#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace condigsum {

struct Utterance {
  std::string speaker;
  std::string text;

  bool operator==(const Utterance&) const = default;
};

/// Half-open utterance range [start, end) carrying one topic.
struct TopicSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string label;

  std::size_t size() const { return end - start; }
  bool operator==(const TopicSpan&) const = default;
};

struct DialogueRecord {
  std::string id;
  std::vector<Utterance> utterances;
  std::string summary;
  std::optional<std::vector<TopicSpan>> topic_spans;

  std::size_t size() const { return utterances.size(); }
  bool operator==(const DialogueRecord&) const = default;
};

struct SubSummary {
  std::string text;
  std::size_t index = 0;

  bool operator==(const SubSummary&) const = default;
};

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

/// Throws ValidationError if any record invariant is broken.
void validate(const DialogueRecord& dialogue);

// JSONL corpus I/O. Line numbers in errors are 1-based.
std::vector<DialogueRecord> parse_corpus(std::istream& in);
std::vector<DialogueRecord> load_corpus(const std::string& path);
nlohmann::json to_json(const DialogueRecord& dialogue);
DialogueRecord dialogue_from_json(const nlohmann::json& j);
void write_corpus(std::ostream& out, std::span<const DialogueRecord> corpus);
void save_corpus(const std::string& path, std::span<const DialogueRecord> corpus);

/// Splits at '.', '!' or '?' followed by whitespace or end of text.
/// Fragments without any alphanumeric character are dropped.
std::vector<SubSummary> split_sub_summaries(std::string_view summary);

/// Lowercased whitespace tokenization shared by the vocabulary, the encoder
/// inputs and ROUGE.
std::vector<std::string> tokenize(std::string_view text);

/// Tokens of one utterance as it is fed to the encoder: "speaker : text".
std::vector<std::string> utterance_tokens(const Utterance& u);

/// Tokens of a run of utterances, with "<sep>" between consecutive ones.
std::vector<std::string> utterance_run_tokens(std::span<const Utterance> utterances);

struct SubSummaryFilter {
  std::size_t window_min = 1;
  std::size_t window_max = 3;
  double min_match_recall = 0.1;
};

/// Keeps sub-summaries whose best ROUGE-2 recall against any candidate
/// snippet reaches the threshold. Summaries with fewer than two sentences
/// yield nothing.
std::vector<SubSummary> filter_sub_summaries(const DialogueRecord& dialogue,
                                             std::span<const SubSummary> subs,
                                             const SubSummaryFilter& filter);

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kSep = 4;
  static constexpr std::size_t kReserved = 5;

  Vocabulary();
  /// Reserved tokens followed by `tokens` in order. Duplicates are rejected.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  TokenId id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::span<const std::string> tokens() const { return tokens_; }

  /// One non-reserved token per line.
  void save(std::ostream& out) const;
  static Vocabulary load(std::istream& in);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

Vocabulary build_vocab(std::span<const DialogueRecord> corpus, std::size_t max_size);

TokenSeq encode_tokens(std::span<const std::string> tokens, const Vocabulary& vocab);
std::vector<std::string> decode_tokens(std::span<const TokenId> ids, const Vocabulary& vocab);

/// Encoder input for a run of utterances, truncated to max_positions.
TokenSeq encode_utterances(std::span<const Utterance> utterances, const Vocabulary& vocab,
                           std::size_t max_positions);

struct UtteranceRange {
  std::size_t start = 0;
  std::size_t length = 0;
};

/// Encoder input for the whole dialogue or for a contiguous range of it.
TokenSeq encode_dialogue(const DialogueRecord& dialogue, std::optional<UtteranceRange> span,
                         const Vocabulary& vocab, std::size_t max_positions);

/// Decoder target: BOS, summary tokens, EOS; at most max_positions long.
TokenSeq encode_summary(std::string_view text, const Vocabulary& vocab, std::size_t max_positions);

struct SynthOptions {
  std::size_t n_dialogues = 100;
  std::size_t min_topics = 2;
  std::size_t max_topics = 3;
  std::size_t min_utterances_per_topic = 2;
  std::size_t max_utterances_per_topic = 3;
  std::uint64_t seed = 1;
};

/// Generates dialogues made of topic blocks. Every topic owns a disjoint,
/// ordered list of content words; consecutive utterances inside a block
/// walk that list, and the summary has one sentence per block.
std::vector<DialogueRecord> synth_corpus(const SynthOptions& options);

/// Number of topics available to synth_corpus.
std::size_t synth_topic_count();

}  // namespace condigsum
