#include "condigsum/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "condigsum/error.hpp"
#include "condigsum/pairs.hpp"
#include "condigsum/rouge.hpp"

namespace condigsum {

using nlohmann::json;

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

const char* const kReservedTokens[Vocabulary::kReserved] = {"<pad>", "<s>", "</s>", "<unk>",
                                                            "<sep>"};

}  // namespace

void validate(const DialogueRecord& d) {
  if (d.id.empty()) throw ValidationError("dialogue id is empty");
  if (d.utterances.empty()) throw ValidationError("dialogue '" + d.id + "' has no utterances");
  for (std::size_t i = 0; i < d.utterances.size(); ++i) {
    const auto& u = d.utterances[i];
    if (trim(u.speaker).empty()) {
      throw ValidationError("dialogue '" + d.id + "' utterance " + std::to_string(i) +
                            " has an empty speaker");
    }
    if (trim(u.text).empty()) {
      throw ValidationError("dialogue '" + d.id + "' utterance " + std::to_string(i) +
                            " has empty text");
    }
  }
  if (d.topic_spans) {
    std::size_t cursor = 0;
    for (const auto& span : *d.topic_spans) {
      if (span.start >= span.end || span.end > d.utterances.size() || span.start < cursor) {
        throw ValidationError("dialogue '" + d.id + "' has an invalid topic span [" +
                              std::to_string(span.start) + ", " + std::to_string(span.end) + ")");
      }
      cursor = span.end;
    }
  }
}

json to_json(const DialogueRecord& d) {
  json utterances = json::array();
  for (const auto& u : d.utterances) {
    utterances.push_back({{"speaker", u.speaker}, {"text", u.text}});
  }
  json j = {{"id", d.id}, {"utterances", std::move(utterances)}, {"summary", d.summary}};
  if (d.topic_spans) {
    json spans = json::array();
    for (const auto& s : *d.topic_spans) spans.push_back(json::array({s.start, s.end, s.label}));
    j["topic_spans"] = std::move(spans);
  }
  return j;
}

DialogueRecord dialogue_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("record is not a JSON object");
  for (const char* field : {"id", "utterances", "summary"}) {
    if (!j.contains(field)) throw ParseError(std::string("missing field \"") + field + "\"");
  }
  DialogueRecord d;
  try {
    d.id = j.at("id").get<std::string>();
    d.summary = j.at("summary").get<std::string>();
    for (const auto& u : j.at("utterances")) {
      if (!u.contains("speaker")) throw ParseError("utterance missing field \"speaker\"");
      if (!u.contains("text")) throw ParseError("utterance missing field \"text\"");
      d.utterances.push_back({u.at("speaker").get<std::string>(), u.at("text").get<std::string>()});
    }
    if (j.contains("topic_spans") && !j.at("topic_spans").is_null()) {
      std::vector<TopicSpan> spans;
      for (const auto& s : j.at("topic_spans")) {
        if (!s.is_array() || s.size() != 3) {
          throw ParseError("topic span must be [start, end, \"label\"]");
        }
        spans.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::string>()});
      }
      d.topic_spans = std::move(spans);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad field type: ") + e.what());
  }
  return d;
}

std::vector<DialogueRecord> parse_corpus(std::istream& in) {
  std::vector<DialogueRecord> corpus;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    DialogueRecord d;
    try {
      d = dialogue_from_json(json::parse(line));
      validate(d);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!ids.insert(d.id).second) {
      throw ValidationError("line " + std::to_string(line_no) + ": duplicate id '" + d.id + "'");
    }
    corpus.push_back(std::move(d));
  }
  return corpus;
}

std::vector<DialogueRecord> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file '" + path + "'");
  return parse_corpus(in);
}

void write_corpus(std::ostream& out, std::span<const DialogueRecord> corpus) {
  for (const auto& d : corpus) out << to_json(d).dump() << '\n';
}

void save_corpus(const std::string& path, std::span<const DialogueRecord> corpus) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write corpus file '" + path + "'");
  write_corpus(out, corpus);
}

std::vector<SubSummary> split_sub_summaries(std::string_view summary) {
  std::vector<SubSummary> subs;
  auto emit = [&](std::string_view fragment) {
    fragment = trim(fragment);
    const bool has_content = std::any_of(fragment.begin(), fragment.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) != 0 ||
             static_cast<unsigned char>(c) >= 0x80;
    });
    if (has_content) subs.push_back({std::string(fragment), subs.size()});
  };
  std::size_t begin = 0;
  for (std::size_t i = 0; i < summary.size(); ++i) {
    if (!is_terminator(summary[i])) continue;
    if (i + 1 == summary.size() || is_space(summary[i + 1])) {
      emit(summary.substr(begin, i + 1 - begin));
      begin = i + 1;
    }
  }
  if (begin < summary.size()) emit(summary.substr(begin));
  return subs;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char c : text) {
    if (is_space(c)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::vector<std::string> utterance_tokens(const Utterance& u) {
  auto tokens = tokenize(u.speaker);
  tokens.emplace_back(":");
  auto text = tokenize(u.text);
  tokens.insert(tokens.end(), std::make_move_iterator(text.begin()),
                std::make_move_iterator(text.end()));
  return tokens;
}

std::vector<std::string> utterance_run_tokens(std::span<const Utterance> utterances) {
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    if (i > 0) tokens.emplace_back(kReservedTokens[Vocabulary::kSep]);
    auto part = utterance_tokens(utterances[i]);
    tokens.insert(tokens.end(), std::make_move_iterator(part.begin()),
                  std::make_move_iterator(part.end()));
  }
  return tokens;
}

std::vector<SubSummary> filter_sub_summaries(const DialogueRecord& dialogue,
                                             std::span<const SubSummary> subs,
                                             const SubSummaryFilter& filter) {
  if (subs.size() < 2) return {};
  const auto candidates = enumerate_snippets(dialogue, filter.window_min, filter.window_max);
  std::vector<std::vector<std::string>> candidate_tokens;
  candidate_tokens.reserve(candidates.size());
  for (const auto& c : candidates) candidate_tokens.push_back(snippet_tokens(dialogue, c));

  std::vector<SubSummary> kept;
  for (const auto& sub : subs) {
    const auto reference = tokenize(sub.text);
    double best = 0.0;
    for (const auto& tokens : candidate_tokens) {
      best = std::max(best, rouge_n(tokens, reference, 2).recall);
    }
    if (!candidates.empty() && best >= filter.min_match_recall) kept.push_back(sub);
  }
  return kept;
}

Vocabulary::Vocabulary() {
  for (const char* t : kReservedTokens) add(t);
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : Vocabulary() {
  for (auto& t : tokens) {
    if (contains(t)) throw ValidationError("duplicate vocabulary token '" + t + "'");
    add(std::move(t));
  }
}

void Vocabulary::add(std::string token) {
  index_.emplace(token, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.count(std::string(token)) != 0;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

void Vocabulary::save(std::ostream& out) const {
  for (std::size_t i = kReserved; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

Vocabulary Vocabulary::load(std::istream& in) {
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write vocabulary file '" + path + "'");
  save(out);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocabulary file '" + path + "'");
  return load(in);
}

Vocabulary build_vocab(std::span<const DialogueRecord> corpus, std::size_t max_size) {
  if (max_size <= Vocabulary::kReserved) {
    throw ValidationError("vocabulary max_size must exceed the 5 reserved tokens");
  }
  std::map<std::string, std::size_t> counts;
  auto count = [&](const std::vector<std::string>& tokens) {
    for (const auto& t : tokens) ++counts[t];
  };
  for (const auto& d : corpus) {
    for (const auto& u : d.utterances) count(utterance_tokens(u));
    count(tokenize(d.summary));
  }
  for (const char* reserved : kReservedTokens) counts.erase(reserved);

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // std::map iteration is lexicographic, so a stable sort on count keeps the tie-break.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& x, const auto& y) { return x.second > y.second; });
  const std::size_t keep = std::min(ranked.size(), max_size - Vocabulary::kReserved);
  std::vector<std::string> tokens;
  tokens.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(ranked[i].first);
  return Vocabulary(std::move(tokens));
}

TokenSeq encode_tokens(std::span<const std::string> tokens, const Vocabulary& vocab) {
  TokenSeq ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(vocab.id(t));
  return ids;
}

std::vector<std::string> decode_tokens(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (TokenId id : ids) tokens.push_back(vocab.token(id));
  return tokens;
}

TokenSeq encode_utterances(std::span<const Utterance> utterances, const Vocabulary& vocab,
                           std::size_t max_positions) {
  if (utterances.empty()) throw ValidationError("cannot encode an empty utterance range");
  TokenSeq ids = encode_tokens(utterance_run_tokens(utterances), vocab);
  if (ids.size() > max_positions) ids.resize(max_positions);
  return ids;
}

TokenSeq encode_dialogue(const DialogueRecord& dialogue, std::optional<UtteranceRange> span,
                         const Vocabulary& vocab, std::size_t max_positions) {
  std::span<const Utterance> all(dialogue.utterances);
  if (!span) return encode_utterances(all, vocab, max_positions);
  if (span->length == 0) throw ValidationError("empty utterance span");
  if (span->start + span->length > all.size()) {
    throw ValidationError("utterance span [" + std::to_string(span->start) + ", " +
                          std::to_string(span->start + span->length) + ") exceeds dialogue '" +
                          dialogue.id + "' of " + std::to_string(all.size()) + " utterances");
  }
  return encode_utterances(all.subspan(span->start, span->length), vocab, max_positions);
}

TokenSeq encode_summary(std::string_view text, const Vocabulary& vocab, std::size_t max_positions) {
  if (max_positions < 2) throw ValidationError("max_positions must leave room for BOS and EOS");
  TokenSeq ids{Vocabulary::kBos};
  for (const auto& t : tokenize(text)) {
    if (ids.size() + 1 >= max_positions) break;
    ids.push_back(vocab.id(t));
  }
  ids.push_back(Vocabulary::kEos);
  return ids;
}

}  // namespace condigsum
