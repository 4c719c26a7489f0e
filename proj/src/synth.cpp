#include <algorithm>
#include <array>
#include <cstdio>
#include <string>
#include <string_view>

#include "condigsum/corpus.hpp"
#include "condigsum/error.hpp"
#include "condigsum/rng.hpp"

namespace condigsum {

namespace {

constexpr std::size_t kScriptLength = 10;

struct Topic {
  std::string_view name;
  std::array<std::string_view, kScriptLength> script;
};

// Each topic owns its words exclusively; script order is the order in which
// consecutive utterances of a block mention them.
constexpr std::array<Topic, 10> kTopics = {{
    {"baking",
     {"flour", "sugar", "eggs", "butter", "dough", "oven", "cake", "plates", "coffee", "dishes"}},
    {"travel",
     {"tickets", "passport", "suitcase", "taxi", "airport", "flight", "hotel", "beach", "museum",
      "souvenirs"}},
    {"work",
     {"report", "slides", "meeting", "client", "contract", "budget", "invoice", "deadline",
      "review", "bonus"}},
    {"football",
     {"boots", "jersey", "bus", "stadium", "warmup", "match", "goal", "trophy", "medal",
      "celebration"}},
    {"music",
     {"guitar", "strings", "rehearsal", "drums", "microphone", "concert", "encore", "album", "fans",
      "autographs"}},
    {"garden",
     {"seeds", "soil", "shovel", "pots", "hose", "sprouts", "flowers", "fence", "tomatoes",
      "harvest"}},
    {"car",
     {"keys", "engine", "tires", "oil", "brakes", "mechanic", "receipt", "insurance", "garage",
      "highway"}},
    {"school",
     {"homework", "textbook", "lecture", "notes", "library", "exam", "grades", "diploma",
      "ceremony", "party"}},
    {"movies",
     {"trailer", "cinema", "popcorn", "seats", "film", "credits", "sequel", "director", "critics",
      "poster"}},
    {"health",
     {"doctor", "appointment", "checkup", "bloodwork", "results", "pills", "pharmacy", "diet",
      "gym", "recovery"}},
}};

constexpr std::array<std::string_view, 12> kSpeakers = {
    "alice", "bob", "carol", "dave", "emma", "frank", "grace", "henry", "irene", "jack", "kate",
    "liam"};

// Utterance templates by position inside a topic block (positions past the
// last group reuse it). Every template contains "the {a} and the {b}" and
// starts with a word unique to its group.
constexpr std::array<std::array<std::string_view, 2>, 4> kTemplates = {{
    {"what about the {a} and the {b} ?", "how about the {a} and the {b} ?"},
    {"well , the {a} and the {b} are ready .", "sure , the {a} and the {b} are fine ."},
    {"so the {a} and the {b} next ?", "then the {a} and the {b} ?"},
    {"ok , the {a} and the {b} it is .", "right , the {a} and the {b} work ."},
}};

std::string fill(std::string_view pattern, std::string_view a, std::string_view b) {
  std::string out;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern.compare(i, 3, "{a}") == 0) {
      out += a;
      i += 2;
    } else if (pattern.compare(i, 3, "{b}") == 0) {
      out += b;
      i += 2;
    } else {
      out += pattern[i];
    }
  }
  return out;
}

std::size_t draw_in_range(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + uniform_index(rng, hi - lo + 1);
}

}  // namespace

std::size_t synth_topic_count() { return kTopics.size(); }

std::vector<DialogueRecord> synth_corpus(const SynthOptions& o) {
  if (o.n_dialogues < 1) throw ValidationError("synth_corpus needs at least one dialogue");
  if (o.min_topics < 1 || o.min_topics > o.max_topics || o.max_topics > kTopics.size()) {
    throw ValidationError("topic range must satisfy 1 <= min <= max <= " +
                          std::to_string(kTopics.size()));
  }
  if (o.min_utterances_per_topic < 1 ||
      o.min_utterances_per_topic > o.max_utterances_per_topic ||
      o.max_utterances_per_topic + 1 > kScriptLength) {
    throw ValidationError("utterances-per-topic range must satisfy 1 <= min <= max <= " +
                          std::to_string(kScriptLength - 1));
  }

  Rng rng(o.seed);
  std::vector<DialogueRecord> corpus;
  corpus.reserve(o.n_dialogues);
  for (std::size_t n = 0; n < o.n_dialogues; ++n) {
    DialogueRecord d;
    char id[32];
    std::snprintf(id, sizeof id, "synth-%06zu", n);
    d.id = id;

    std::array<std::size_t, kSpeakers.size()> people{};
    for (std::size_t i = 0; i < people.size(); ++i) people[i] = i;
    shuffle(std::span<std::size_t>(people), rng);
    const std::array<std::string_view, 2> speakers = {kSpeakers[people[0]], kSpeakers[people[1]]};

    std::array<std::size_t, kTopics.size()> topic_order{};
    for (std::size_t i = 0; i < topic_order.size(); ++i) topic_order[i] = i;
    shuffle(std::span<std::size_t>(topic_order), rng);
    const std::size_t n_topics = draw_in_range(rng, o.min_topics, o.max_topics);

    std::vector<TopicSpan> spans;
    std::vector<std::string> sentences;
    for (std::size_t t = 0; t < n_topics; ++t) {
      const Topic& topic = kTopics[topic_order[t]];
      const std::size_t length =
          draw_in_range(rng, o.min_utterances_per_topic, o.max_utterances_per_topic);
      const std::size_t first_word = uniform_index(rng, kScriptLength - length);
      const std::size_t block_start = d.utterances.size();
      std::size_t first_speaker = 0;
      for (std::size_t i = 0; i < length; ++i) {
        const auto& group = kTemplates[std::min(i, kTemplates.size() - 1)];
        const std::string_view pattern = group[uniform_index(rng, group.size())];
        const std::size_t who = uniform_index(rng, 2);
        if (i == 0) first_speaker = who;
        d.utterances.push_back({std::string(speakers[who]),
                                fill(pattern, topic.script[first_word + i],
                                     topic.script[first_word + i + 1])});
      }
      spans.push_back({block_start, d.utterances.size(), std::string(topic.name)});
      sentences.push_back(std::string(speakers[first_speaker]) + " and " +
                          std::string(speakers[1 - first_speaker]) + " discuss the " +
                          std::string(topic.script[first_word]) + " and the " +
                          std::string(topic.script[first_word + length]) + " .");
    }
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      if (i > 0) d.summary += ' ';
      d.summary += sentences[i];
    }
    d.topic_spans = std::move(spans);
    corpus.push_back(std::move(d));
  }
  return corpus;
}

}  // namespace condigsum
