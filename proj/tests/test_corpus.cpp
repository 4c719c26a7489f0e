#include <doctest.h>

#include <set>
#include <sstream>

#include "condigsum/corpus.hpp"
#include "condigsum/error.hpp"
#include "condigsum/pairs.hpp"
#include "helpers.hpp"

using namespace condigsum;

TEST_CASE("parse_corpus reads records and skips blank lines") {
  std::istringstream in(
      R"({"id":"d1","utterances":[{"speaker":"A","text":"Hi there"}],"summary":"A says hi."})"
      "\n\n"
      R"({"id":"d2","utterances":[{"speaker":"B","text":"x"},{"speaker":"C","text":"y"}],"summary":"s","topic_spans":[[0,1,"t0"],[1,2,"t1"]]})"
      "\n");
  const auto corpus = parse_corpus(in);
  REQUIRE(corpus.size() == 2);
  CHECK(corpus[0].id == "d1");
  CHECK(corpus[0].utterances[0].text == "Hi there");
  CHECK_FALSE(corpus[0].topic_spans.has_value());
  REQUIRE(corpus[1].topic_spans.has_value());
  CHECK((*corpus[1].topic_spans)[1] == TopicSpan{1, 2, "t1"});
}

TEST_CASE("parse errors name the line and the missing field") {
  std::istringstream in(
      R"({"id":"d1","utterances":[{"speaker":"A","text":"a"}],"summary":"s"})"
      "\n"
      R"({"id":"d2","utterances":[{"speaker":"A","text":"a"}]})");
  try {
    parse_corpus(in);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("missing field \"summary\"") != std::string::npos);
  }
}

TEST_CASE("malformed JSON, duplicate ids and bad spans are rejected") {
  std::istringstream bad_json("{not json}\n");
  CHECK_THROWS_AS(parse_corpus(bad_json), ParseError);

  std::istringstream dup(
      R"({"id":"d","utterances":[{"speaker":"A","text":"a"}],"summary":"s"})"
      "\n"
      R"({"id":"d","utterances":[{"speaker":"A","text":"b"}],"summary":"s"})");
  CHECK_THROWS_AS(parse_corpus(dup), ValidationError);

  auto d = testutil::dialogue("x", {"a", "b", "c"});
  d.topic_spans = std::vector<TopicSpan>{{0, 2, "t"}, {1, 3, "u"}};
  CHECK_THROWS_AS(validate(d), ValidationError);
  d.topic_spans = std::vector<TopicSpan>{{0, 0, "t"}};
  CHECK_THROWS_AS(validate(d), ValidationError);
  d.topic_spans = std::vector<TopicSpan>{{0, 4, "t"}};
  CHECK_THROWS_AS(validate(d), ValidationError);

  auto empty_text = testutil::dialogue("y", {"  "});
  CHECK_THROWS_AS(validate(empty_text), ValidationError);
}

TEST_CASE("write then parse round-trips") {
  const auto corpus = synth_corpus({.n_dialogues = 7, .seed = 11});
  std::stringstream buf;
  write_corpus(buf, corpus);
  CHECK(parse_corpus(buf) == corpus);
}

TEST_CASE("split_sub_summaries") {
  SUBCASE("sentence terminators followed by space or end") {
    const auto subs = split_sub_summaries("Amy buys milk. Bob pays! Done?");
    REQUIRE(subs.size() == 3);
    CHECK(subs[0].text == "Amy buys milk.");
    CHECK(subs[1].text == "Bob pays!");
    CHECK(subs[2].text == "Done?");
    CHECK(subs[2].index == 2);
  }
  SUBCASE("decimal points do not split") {
    CHECK(split_sub_summaries("It costs 3.50 dollars.").size() == 1);
  }
  SUBCASE("trailing fragment without terminator is kept") {
    const auto subs = split_sub_summaries("One. two");
    REQUIRE(subs.size() == 2);
    CHECK(subs[1].text == "two");
  }
  SUBCASE("punctuation-only fragments are dropped") {
    const auto subs = split_sub_summaries("the end . . !");
    REQUIRE(subs.size() == 1);
    CHECK(subs[0].text == "the end .");
  }
  SUBCASE("empty summary") { CHECK(split_sub_summaries("   ").empty()); }
}

TEST_CASE("tokenize lowercases and splits on whitespace") {
  CHECK(tokenize("  Hello\tWORLD  again ") == std::vector<std::string>{"hello", "world", "again"});
  CHECK(utterance_tokens({"Ann", "Hi Bob"}) == std::vector<std::string>{"ann", ":", "hi", "bob"});
  const std::vector<Utterance> run{{"a", "x"}, {"b", "y"}};
  CHECK(utterance_run_tokens(run) == std::vector<std::string>{"a", ":", "x", "<sep>", "b", ":", "y"});
}

TEST_CASE("vocabulary reserves the special ids and ranks by count then spelling") {
  auto d1 = testutil::dialogue("1", {"b b a", "c"}, "a .");
  auto d2 = testutil::dialogue("2", {"b"}, "d .");
  const std::vector<DialogueRecord> corpus{d1, d2};
  const Vocabulary v = build_vocab(corpus, 100);
  CHECK(v.token(Vocabulary::kPad) == "<pad>");
  CHECK(v.token(Vocabulary::kBos) == "<s>");
  CHECK(v.token(Vocabulary::kEos) == "</s>");
  CHECK(v.token(Vocabulary::kUnk) == "<unk>");
  CHECK(v.token(Vocabulary::kSep) == "<sep>");
  // counts: b 3, ":" 3, ann 2, a 2, "." 2, then singletons.
  CHECK(v.tokens()[5] == ":");
  CHECK(v.tokens()[6] == "b");
  CHECK(v.id("never-seen") == Vocabulary::kUnk);

  const Vocabulary capped = build_vocab(corpus, 7);
  CHECK(capped.size() == 7);
  CHECK_THROWS_AS(build_vocab(corpus, 5), ValidationError);

  std::stringstream buf;
  v.save(buf);
  const Vocabulary loaded = Vocabulary::load(buf);
  CHECK(std::vector<std::string>(loaded.tokens().begin(), loaded.tokens().end()) ==
        std::vector<std::string>(v.tokens().begin(), v.tokens().end()));
}

TEST_CASE("encoding adds BOS/EOS to summaries and truncates") {
  const Vocabulary v(std::vector<std::string>{"x", "y"});
  const TokenSeq s = encode_summary("x y z", v, 10);
  CHECK(s == TokenSeq{Vocabulary::kBos, 5, 6, Vocabulary::kUnk, Vocabulary::kEos});
  const TokenSeq cut = encode_summary("x y x y x y", v, 4);
  CHECK(cut.size() == 4);
  CHECK(cut.front() == Vocabulary::kBos);
  CHECK(cut.back() == Vocabulary::kEos);

  const auto d = testutil::dialogue("d", {"x", "y", "x"});
  const TokenSeq mid = encode_dialogue(d, UtteranceRange{1, 1}, v, 50);
  CHECK(mid == TokenSeq{Vocabulary::kUnk, Vocabulary::kUnk, 6});  // "bob : y"
  CHECK(encode_dialogue(d, std::nullopt, v, 5).size() == 5);
}

TEST_CASE("filter_sub_summaries keeps matchable sentences of multi-sentence summaries") {
  auto d = testutil::dialogue("d", {"the cat sat down", "a dog ran off"});
  const auto one = split_sub_summaries("the cat sat .");
  CHECK(filter_sub_summaries(d, one, {}).empty());
  const auto two = split_sub_summaries("the cat sat . zebra quagga yak .");
  const auto kept = filter_sub_summaries(d, two, {1, 2, 0.1});
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].index == 0);
}

TEST_CASE("synthetic corpus structure") {
  const SynthOptions opts{.n_dialogues = 60, .seed = 5};
  const auto corpus = synth_corpus(opts);
  REQUIRE(corpus.size() == 60);
  CHECK(synth_corpus(opts) == corpus);
  CHECK_FALSE(synth_corpus({.n_dialogues = 60, .seed = 6}) == corpus);

  std::set<std::string> ids;
  for (const auto& d : corpus) {
    CHECK_NOTHROW(validate(d));
    CHECK(ids.insert(d.id).second);
    REQUIRE(d.topic_spans.has_value());
    const auto& spans = *d.topic_spans;
    CHECK(spans.size() >= 2);
    CHECK(spans.size() <= 3);
    // Spans are half-open and tile the dialogue.
    CHECK(spans.front().start == 0);
    CHECK(spans.back().end == d.size());
    for (std::size_t i = 0; i + 1 < spans.size(); ++i) CHECK(spans[i].end == spans[i + 1].start);
    for (const auto& s : spans) {
      CHECK(s.size() >= 2);
      CHECK(s.size() <= 3);
    }
    CHECK(split_sub_summaries(d.summary).size() == spans.size());
  }
  const auto big = synth_corpus({.n_dialogues = 500, .seed = 1});
  CHECK(build_vocab(big, 100000).size() <= 300);
}

TEST_CASE("synthetic sub-summaries select a snippet inside their own topic span") {
  const auto corpus = synth_corpus({.n_dialogues = 80, .seed = 9});
  for (const auto& d : corpus) {
    const auto subs = split_sub_summaries(d.summary);
    const auto& spans = *d.topic_spans;
    for (std::size_t i = 0; i < subs.size(); ++i) {
      const auto sel = select_positive_snippet(subs[i], d, 1, 3);
      CHECK(sel.recall > 0.0);
      CHECK(sel.positive.start >= spans[i].start);
      CHECK(sel.positive.start + sel.positive.length <= spans[i].end);
    }
  }
}

TEST_CASE("synth option ranges are validated") {
  CHECK_THROWS_AS(synth_corpus({.min_topics = 3, .max_topics = 2}), ValidationError);
  CHECK_THROWS_AS(synth_corpus({.max_topics = 11}), ValidationError);
  CHECK_THROWS_AS(synth_corpus({.max_utterances_per_topic = 10}), ValidationError);
}
