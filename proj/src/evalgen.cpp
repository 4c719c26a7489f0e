#include "condigsum/evalgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

#include "condigsum/error.hpp"
#include "condigsum/losses.hpp"
#include "condigsum/rouge.hpp"

namespace condigsum {

using nlohmann::json;

void BeamConfig::validate() const {
  if (beam_size < 1) throw ValidationError("beam_size must be >= 1");
  if (max_decode_len < 1) throw ValidationError("max_decode_len must be >= 1");
  if (!std::isfinite(length_penalty)) throw ValidationError("length_penalty must be finite");
}

namespace {

Tensor<float> encode_memory(Transformer<float>& model, std::span<const TokenId> source) {
  Tape<float> tape(false, nullptr, false);
  return tape.value(model.encode(tape, source));
}

std::vector<double> next_log_probs(Transformer<float>& model, const Tensor<float>& memory,
                                   std::span<const TokenId> prefix) {
  Tape<float> tape(false, nullptr, false);
  const Var logits = model.decode_logits(tape, prefix, tape.constant(memory));
  const auto row = tape.value(logits).row(prefix.size() - 1);
  double m = -std::numeric_limits<double>::infinity();
  for (float x : row) m = std::max(m, static_cast<double>(x));
  double z = 0.0;
  for (float x : row) z += std::exp(static_cast<double>(x) - m);
  const double log_z = m + std::log(z);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(row[i]) - log_z;
  return out;
}

std::size_t decode_limit(const Transformer<float>& model, std::size_t max_decode_len) {
  // The prefix fed to the decoder (BOS plus all but the last token) must fit.
  return std::min(max_decode_len, model.config().max_positions);
}

}  // namespace

TokenSeq greedy_decode(Transformer<float>& model, std::span<const TokenId> source,
                       std::size_t max_decode_len) {
  if (max_decode_len < 1) throw ValidationError("max_decode_len must be >= 1");
  const Tensor<float> memory = encode_memory(model, source);
  const std::size_t limit = decode_limit(model, max_decode_len);
  TokenSeq prefix{Vocabulary::kBos};
  TokenSeq out;
  double log_prob = 0.0;
  while (out.size() < limit) {
    const auto lp = next_log_probs(model, memory, prefix);
    // Compare running totals, as beam search does, so rounding cannot make the
    // two disagree. Strict > keeps the lowest id on ties.
    TokenId best = 0;
    for (std::size_t t = 1; t < lp.size(); ++t) {
      if (log_prob + lp[t] > log_prob + lp[best]) best = static_cast<TokenId>(t);
    }
    log_prob += lp[best];
    out.push_back(best);
    if (best == Vocabulary::kEos) break;
    prefix.push_back(best);
  }
  return out;
}

TokenSeq beam_decode(Transformer<float>& model, std::span<const TokenId> source,
                     const BeamConfig& cfg) {
  cfg.validate();
  const Tensor<float> memory = encode_memory(model, source);
  const std::size_t limit = decode_limit(model, cfg.max_decode_len);

  struct Hyp {
    TokenSeq tokens;
    double log_prob = 0.0;
  };
  struct Candidate {
    double log_prob;
    std::size_t beam;
    TokenId token;
  };
  auto normalized = [&](const Hyp& h) {
    return h.log_prob / std::pow(static_cast<double>(h.tokens.size()), cfg.length_penalty);
  };

  std::vector<Hyp> live{Hyp{}};
  std::vector<Hyp> finished;
  for (std::size_t len = 0; len < limit && !live.empty(); ++len) {
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      TokenSeq prefix{Vocabulary::kBos};
      prefix.insert(prefix.end(), live[b].tokens.begin(), live[b].tokens.end());
      const auto lp = next_log_probs(model, memory, prefix);
      for (std::size_t t = 0; t < lp.size(); ++t) {
        cands.push_back({live[b].log_prob + lp[t], b, static_cast<TokenId>(t)});
      }
    }
    const std::size_t keep = std::min(cfg.beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& x, const Candidate& y) {
                        if (x.log_prob != y.log_prob) return x.log_prob > y.log_prob;
                        if (x.beam != y.beam) return x.beam < y.beam;
                        return x.token < y.token;
                      });
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hyp h{live[cands[i].beam].tokens, cands[i].log_prob};
      h.tokens.push_back(cands[i].token);
      if (cands[i].token == Vocabulary::kEos) {
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    if (finished.size() >= cfg.beam_size) break;
  }
  for (auto& h : live) finished.push_back(std::move(h));
  const Hyp* best = &finished.front();
  for (const Hyp& h : finished) {
    if (normalized(h) > normalized(*best)) best = &h;
  }
  return best->tokens;
}

std::vector<std::string> decoded_words(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (TokenId id : ids) {
    if (id < Vocabulary::kReserved && id != Vocabulary::kUnk) continue;
    out.push_back(vocab.token(id));
  }
  return out;
}

namespace {

RougeTriple score(std::span<const std::string> candidate, std::span<const std::string> reference) {
  return {rouge_n(candidate, reference, 1).f1, rouge_n(candidate, reference, 2).f1,
          rouge_l(candidate, reference).f1};
}

void accumulate(RougeGroup& g, const RougeTriple& t) {
  g.mean.r1 += t.r1;
  g.mean.r2 += t.r2;
  g.mean.rl += t.rl;
  ++g.count;
}

void finish(RougeGroup& g) {
  if (g.count == 0) return;
  const double n = static_cast<double>(g.count);
  g.mean.r1 /= n;
  g.mean.r2 /= n;
  g.mean.rl /= n;
}

}  // namespace

RougeReport evaluate_rouge(std::span<const DialogueRecord> split, const Decoder& decode) {
  if (split.empty()) throw ValidationError("evaluate_rouge: empty split");
  RougeReport report;
  for (const auto& d : split) {
    const auto reference = tokenize(d.summary);
    const auto candidate = decode(d);
    const RougeTriple t = score(candidate, reference);
    report.per_instance.push_back(t);
    accumulate(report.overall, t);
    accumulate(split_sub_summaries(d.summary).size() <= 1 ? report.one : report.more, t);
  }
  finish(report.overall);
  finish(report.one);
  finish(report.more);
  return report;
}

RougeReport evaluate_rouge(Transformer<float>& model, std::span<const DialogueRecord> split,
                           const Vocabulary& vocab, const BeamConfig& cfg) {
  const std::size_t max_pos = model.config().max_positions;
  return evaluate_rouge(split, [&](const DialogueRecord& d) {
    return decoded_words(beam_decode(model, encode_dialogue(d, std::nullopt, vocab, max_pos), cfg),
                         vocab);
  });
}

double snippet_score(Transformer<float>& model, const DialogueRecord& dialogue,
                     const Snippet& snippet, const Vocabulary& vocab) {
  Tape<float> tape(false, nullptr, false);
  const auto tokens = encode_snippet(dialogue, snippet, vocab, model.config().max_positions);
  return tape.scalar(model.coherence_score(tape, tokens));
}

std::vector<std::size_t> non_identity_permutation(std::size_t n, Rng& rng) {
  if (n < 2) throw ValidationError("a non-identity permutation needs n >= 2");
  std::vector<std::size_t> order(n);
  for (int attempt = 0; attempt < kShuffleRetries; ++attempt) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(std::span<std::size_t>(order), rng);
    if (!std::is_sorted(order.begin(), order.end())) return order;
  }
  // Vanishingly rare past n = 2; rotate deterministically.
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::rotate(order.begin(), order.begin() + 1, order.end());
  return order;
}

std::vector<CoherenceProbe> coherence_diagnostic(Transformer<float>& model,
                                                 const DialogueRecord& dialogue,
                                                 std::span<const UtteranceRange> spans,
                                                 const Vocabulary& vocab, Rng& rng) {
  std::vector<CoherenceProbe> out;
  for (const auto& range : spans) {
    Snippet s = identity_snippet(dialogue, range.start, range.length);
    CoherenceProbe probe{range, snippet_score(model, dialogue, s, vocab), std::nullopt};
    if (range.length >= 2) {
      s.order = non_identity_permutation(range.length, rng);
      probe.shuffled = snippet_score(model, dialogue, s, vocab);
    }
    out.push_back(probe);
  }
  return out;
}

std::vector<std::vector<double>> column_softmax_of_negated(
    const std::vector<std::vector<double>>& losses) {
  if (losses.empty() || losses.front().empty()) {
    throw ValidationError("correlation matrix needs at least one row and one column");
  }
  const std::size_t rows = losses.size();
  const std::size_t cols = losses.front().size();
  std::vector<std::vector<double>> out(rows, std::vector<double>(cols));
  for (std::size_t j = 0; j < cols; ++j) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < rows; ++i) m = std::max(m, -losses[i][j]);
    double z = 0.0;
    for (std::size_t i = 0; i < rows; ++i) z += std::exp(-losses[i][j] - m);
    for (std::size_t i = 0; i < rows; ++i) out[i][j] = std::exp(-losses[i][j] - m) / z;
  }
  return out;
}

DiagnosticMatrix correlation_matrix(Transformer<float>& model, const DialogueRecord& dialogue,
                                    std::span<const Snippet> snippets,
                                    std::span<const SubSummary> subs, const Vocabulary& vocab) {
  if (snippets.empty() || subs.empty()) {
    throw ValidationError("correlation_matrix: snippets and sub-summaries must be non-empty");
  }
  const std::size_t max_pos = model.config().max_positions;
  DiagnosticMatrix m;
  std::vector<TokenSeq> targets;
  for (const auto& sub : subs) {
    m.col_labels.push_back("sub" + std::to_string(sub.index));
    targets.push_back(encode_summary(sub.text, vocab, max_pos));
  }
  for (const auto& s : snippets) {
    m.row_labels.push_back("u" + std::to_string(s.start) + "-" + std::to_string(s.start + s.length));
    const TokenSeq source = encode_snippet(dialogue, s, vocab, max_pos);
    std::vector<double> row;
    for (const auto& t : targets) row.push_back(sequence_nll_value(model, source, t));
    m.nll.push_back(std::move(row));
  }
  m.values = column_softmax_of_negated(m.nll);
  return m;
}

std::size_t diagonal_argmax_count(const DiagnosticMatrix& m) {
  std::size_t hits = 0;
  const std::size_t cols = m.values.empty() ? 0 : m.values.front().size();
  for (std::size_t j = 0; j < cols && j < m.values.size(); ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < m.values.size(); ++i) {
      if (m.values[i][j] > m.values[best][j]) best = i;
    }
    if (best == j) ++hits;
  }
  return hits;
}

std::string utterance_slot(const Utterance& u) {
  const auto tokens = tokenize(u.text);
  return tokens.empty() ? std::string() : tokens.front();
}

namespace {

double utterances_score(Transformer<float>& model, std::span<const Utterance> utterances,
                        const Vocabulary& vocab) {
  Tape<float> tape(false, nullptr, false);
  const auto tokens = encode_utterances(utterances, vocab, model.config().max_positions);
  return tape.scalar(model.coherence_score(tape, tokens));
}

struct SubstitutionSite {
  std::size_t span;
  std::size_t offset;
  std::size_t replacement;
};

std::vector<SubstitutionSite> substitution_sites(const DialogueRecord& d) {
  std::vector<SubstitutionSite> sites;
  const auto& spans = *d.topic_spans;
  for (std::size_t s = 0; s < spans.size(); ++s) {
    if (spans[s].size() < 2) continue;
    for (std::size_t u = spans[s].start; u < spans[s].end; ++u) {
      const std::string slot = utterance_slot(d.utterances[u]);
      for (std::size_t v = 0; v < d.size(); ++v) {
        if (v >= spans[s].start && v < spans[s].end) continue;
        if (utterance_slot(d.utterances[v]) == slot) sites.push_back({s, u - spans[s].start, v});
      }
    }
  }
  return sites;
}

void require_topics(const DialogueRecord& d) {
  if (!d.topic_spans || d.topic_spans->size() < 2) {
    throw ValidationError("substitution_probe: dialogue '" + d.id +
                          "' needs at least two topic spans");
  }
}

// Draws a span, then an utterance in it, then a same-slot replacement, each
// uniformly among the choices that admit a replacement.
SubstitutionExample draw_example(Transformer<float>& model, const DialogueRecord& d,
                                 const std::vector<SubstitutionSite>& sites,
                                 const Vocabulary& vocab, Rng& rng) {
  std::vector<std::size_t> span_ids;
  for (const auto& s : sites) {
    if (span_ids.empty() || span_ids.back() != s.span) span_ids.push_back(s.span);
  }
  const std::size_t span = span_ids[uniform_index(rng, span_ids.size())];
  std::vector<std::size_t> offsets;
  for (const auto& s : sites) {
    if (s.span == span && (offsets.empty() || offsets.back() != s.offset)) offsets.push_back(s.offset);
  }
  const std::size_t offset = offsets[uniform_index(rng, offsets.size())];
  std::vector<std::size_t> replacements;
  for (const auto& s : sites) {
    if (s.span == span && s.offset == offset) replacements.push_back(s.replacement);
  }
  const std::size_t replacement = replacements[uniform_index(rng, replacements.size())];

  const TopicSpan& ts = (*d.topic_spans)[span];
  std::vector<Utterance> original(d.utterances.begin() + static_cast<std::ptrdiff_t>(ts.start),
                                  d.utterances.begin() + static_cast<std::ptrdiff_t>(ts.end));
  std::vector<Utterance> substituted = original;
  substituted[offset] = d.utterances[replacement];
  return {d.id,
          {ts.start, ts.size()},
          offset,
          replacement,
          utterances_score(model, original, vocab),
          utterances_score(model, substituted, vocab)};
}

SubstitutionResult summarize(std::vector<SubstitutionExample> examples) {
  SubstitutionResult r;
  for (const auto& e : examples) {
    r.mean_original += e.original;
    r.mean_substituted += e.substituted;
  }
  if (!examples.empty()) {
    r.mean_original /= static_cast<double>(examples.size());
    r.mean_substituted /= static_cast<double>(examples.size());
  }
  r.examples = std::move(examples);
  return r;
}

}  // namespace

SubstitutionResult substitution_probe(Transformer<float>& model, const DialogueRecord& dialogue,
                                      std::size_t n_examples, const Vocabulary& vocab, Rng& rng) {
  require_topics(dialogue);
  const auto sites = substitution_sites(dialogue);
  std::vector<SubstitutionExample> examples;
  if (sites.empty()) return summarize(std::move(examples));
  for (std::size_t i = 0; i < n_examples; ++i) {
    examples.push_back(draw_example(model, dialogue, sites, vocab, rng));
  }
  return summarize(std::move(examples));
}

SubstitutionResult substitution_probe(Transformer<float>& model,
                                      std::span<const DialogueRecord> corpus,
                                      std::size_t n_examples, const Vocabulary& vocab, Rng& rng) {
  std::vector<std::pair<const DialogueRecord*, std::vector<SubstitutionSite>>> eligible;
  for (const auto& d : corpus) {
    if (!d.topic_spans || d.topic_spans->size() < 2) continue;
    auto sites = substitution_sites(d);
    if (!sites.empty()) eligible.emplace_back(&d, std::move(sites));
  }
  if (eligible.empty()) {
    throw ValidationError("substitution_probe: no dialogue has two topic spans with a same-slot "
                          "replacement");
  }
  std::vector<SubstitutionExample> examples;
  for (std::size_t i = 0; i < n_examples; ++i) {
    const auto& [d, sites] = eligible[i % eligible.size()];
    examples.push_back(draw_example(model, *d, sites, vocab, rng));
  }
  return summarize(std::move(examples));
}

double sign_test_p_value(std::size_t wins, std::size_t losses) {
  const std::size_t n = wins + losses;
  if (n == 0) return 1.0;
  // Sum the upper binomial tail in log space.
  const double log_half_n = static_cast<double>(n) * std::log(0.5);
  const double log_n_fact = std::lgamma(static_cast<double>(n) + 1.0);
  double p = 0.0;
  for (std::size_t k = wins; k <= n; ++k) {
    const double log_choose = log_n_fact - std::lgamma(static_cast<double>(k) + 1.0) -
                              std::lgamma(static_cast<double>(n - k) + 1.0);
    p += std::exp(log_choose + log_half_n);
  }
  return std::min(1.0, p);
}

namespace {

json triple_json(const RougeGroup& g) {
  return {{"rouge1_f", g.mean.r1}, {"rouge2_f", g.mean.r2}, {"rougeL_f", g.mean.rl},
          {"count", g.count}};
}

}  // namespace

json to_json(const RougeReport& r) {
  return {{"rouge", triple_json(r.overall)},
          {"groups", {{"one", triple_json(r.one)}, {"more", triple_json(r.more)}}}};
}

json to_json(const DiagnosticMatrix& m) {
  return {{"rows", m.row_labels}, {"cols", m.col_labels}, {"values", m.values}, {"nll", m.nll}};
}

json to_json(const SubstitutionResult& r) {
  json examples = json::array();
  for (const auto& e : r.examples) {
    examples.push_back({{"dialogue_id", e.dialogue_id},
                        {"start", e.range.start},
                        {"length", e.range.length},
                        {"replaced_offset", e.replaced_offset},
                        {"replacement_utterance", e.replacement_utterance},
                        {"original", e.original},
                        {"substituted", e.substituted}});
  }
  return {{"mean_original", r.mean_original},
          {"mean_substituted", r.mean_substituted},
          {"examples", std::move(examples)}};
}

DiagnosticsReport run_diagnostics(Transformer<float>& model, std::span<const DialogueRecord> corpus,
                                  const Vocabulary& vocab, std::size_t n_substitutions,
                                  std::uint64_t seed) {
  DiagnosticsReport r;
  Rng shuffle_rng(derive_seed(seed, {0xc0de}));
  double ordered_sum = 0.0;
  double shuffled_sum = 0.0;
  std::size_t compared = 0;
  for (const auto& d : corpus) {
    if (!d.topic_spans) continue;
    std::vector<UtteranceRange> ranges;
    std::vector<Snippet> snippets;
    for (const auto& span : *d.topic_spans) {
      if (span.size() >= 2) ranges.push_back({span.start, span.size()});
      snippets.push_back(identity_snippet(d, span.start, span.size()));
    }
    for (const auto& probe : coherence_diagnostic(model, d, ranges, vocab, shuffle_rng)) {
      if (probe.shuffled) {
        ordered_sum += probe.ordered;
        shuffled_sum += *probe.shuffled;
        ++compared;
        if (probe.ordered > *probe.shuffled) ++r.ordered_wins;
        if (probe.ordered < *probe.shuffled) ++r.ordered_losses;
      }
      r.probes.emplace_back(d.id, probe);
    }
    const auto subs = split_sub_summaries(d.summary);
    if (subs.size() == snippets.size() && snippets.size() >= 2) {
      auto m = correlation_matrix(model, d, snippets, subs, vocab);
      r.diagonal_columns += diagonal_argmax_count(m);
      r.total_columns += subs.size();
      r.matrices.emplace_back(d.id, std::move(m));
    }
  }
  if (compared > 0) {
    r.mean_ordered = ordered_sum / static_cast<double>(compared);
    r.mean_shuffled = shuffled_sum / static_cast<double>(compared);
  }
  r.sign_test_p = sign_test_p_value(r.ordered_wins, r.ordered_losses);
  if (n_substitutions > 0) {
    Rng probe_rng(derive_seed(seed, {0x5b57}));
    r.substitution = substitution_probe(model, corpus, n_substitutions, vocab, probe_rng);
  }
  return r;
}

json to_json(const DiagnosticsReport& r) {
  json probes = json::array();
  for (const auto& [id, p] : r.probes) {
    probes.push_back({{"dialogue_id", id},
                      {"start", p.range.start},
                      {"length", p.range.length},
                      {"ordered", p.ordered},
                      {"shuffled", p.shuffled ? json(*p.shuffled) : json(nullptr)}});
  }
  json matrices = json::array();
  for (const auto& [id, m] : r.matrices) {
    json mj = to_json(m);
    mj["dialogue_id"] = id;
    matrices.push_back(std::move(mj));
  }
  return {{"coherence",
           {{"mean_ordered", r.mean_ordered},
            {"mean_shuffled", r.mean_shuffled},
            {"ordered_wins", r.ordered_wins},
            {"ordered_losses", r.ordered_losses},
            {"sign_test_p", r.sign_test_p},
            {"probes", std::move(probes)}}},
          {"substitution", to_json(r.substitution)},
          {"correlation",
           {{"diagonal_columns", r.diagonal_columns},
            {"total_columns", r.total_columns},
            {"matrices", std::move(matrices)}}}};
}

void write_matrix_csv(std::ostream& out, const DiagnosticMatrix& m) {
  out << "snippet";
  for (const auto& c : m.col_labels) out << ',' << c;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    out << m.row_labels[i];
    for (double v : m.values[i]) out << ',' << v;
    out << '\n';
  }
}

}  // namespace condigsum
