#include "condigsum/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "condigsum/error.hpp"

namespace condigsum {

std::pair<double, double> pairwise_softmax(double score_a, double score_b) {
  if (!std::isfinite(score_a) || !std::isfinite(score_b)) {
    throw NumericError("pairwise_softmax: non-finite score (" + std::to_string(score_a) + ", " +
                       std::to_string(score_b) + ")");
  }
  const double m = std::max(score_a, score_b);
  const double ea = std::exp(score_a - m);
  const double eb = std::exp(score_b - m);
  const double z = ea + eb;
  return {ea / z, eb / z};
}

double coherence_margin(double y_pos, double y_neg, double delta) {
  const auto [co_pos, co_neg] = pairwise_softmax(y_pos, y_neg);
  return std::max(0.0, delta - (co_pos - co_neg));
}

double subsummary_margin(double nll_pos, double nll_neg, double delta) {
  const auto [su_pos, su_neg] = pairwise_softmax(nll_pos, nll_neg);
  return std::max(0.0, delta - (su_neg - su_pos));
}

template <typename T>
std::pair<Var, Var> pairwise_softmax(Tape<T>& tape, Var a, Var b) {
  const Var both[] = {a, b};
  const Var p = tape.softmax(tape.concat_cols(both));
  return {tape.slice_cols(p, 0, 1), tape.slice_cols(p, 1, 1)};
}

namespace {

template <typename T>
Var hinge(Tape<T>& tape, Var gap, double delta) {
  return tape.relu(tape.add_scalar(tape.scale(gap, T(-1)), static_cast<T>(delta)));
}

}  // namespace

template <typename T>
Var sequence_nll(Transformer<T>& model, Tape<T>& tape, std::span<const TokenId> source,
                 std::span<const TokenId> target) {
  if (target.size() < 2) {
    throw ValidationError("sequence_nll: target needs at least BOS and EOS, got " +
                          std::to_string(target.size()) + " tokens");
  }
  if (target.front() != Vocabulary::kBos || target.back() != Vocabulary::kEos) {
    throw ValidationError("sequence_nll: target must start with BOS and end with EOS");
  }
  const Var memory = model.encode(tape, source);
  const Var logits = model.decode_logits(tape, target.first(target.size() - 1), memory);
  return tape.nll(tape.log_softmax(logits), target.subspan(1));
}

template <typename T>
Var coherence_loss(Transformer<T>& model, Tape<T>& tape, const CoherenceExample& pair,
                   double delta) {
  const Var y_pos = model.coherence_score(tape, pair.positive);
  const Var y_neg = model.coherence_score(tape, pair.negative);
  const auto [co_pos, co_neg] = pairwise_softmax(tape, y_pos, y_neg);
  return hinge(tape, tape.sub(co_pos, co_neg), delta);
}

template <typename T>
Var subsummary_loss(Transformer<T>& model, Tape<T>& tape, const SubSummaryExample& pair,
                    double delta) {
  const Var l_pos = sequence_nll(model, tape, pair.positive, pair.target);
  const Var l_neg = sequence_nll(model, tape, pair.negative, pair.target);
  const auto [su_pos, su_neg] = pairwise_softmax(tape, l_pos, l_neg);
  return hinge(tape, tape.sub(su_neg, su_pos), delta);
}

template <typename T>
double sequence_nll_value(Transformer<T>& model, std::span<const TokenId> source,
                          std::span<const TokenId> target) {
  Tape<T> tape(false, nullptr, false);
  return static_cast<double>(tape.scalar(sequence_nll(model, tape, source, target)));
}

template <typename T>
double main_batch_loss(Transformer<T>& model, std::span<const Seq2SeqExample> batch) {
  if (batch.empty()) throw ValidationError("main_batch_loss: empty batch");
  double total = 0.0;
  for (const auto& ex : batch) total += sequence_nll_value(model, ex.source, ex.target);
  return total / static_cast<double>(batch.size());
}

template <typename T>
double coherence_loss_value(Transformer<T>& model, const CoherenceExample& pair, double delta) {
  Tape<T> tape(false, nullptr, false);
  return static_cast<double>(tape.scalar(coherence_loss(model, tape, pair, delta)));
}

template <typename T>
double subsummary_loss_value(Transformer<T>& model, const SubSummaryExample& pair,
                             double delta) {
  Tape<T> tape(false, nullptr, false);
  return static_cast<double>(tape.scalar(subsummary_loss(model, tape, pair, delta)));
}

double mean_of_means(std::span<const std::vector<double>> per_dialogue) {
  double total = 0.0;
  std::size_t contributing = 0;
  for (const auto& losses : per_dialogue) {
    if (losses.empty()) continue;
    double s = 0.0;
    for (double l : losses) s += l;
    total += s / static_cast<double>(losses.size());
    ++contributing;
  }
  return contributing == 0 ? 0.0 : total / static_cast<double>(contributing);
}

#define CONDIGSUM_INSTANTIATE(T)                                                                 \
  template std::pair<Var, Var> pairwise_softmax<T>(Tape<T>&, Var, Var);                          \
  template Var sequence_nll<T>(Transformer<T>&, Tape<T>&, std::span<const TokenId>,              \
                               std::span<const TokenId>);                                        \
  template Var coherence_loss<T>(Transformer<T>&, Tape<T>&, const CoherenceExample&, double);    \
  template Var subsummary_loss<T>(Transformer<T>&, Tape<T>&, const SubSummaryExample&, double);  \
  template double sequence_nll_value<T>(Transformer<T>&, std::span<const TokenId>,               \
                                        std::span<const TokenId>);                               \
  template double main_batch_loss<T>(Transformer<T>&, std::span<const Seq2SeqExample>);          \
  template double coherence_loss_value<T>(Transformer<T>&, const CoherenceExample&, double);     \
  template double subsummary_loss_value<T>(Transformer<T>&, const SubSummaryExample&, double);

CONDIGSUM_INSTANTIATE(float)
CONDIGSUM_INSTANTIATE(double)

#undef CONDIGSUM_INSTANTIATE

}  // namespace condigsum
