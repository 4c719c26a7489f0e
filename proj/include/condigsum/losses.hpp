#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "condigsum/corpus.hpp"
#include "condigsum/model.hpp"
#include "condigsum/tensor.hpp"

namespace condigsum {

/// Snippet encodings of one coherence pair; the negative already carries the
/// permuted utterance order.
struct CoherenceExample {
  TokenSeq positive;
  TokenSeq negative;
};

/// Snippet encodings plus the BOS...EOS sub-summary both arms must generate.
struct SubSummaryExample {
  TokenSeq positive;
  TokenSeq negative;
  TokenSeq target;
};

struct LossBreakdown {
  double main = 0.0;
  double coherence = 0.0;
  double subsummary = 0.0;
  std::size_t main_instances = 0;
  std::size_t coherence_pairs = 0;
  std::size_t subsummary_pairs = 0;
};

// Plain-number forms of the two-way softmax and the hinges.
std::pair<double, double> pairwise_softmax(double score_a, double score_b);
/// max(0, delta - (co_pos - co_neg)) over softmax-normalized raw scores.
double coherence_margin(double y_pos, double y_neg, double delta = 1.0);
/// max(0, delta - (su_neg - su_pos)) over softmax-normalized raw NLLs.
double subsummary_margin(double nll_pos, double nll_neg, double delta = 1.0);

/// Tape form of the pair softmax: returns (p_a, p_b) as [1 x 1] nodes.
template <typename T>
std::pair<Var, Var> pairwise_softmax(Tape<T>& tape, Var a, Var b);

/// Teacher-forced sum of -log p(y_i | y_<i, source) over target[1..].
/// `target` must start with BOS and end with EOS.
template <typename T>
Var sequence_nll(Transformer<T>& model, Tape<T>& tape, std::span<const TokenId> source,
                 std::span<const TokenId> target);

template <typename T>
Var coherence_loss(Transformer<T>& model, Tape<T>& tape, const CoherenceExample& pair,
                   double delta = 1.0);

template <typename T>
Var subsummary_loss(Transformer<T>& model, Tape<T>& tape, const SubSummaryExample& pair,
                    double delta = 1.0);

struct Seq2SeqExample {
  TokenSeq source;
  TokenSeq target;
};

// Eval-mode values (no dropout, no gradient).
template <typename T>
double sequence_nll_value(Transformer<T>& model, std::span<const TokenId> source,
                          std::span<const TokenId> target);
template <typename T>
double main_batch_loss(Transformer<T>& model, std::span<const Seq2SeqExample> batch);
template <typename T>
double coherence_loss_value(Transformer<T>& model, const CoherenceExample& pair,
                            double delta = 1.0);
template <typename T>
double subsummary_loss_value(Transformer<T>& model, const SubSummaryExample& pair,
                             double delta = 1.0);

/// Mean over dialogues of the per-dialogue mean; dialogues with no entries
/// are left out. Returns 0 when nothing contributes.
double mean_of_means(std::span<const std::vector<double>> per_dialogue);

}  // namespace condigsum
