#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace condigsum {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

/// Contiguous n-grams with multiplicity. Throws ValidationError for n == 0.
NgramCounts ngram_counts(std::span<const std::string> tokens, std::size_t n);

/// Clipped n-gram overlap: sum over n-grams of min(candidate count, reference count).
std::size_t ngram_overlap(const NgramCounts& candidate, const NgramCounts& reference);

RougeScore rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference,
                   std::size_t n);

/// Length of the longest common subsequence.
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);

/// Precision/recall from an overlap count; f1 is 0 when both are 0.
RougeScore make_rouge_score(std::size_t overlap, std::size_t candidate_total,
                            std::size_t reference_total);

}  // namespace condigsum
