#include "condigsum/rouge.hpp"

#include <algorithm>

#include "condigsum/error.hpp"

namespace condigsum {

NgramCounts ngram_counts(std::span<const std::string> tokens, std::size_t n) {
  if (n == 0) throw ValidationError("n-gram order must be at least 1");
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
  }
  return counts;
}

std::size_t ngram_overlap(const NgramCounts& candidate, const NgramCounts& reference) {
  std::size_t overlap = 0;
  auto c = candidate.begin();
  auto r = reference.begin();
  while (c != candidate.end() && r != reference.end()) {
    if (c->first < r->first) {
      ++c;
    } else if (r->first < c->first) {
      ++r;
    } else {
      overlap += std::min(c->second, r->second);
      ++c;
      ++r;
    }
  }
  return overlap;
}

RougeScore make_rouge_score(std::size_t overlap, std::size_t candidate_total,
                            std::size_t reference_total) {
  RougeScore s;
  s.precision = candidate_total == 0 ? 0.0 : static_cast<double>(overlap) / candidate_total;
  s.recall = reference_total == 0 ? 0.0 : static_cast<double>(overlap) / reference_total;
  const double denom = s.precision + s.recall;
  s.f1 = denom == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / denom;
  return s;
}

RougeScore rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference,
                   std::size_t n) {
  if (n == 0) throw ValidationError("n-gram order must be at least 1");
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  const std::size_t cand_total = candidate.size() >= n ? candidate.size() - n + 1 : 0;
  const std::size_t ref_total = reference.size() >= n ? reference.size() - n + 1 : 0;
  return make_rouge_score(ngram_overlap(cand, ref), cand_total, ref_total);
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  if (a.empty() || b.empty()) return 0;
  // Rolling single row over b.
  std::vector<std::size_t> row(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diagonal = 0;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t above = row[j];
      row[j] = a[i - 1] == b[j - 1] ? diagonal + 1 : std::max(row[j], row[j - 1]);
      diagonal = above;
    }
  }
  return row[b.size()];
}

RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  return make_rouge_score(lcs_length(candidate, reference), candidate.size(), reference.size());
}

}  // namespace condigsum
