#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "elearnfit/common.hpp"

namespace elearnfit {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  bool operator==(const RougeScore&) const = default;
};

inline double harmonic_f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

/// Lowercases and splits on every non-alphanumeric byte.
inline std::vector<std::string> rouge_tokenize(std::string_view text) { return alnum_words(text); }

/// Clipped unigram overlap between two token multisets.
inline std::size_t unigram_overlap(std::span<const std::string> candidate,
                                   std::span<const std::string> reference) {
  std::unordered_map<std::string_view, std::size_t> ref_counts;
  for (const auto& t : reference) ++ref_counts[t];
  std::size_t overlap = 0;
  for (const auto& t : candidate) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  return overlap;
}

inline RougeScore rouge1_tokens(std::span<const std::string> candidate,
                                std::span<const std::string> reference) {
  RougeScore s;
  const double overlap = static_cast<double>(unigram_overlap(candidate, reference));
  if (!candidate.empty()) s.precision = overlap / static_cast<double>(candidate.size());
  if (!reference.empty()) s.recall = overlap / static_cast<double>(reference.size());
  s.f1 = harmonic_f1(s.precision, s.recall);
  return s;
}

inline RougeScore rouge1(std::string_view candidate, std::string_view reference) {
  auto c = rouge_tokenize(candidate);
  auto r = rouge_tokenize(reference);
  return rouge1_tokens(c, r);
}

/// Macro average: each field averaged independently over test cases.
inline RougeScore corpus_mean(std::span<const RougeScore> scores) {
  if (scores.empty()) throw Error("corpus_mean of an empty score list");
  RougeScore m;
  for (const auto& s : scores) {
    m.precision += s.precision;
    m.recall += s.recall;
    m.f1 += s.f1;
  }
  const double n = static_cast<double>(scores.size());
  m.precision /= n;
  m.recall /= n;
  m.f1 /= n;
  return m;
}

}  // namespace elearnfit
