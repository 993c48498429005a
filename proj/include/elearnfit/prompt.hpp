#pragma once

// Prompt templates and k-shot prompt assembly under a token budget.

#include <algorithm>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "elearnfit/common.hpp"
#include "elearnfit/corpus.hpp"
#include "elearnfit/retrieval.hpp"

namespace elearnfit {

enum class Template { None, TlDr };

inline std::string_view to_string(Template t) { return t == Template::TlDr ? "TLDR" : "NONE"; }

inline Template parse_template(std::string_view s) {
  auto l = to_lower(std::string(s));
  if (l == "tldr" || l == "tl;dr") return Template::TlDr;
  if (l == "none") return Template::None;
  throw Error("unknown template '" + std::string(s) + "'");
}

struct ShotPair {
  std::string article;
  std::string summary;
};

/// TLDR joins each pair as "{article} TL;DR: {summary}" and ends with
/// "{test} TL;DR:" (no trailing space). NONE joins everything with single
/// spaces and ends with "{test} " so the trailing space cues generation.
inline std::string render(Template tmpl, const std::vector<ShotPair>& shots, std::string_view test_article) {
  std::string out;
  for (const auto& s : shots) {
    out += s.article;
    out += tmpl == Template::TlDr ? " TL;DR: " : " ";
    out += s.summary;
    out += ' ';
  }
  out += test_article;
  out += tmpl == Template::TlDr ? " TL;DR:" : " ";
  return out;
}

struct RandomSelection {
  std::uint64_t seed = 0;
};
struct TopKSelection {};
using ShotSelection = std::variant<RandomSelection, TopKSelection>;

inline std::string selection_name(const ShotSelection& s) {
  return std::holds_alternative<TopKSelection>(s) ? "topk" : "random";
}

struct PromptSpec {
  Template tmpl = Template::TlDr;
  std::size_t shots = 0;
  ShotSelection selection = RandomSelection{};
  std::size_t token_budget = 256;
};

struct AssembledPrompt {
  std::string text;
  std::vector<std::string> used_shot_ids;
  bool truncated = false;
  std::size_t n_tokens = 0;
};

inline void to_json(nlohmann::json& j, const AssembledPrompt& p) {
  j = {{"text", p.text}, {"used_shot_ids", p.used_shot_ids}, {"truncated", p.truncated},
       {"n_tokens", p.n_tokens}};
}

/// First `k` entries of a seeded uniform shuffle of [0, n).
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

/// Selects shots from `pool`, renders, and drops the earliest shots until
/// the encoded prompt fits `spec.token_budget`. TopK selection needs a
/// retriever built over `pool`.
inline AssembledPrompt assemble(const PromptSpec& spec, const Corpus& pool, std::string_view test_article,
                                const Tokenizer& tokenizer, const Retriever* retriever = nullptr) {
  if (spec.token_budget < 1) throw Error("token_budget must be >= 1");
  std::vector<const Document*> chosen;
  if (spec.shots > 0) {
    if (pool.empty()) throw Error("shot selection from an empty pool");
    if (const auto* r = std::get_if<RandomSelection>(&spec.selection)) {
      for (auto i : sample_indices(pool.size(), spec.shots, r->seed)) chosen.push_back(&pool[i]);
    } else {
      if (!retriever) throw Error("TopK shot selection requires a retrieval index");
      for (const auto& hit : retriever->query(test_article, spec.shots)) {
        const Document* d = pool.find(hit.id);
        if (!d) throw Error("retrieved id " + hit.id + " is not in the support pool");
        chosen.push_back(d);
      }
    }
  }

  AssembledPrompt out;
  std::size_t first = 0;
  while (true) {
    std::vector<ShotPair> pairs;
    for (std::size_t i = first; i < chosen.size(); ++i) pairs.push_back({chosen[i]->article, chosen[i]->summary});
    out.text = render(spec.tmpl, pairs, test_article);
    out.n_tokens = tokenizer.encode(out.text).size();
    if (out.n_tokens <= spec.token_budget) break;
    if (first == chosen.size()) throw Error("test article exceeds token budget");
    ++first;
    out.truncated = true;
  }
  for (std::size_t i = first; i < chosen.size(); ++i) out.used_shot_ids.push_back(chosen[i]->id);
  return out;
}

}  // namespace elearnfit
