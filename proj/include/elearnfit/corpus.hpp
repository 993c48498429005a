#pragma once

// Article/summary corpora: JSONL ingestion, the combined-length filter,
// deterministic splits, a word-level tokenizer, and a synthetic
// key/value extraction task that stands in for news data at desk scale.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "elearnfit/common.hpp"

namespace elearnfit {

struct Document {
  std::string id;
  std::string article;
  std::string summary;

  bool operator==(const Document&) const = default;
};

/// Ordered collection of documents with unique ids. Iteration follows
/// insertion order.
class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<Document> docs) {
    for (auto& d : docs) add(std::move(d));
  }

  void add(Document doc) {
    if (trim(doc.article).empty()) throw Error("document " + doc.id + ": empty article");
    if (trim(doc.summary).empty()) throw Error("document " + doc.id + ": empty summary");
    if (!index_.emplace(doc.id, docs_.size()).second)
      throw Error("duplicate document id " + doc.id);
    docs_.push_back(std::move(doc));
  }

  std::size_t size() const { return docs_.size(); }
  bool empty() const { return docs_.empty(); }
  const Document& operator[](std::size_t i) const { return docs_[i]; }
  const std::vector<Document>& documents() const { return docs_; }
  auto begin() const { return docs_.begin(); }
  auto end() const { return docs_.end(); }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  const Document* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &docs_[it->second];
  }
  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(docs_.size());
    for (const auto& d : docs_) out.push_back(d.id);
    return out;
  }

 private:
  std::vector<Document> docs_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct SplitSet {
  Corpus finetune;
  Corpus test;
  Corpus support_pool;
};

// ---------------------------------------------------------------------------
// JSONL

inline Corpus parse_jsonl(std::istream& in, const std::string& source_name) {
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      throw Error("line " + std::to_string(line_no) + ": malformed JSON record");
    }
    if (!rec.is_object())
      throw Error("line " + std::to_string(line_no) + ": record is not an object");
    auto field = [&](const char* name) -> std::string {
      auto it = rec.find(name);
      if (it == rec.end())
        throw Error("line " + std::to_string(line_no) + ": missing field " + name);
      if (!it->is_string())
        throw Error("line " + std::to_string(line_no) + ": field " + name + " is not a string");
      return it->get<std::string>();
    };
    Document doc;
    doc.article = field("document");
    doc.summary = field("summary");
    if (auto it = rec.find("id"); it != rec.end() && !it->is_null()) {
      doc.id = it->is_string() ? it->get<std::string>() : it->dump();
    } else {
      doc.id = source_name + ":" + std::to_string(line_no);
    }
    try {
      corpus.add(std::move(doc));
    } catch (const Error& e) {
      throw Error("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return corpus;
}

inline Corpus load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return parse_jsonl(in, path.filename().string());
}

inline void write_jsonl(std::ostream& out, const Corpus& corpus) {
  for (const auto& d : corpus) {
    nlohmann::json rec = {{"id", d.id}, {"document", d.article}, {"summary", d.summary}};
    out << rec.dump() << '\n';
  }
}

inline void save_jsonl(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_jsonl(out, corpus);
}

// ---------------------------------------------------------------------------
// Filtering and splitting

/// Keeps documents whose article and summary together have at most
/// `max_combined_words` whitespace-separated words.
inline Corpus filter_by_length(const Corpus& corpus, std::size_t max_combined_words = 100) {
  if (max_combined_words < 1) throw Error("max_combined_words must be >= 1");
  Corpus out;
  for (const auto& d : corpus)
    if (word_count(d.article) + word_count(d.summary) <= max_combined_words) out.add(d);
  return out;
}

/// Fine-tune set = first `n_finetune` documents, test set = the next
/// `n_test`, support pool = everything except the test set.
inline SplitSet split(const Corpus& corpus, std::size_t n_finetune, std::size_t n_test) {
  if (n_finetune + n_test > corpus.size())
    throw Error("split requires " + std::to_string(n_finetune + n_test) +
                " documents but corpus has " + std::to_string(corpus.size()));
  SplitSet s;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& d = corpus[i];
    if (i < n_finetune) s.finetune.add(d);
    if (i >= n_finetune && i < n_finetune + n_test) {
      s.test.add(d);
    } else {
      s.support_pool.add(d);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Tokenizer

/// Word-level tokenizer over lowercased whitespace tokens. Natural tokens
/// occupy ids [0, n); the reserved ids UNK, PAD, STOP and the template
/// marker follow.
class Tokenizer {
 public:
  static constexpr std::string_view kUnk = "<unk>";
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kStop = "<stop>";
  /// Lowercased form of the "TL;DR:" template separator.
  static constexpr std::string_view kMarker = "tl;dr:";

  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> natural) : tokens_(std::move(natural)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i] == kMarker || tokens_[i].empty())
        throw Error("invalid natural token '" + tokens_[i] + "'");
      if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
        throw Error("duplicate token '" + tokens_[i] + "'");
    }
  }

  std::size_t natural_size() const { return tokens_.size(); }
  std::size_t vocab_size() const { return tokens_.size() + 4; }
  TokenId unk_id() const { return static_cast<TokenId>(tokens_.size()); }
  TokenId pad_id() const { return unk_id() + 1; }
  TokenId stop_id() const { return unk_id() + 2; }
  TokenId marker_id() const { return unk_id() + 3; }
  const std::vector<std::string>& natural_tokens() const { return tokens_; }

  std::optional<TokenId> lookup(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  TokenIds encode(std::string_view text) const {
    TokenIds out;
    for (auto& w : split_whitespace(text)) {
      auto lw = to_lower(std::move(w));
      if (lw == kMarker) {
        out.push_back(marker_id());
      } else if (auto id = lookup(lw)) {
        out.push_back(*id);
      } else {
        out.push_back(unk_id());
      }
    }
    return out;
  }

  std::string token_text(TokenId id) const {
    if (id >= 0 && static_cast<std::size_t>(id) < tokens_.size()) return tokens_[id];
    if (id == unk_id()) return std::string(kUnk);
    if (id == pad_id()) return std::string(kPad);
    if (id == stop_id()) return {};
    if (id == marker_id()) return std::string(kMarker);
    throw Error("unknown token id " + std::to_string(id));
  }

  std::string decode(const TokenIds& ids) const {
    std::vector<std::string> words;
    for (TokenId id : ids) {
      auto w = token_text(id);
      if (!w.empty()) words.push_back(std::move(w));
    }
    return join(words, " ");
  }

  nlohmann::json to_json() const { return {{"tokens", tokens_}}; }
  static Tokenizer from_json(const nlohmann::json& j) {
    return Tokenizer(j.at("tokens").get<std::vector<std::string>>());
  }
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json().dump(1) << '\n';
  }
  static Tokenizer load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return from_json(nlohmann::json::parse(in));
  }

  bool operator==(const Tokenizer& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Keeps the `max_vocab` most frequent lowercased words of all articles and
/// summaries, ties broken lexicographically.
inline Tokenizer build_tokenizer(const std::vector<const Corpus*>& corpora, std::size_t max_vocab) {
  if (max_vocab < 1) throw Error("max_vocab must be >= 1");
  std::map<std::string, std::size_t> counts;
  bool any = false;
  for (const Corpus* c : corpora) {
    for (const auto& d : *c) {
      any = true;
      for (const auto* text : {&d.article, &d.summary})
        for (auto& w : split_whitespace(*text)) {
          auto lw = to_lower(std::move(w));
          if (lw != Tokenizer::kMarker) ++counts[lw];
        }
    }
  }
  if (!any) throw Error("cannot build a tokenizer from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> vocab;
  for (std::size_t i = 0; i < ranked.size() && i < max_vocab; ++i) vocab.push_back(ranked[i].first);
  return Tokenizer(std::move(vocab));
}

inline Tokenizer build_tokenizer(const Corpus& corpus, std::size_t max_vocab) {
  return build_tokenizer(std::vector<const Corpus*>{&corpus}, max_vocab);
}

// ---------------------------------------------------------------------------
// Synthetic key/value extraction task
//
// Article:  "colour = red . size = big . Q: colour"
// Summary:  "colour red"

inline const std::vector<std::string>& default_synthetic_keys() {
  static const std::vector<std::string> keys = {
      "colour", "size",   "shape",  "city",    "animal", "fruit",  "metal",  "season",
      "river",  "planet", "sport",  "drink",   "tool",   "music",  "flower", "gem",
      "bird",   "fabric", "spice",  "tree",    "job",    "vehicle", "grain", "cloud"};
  return keys;
}

inline const std::vector<std::string>& default_synthetic_values() {
  static const std::vector<std::string> values = {
      "red",    "blue",   "green",  "amber",  "violet", "silver", "golden", "crimson",
      "north",  "south",  "east",   "west",   "alpha",  "beta",   "gamma",  "delta",
      "small",  "large",  "tiny",   "huge",   "round",  "flat",   "sharp",  "soft",
      "paris",  "lima",   "oslo",   "cairo",  "quito",  "rome",   "kyiv",   "dhaka",
      "otter",  "heron",  "lynx",   "moose",  "plum",   "fig",    "lime",   "pear"};
  return values;
}

struct SyntheticTaskConfig {
  std::size_t n_documents = 512;
  std::size_t n_keys = 8;
  std::size_t n_facts_per_article = 3;
  /// Candidate fact values.
  std::vector<std::string> vocab_pool = default_synthetic_values();
  /// Key names; the first `n_keys` are used. Empty means the built-in list.
  std::vector<std::string> keys;
  std::uint64_t seed = 1;
  std::string id_prefix = "synth";
  /// Token between a key and its value.
  std::string separator = "=";
  /// false: an article's facts follow the order of the key list; true:
  /// random order.
  bool shuffle_facts = false;
  /// Key -> word written in its place inside articles. Summaries keep the key.
  std::map<std::string, std::string> key_aliases;
};

inline void to_json(nlohmann::json& j, const SyntheticTaskConfig& c) {
  j = {{"n_documents", c.n_documents},
       {"n_keys", c.n_keys},
       {"n_facts_per_article", c.n_facts_per_article},
       {"vocab_pool", c.vocab_pool},
       {"keys", c.keys},
       {"seed", c.seed},
       {"id_prefix", c.id_prefix},
       {"separator", c.separator},
       {"shuffle_facts", c.shuffle_facts},
       {"key_aliases", c.key_aliases}};
}

inline void from_json(const nlohmann::json& j, SyntheticTaskConfig& c) {
  c.n_documents = j.value("n_documents", c.n_documents);
  c.n_keys = j.value("n_keys", c.n_keys);
  c.n_facts_per_article = j.value("n_facts_per_article", c.n_facts_per_article);
  c.vocab_pool = j.value("vocab_pool", c.vocab_pool);
  c.keys = j.value("keys", c.keys);
  c.seed = j.value("seed", c.seed);
  c.id_prefix = j.value("id_prefix", c.id_prefix);
  c.separator = j.value("separator", c.separator);
  c.shuffle_facts = j.value("shuffle_facts", c.shuffle_facts);
  c.key_aliases = j.value("key_aliases", c.key_aliases);
}

/// Summary rule: the value assigned to the key named after "Q:". With
/// aliases, the summary names the key the alias stands for.
inline std::optional<std::string> synthetic_answer(std::string_view article, std::string_view separator = "=",
                                                   const std::map<std::string, std::string>& key_aliases = {}) {
  auto words = split_whitespace(article);
  std::optional<std::string> target;
  for (std::size_t i = 0; i + 1 < words.size(); ++i)
    if (words[i] == "Q:") target = words[i + 1];
  if (!target) return std::nullopt;
  for (std::size_t i = 0; i + 2 < words.size(); ++i)
    if (words[i] == *target && words[i + 1] == separator) {
      std::string key = *target;
      for (const auto& [k, a] : key_aliases)
        if (a == *target) key = k;
      return key + " " + words[i + 2];
    }
  return std::nullopt;
}

inline Corpus generate_synthetic(const SyntheticTaskConfig& cfg) {
  const auto& all_keys = cfg.keys.empty() ? default_synthetic_keys() : cfg.keys;
  if (cfg.n_keys < 2) throw Error("synthetic config: n_keys must be >= 2");
  if (cfg.n_keys > all_keys.size())
    throw Error("synthetic config: n_keys exceeds the " + std::to_string(all_keys.size()) +
                " available key names");
  if (cfg.n_facts_per_article < 1 || cfg.n_facts_per_article > cfg.n_keys)
    throw Error("synthetic config: n_facts_per_article must lie in [1, n_keys]");
  if (cfg.vocab_pool.size() < cfg.n_facts_per_article)
    throw Error("synthetic config: vocab_pool too small to draw distinct values");
  // Four words per fact, two for the marker line, two for the summary.
  if (4 * cfg.n_facts_per_article + 4 > 100)
    throw Error("synthetic config: articles would exceed the 100-word budget");
  if (cfg.separator.empty() || cfg.separator.find_first_of(" \t\n") != std::string::npos ||
      cfg.separator == "Q:")
    throw Error("synthetic config: invalid separator '" + cfg.separator + "'");
  {
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < cfg.n_keys; ++i) {
      const auto& k = all_keys[i];
      if (k.empty() || k.find_first_of(" \t\n") != std::string::npos || k == "Q:" || k == cfg.separator)
        throw Error("synthetic config: invalid key '" + k + "'");
      if (!seen.insert(k).second) throw Error("synthetic config: duplicate key '" + k + "'");
    }
    std::unordered_set<std::string> surface(seen);
    for (const auto& [k, a] : cfg.key_aliases) {
      if (!seen.count(k)) throw Error("synthetic config: alias given for unused key '" + k + "'");
      if (a.empty() || a.find_first_of(" \t\n") != std::string::npos || a == "Q:" || a == cfg.separator ||
          !surface.insert(a).second)
        throw Error("synthetic config: invalid alias '" + a + "' for key '" + k + "'");
    }
  }
  auto surface_of = [&](const std::string& k) -> const std::string& {
    auto it = cfg.key_aliases.find(k);
    return it == cfg.key_aliases.end() ? k : it->second;
  };

  Rng rng(cfg.seed);
  std::vector<std::size_t> key_idx(cfg.n_keys);
  std::vector<std::size_t> val_idx(cfg.vocab_pool.size());
  Corpus out;
  for (std::size_t n = 0; n < cfg.n_documents; ++n) {
    for (std::size_t i = 0; i < key_idx.size(); ++i) key_idx[i] = i;
    for (std::size_t i = 0; i < val_idx.size(); ++i) val_idx[i] = i;
    std::shuffle(key_idx.begin(), key_idx.end(), rng);
    std::shuffle(val_idx.begin(), val_idx.end(), rng);
    if (!cfg.shuffle_facts) std::sort(key_idx.begin(), key_idx.begin() + static_cast<std::ptrdiff_t>(cfg.n_facts_per_article));
    std::uniform_int_distribution<std::size_t> pick(0, cfg.n_facts_per_article - 1);
    std::size_t target = pick(rng);

    std::string article;
    for (std::size_t f = 0; f < cfg.n_facts_per_article; ++f) {
      if (f) article += " ";
      article += surface_of(all_keys[key_idx[f]]) + " " + cfg.separator + " " + cfg.vocab_pool[val_idx[f]] + " .";
    }
    const auto& key = all_keys[key_idx[target]];
    article += " Q: " + surface_of(key);
    out.add({cfg.id_prefix + ":" + std::to_string(cfg.seed) + ":" + std::to_string(n), article,
             key + " " + cfg.vocab_pool[val_idx[target]]});
  }
  return out;
}

}  // namespace elearnfit
