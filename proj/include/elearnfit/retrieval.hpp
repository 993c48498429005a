#pragma once

// TF-IDF cosine retrieval over a support pool.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "elearnfit/common.hpp"
#include "elearnfit/corpus.hpp"

namespace elearnfit {

struct ScoredId {
  std::string id;
  double score = 0.0;
};

/// Interface for anything that ranks pool documents against a text.
class Retriever {
 public:
  virtual ~Retriever() = default;
  virtual std::vector<ScoredId> query(std::string_view text, std::size_t k) const = 0;
};

class TfidfIndex : public Retriever {
 public:
  using SparseVec = std::vector<std::pair<std::uint32_t, double>>;  // (term, weight), term-sorted

  TfidfIndex() = default;

  /// idf = ln(N / df); document vectors are raw-count tf times idf,
  /// L2-normalized (all-zero vectors stay zero).
  static TfidfIndex build(const Corpus& pool) {
    if (pool.empty()) throw Error("cannot build an index over an empty pool");
    TfidfIndex idx;
    std::map<std::string, std::size_t> df;
    std::vector<std::map<std::string, std::size_t>> tfs;
    tfs.reserve(pool.size());
    for (const auto& d : pool) {
      std::map<std::string, std::size_t> tf;
      for (auto& w : alnum_words(d.article)) ++tf[w];
      for (auto& w : alnum_words(d.summary)) ++tf[w];
      for (const auto& [term, _] : tf) ++df[term];
      tfs.push_back(std::move(tf));
      idx.ids_.push_back(d.id);
    }
    const double n = static_cast<double>(pool.size());
    for (const auto& [term, count] : df) {
      idx.term_ids_.emplace(term, static_cast<std::uint32_t>(idx.terms_.size()));
      idx.terms_.push_back(term);
      idx.df_.push_back(count);
      idx.idf_.push_back(std::log(n / static_cast<double>(count)));
    }
    for (const auto& tf : tfs) {
      SparseVec v;
      for (const auto& [term, count] : tf) {
        auto t = idx.term_ids_.at(term);
        double w = static_cast<double>(count) * idx.idf_[t];
        if (w != 0.0) v.emplace_back(t, w);
      }
      normalize(v);
      idx.vectors_.push_back(std::move(v));
    }
    return idx;
  }

  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<std::string>& terms() const { return terms_; }
  const std::vector<SparseVec>& vectors() const { return vectors_; }

  std::optional<double> idf(const std::string& term) const {
    auto it = term_ids_.find(term);
    if (it == term_ids_.end()) return std::nullopt;
    return idf_[it->second];
  }
  std::optional<std::size_t> document_frequency(const std::string& term) const {
    auto it = term_ids_.find(term);
    if (it == term_ids_.end()) return std::nullopt;
    return df_[it->second];
  }

  /// Query vector under this index's idf table; unseen terms are dropped.
  SparseVec embed(std::string_view text) const {
    std::map<std::uint32_t, std::size_t> tf;
    for (auto& w : alnum_words(text)) {
      auto it = term_ids_.find(w);
      if (it != term_ids_.end()) ++tf[it->second];
    }
    SparseVec v;
    for (const auto& [t, count] : tf) {
      double w = static_cast<double>(count) * idf_[t];
      if (w != 0.0) v.emplace_back(t, w);
    }
    normalize(v);
    return v;
  }

  /// Top-k documents by cosine similarity, descending; ties keep pool order.
  std::vector<ScoredId> query(std::string_view text, std::size_t k) const override {
    if (k < 1) throw Error("query k must be >= 1");
    const auto q = embed(text);
    std::vector<std::pair<double, std::size_t>> scored(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i)
      scored[i] = {std::clamp(dot(q, vectors_[i]), 0.0, 1.0), i};
    const std::size_t take = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end(),
                      [](const auto& a, const auto& b) {
                        return a.first != b.first ? a.first > b.first : a.second < b.second;
                      });
    std::vector<ScoredId> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) out.push_back({ids_[scored[i].second], scored[i].first});
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json vecs = nlohmann::json::array();
    for (const auto& v : vectors_) {
      nlohmann::json row = nlohmann::json::array();
      for (const auto& [t, w] : v) row.push_back({t, w});
      vecs.push_back(std::move(row));
    }
    return {{"ids", ids_}, {"terms", terms_}, {"df", df_}, {"idf", idf_}, {"vectors", vecs}};
  }

  static TfidfIndex from_json(const nlohmann::json& j) {
    TfidfIndex idx;
    idx.ids_ = j.at("ids").get<std::vector<std::string>>();
    idx.terms_ = j.at("terms").get<std::vector<std::string>>();
    idx.df_ = j.at("df").get<std::vector<std::size_t>>();
    idx.idf_ = j.at("idf").get<std::vector<double>>();
    if (idx.df_.size() != idx.terms_.size() || idx.idf_.size() != idx.terms_.size())
      throw Error("index file: term tables disagree in length");
    for (std::size_t t = 0; t < idx.terms_.size(); ++t)
      idx.term_ids_.emplace(idx.terms_[t], static_cast<std::uint32_t>(t));
    for (const auto& row : j.at("vectors")) {
      SparseVec v;
      for (const auto& e : row) {
        auto t = e.at(0).get<std::uint32_t>();
        if (t >= idx.terms_.size()) throw Error("index file: term id out of range");
        v.emplace_back(t, e.at(1).get<double>());
      }
      idx.vectors_.push_back(std::move(v));
    }
    if (idx.vectors_.size() != idx.ids_.size()) throw Error("index file: vector count mismatch");
    return idx;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json().dump() << '\n';
  }
  static TfidfIndex load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    return from_json(nlohmann::json::parse(in));
  }

 private:
  static void normalize(SparseVec& v) {
    double norm = 0.0;
    for (const auto& e : v) norm += e.second * e.second;
    if (norm == 0.0) return;
    norm = std::sqrt(norm);
    for (auto& e : v) e.second /= norm;
  }

  static double dot(const SparseVec& a, const SparseVec& b) {
    double s = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
      if (a[i].first == b[j].first) {
        s += a[i].second * b[j].second;
        ++i;
        ++j;
      } else if (a[i].first < b[j].first) {
        ++i;
      } else {
        ++j;
      }
    }
    return s;
  }

  std::vector<std::string> ids_;
  std::vector<std::string> terms_;
  std::vector<std::size_t> df_;
  std::vector<double> idf_;
  std::unordered_map<std::string, std::uint32_t> term_ids_;
  std::vector<SparseVec> vectors_;
};

inline TfidfIndex build_index(const Corpus& pool) { return TfidfIndex::build(pool); }

}  // namespace elearnfit
