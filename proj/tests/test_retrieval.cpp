#include <gtest/gtest.h>

#include <cmath>

#include "elearnfit/retrieval.hpp"

using namespace elearnfit;

namespace {

// Summaries are single shared words so they do not disturb the idf oracle.
Corpus three() { return Corpus({{"x", "a b", "z"}, {"y", "a c", "z"}, {"w", "d", "z"}}); }

}  // namespace

TEST(Tfidf, HandComputedIdf) {
  auto idx = build_index(three());
  EXPECT_DOUBLE_EQ(*idx.idf("a"), std::log(3.0 / 2.0));
  EXPECT_DOUBLE_EQ(*idx.idf("d"), std::log(3.0));
  EXPECT_DOUBLE_EQ(*idx.idf("z"), 0.0);
  EXPECT_EQ(*idx.document_frequency("a"), 2u);
  EXPECT_FALSE(idx.idf("q"));
}

TEST(Tfidf, SingleDocumentIsZeroVector) {
  auto idx = build_index(Corpus({{"only", "a b c", "d"}}));
  EXPECT_TRUE(idx.vectors()[0].empty());
}

TEST(Tfidf, QueryMatchesBruteForceCosine) {
  auto idx = build_index(three());
  const double la = std::log(1.5), l3 = std::log(3.0);
  // doc x = (a: la, b: l3), doc y = (a: la, c: l3), doc w = (d: l3); query = (a: la, b: l3).
  const double nx = std::sqrt(la * la + l3 * l3);
  const double cos_x = 1.0;
  const double cos_y = la * la / (nx * nx);
  auto hits = idx.query("a b", 2);
  ASSERT_EQ(hits.size(), 2u);
  EXPECT_EQ(hits[0].id, "x");
  EXPECT_NEAR(hits[0].score, cos_x, 1e-12);
  EXPECT_EQ(hits[1].id, "y");
  EXPECT_NEAR(hits[1].score, cos_y, 1e-12);
}

TEST(Tfidf, DisjointQueryScoresZeroInPoolOrder) {
  auto idx = build_index(three());
  auto hits = idx.query("nothing here", 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].id, "x");
  EXPECT_EQ(hits[1].id, "y");
  EXPECT_EQ(hits[2].id, "w");
  for (const auto& h : hits) EXPECT_EQ(h.score, 0.0);
}

TEST(Tfidf, SelfRetrievalRanksFirst) {
  Corpus pool;
  Rng rng(5);
  std::uniform_int_distribution<int> w(0, 40), len(3, 12);
  for (int i = 0; i < 60; ++i) {
    std::vector<std::string> a;
    for (int j = len(rng); j > 0; --j) a.push_back("t" + std::to_string(w(rng)));
    pool.add({"d" + std::to_string(i), join(a, " "), "t" + std::to_string(w(rng))});
  }
  auto idx = build_index(pool);
  for (const auto& d : pool) {
    auto hits = idx.query(d.article + " " + d.summary, 60);
    ASSERT_FALSE(hits.empty());
    EXPECT_NEAR(hits[0].score, 1.0, 1e-9);
    auto self = std::find_if(hits.begin(), hits.end(), [&](const ScoredId& h) { return h.id == d.id; });
    ASSERT_NE(self, hits.end());
    EXPECT_EQ(self->score, hits[0].score);
    for (std::size_t i = 1; i < hits.size(); ++i) EXPECT_LE(hits[i].score, hits[i - 1].score);
    for (const auto& h : hits) {
      EXPECT_GE(h.score, 0.0);
      EXPECT_LE(h.score, 1.0);
    }
  }
}

TEST(Tfidf, RebuildAndJsonRoundTrip) {
  auto a = build_index(three());
  auto b = build_index(three());
  EXPECT_EQ(a.to_json(), b.to_json());
  auto c = TfidfIndex::from_json(a.to_json());
  EXPECT_EQ(c.to_json(), a.to_json());
  auto q1 = a.query("a c", 3), q2 = c.query("a c", 3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(q1[i].id, q2[i].id);
    EXPECT_EQ(q1[i].score, q2[i].score);
  }
}

TEST(Tfidf, Errors) {
  EXPECT_THROW(build_index(Corpus{}), Error);
  EXPECT_THROW(build_index(three()).query("a", 0), Error);
}
