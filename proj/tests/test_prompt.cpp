#include <gtest/gtest.h>

#include <set>

#include "elearnfit/prompt.hpp"

using namespace elearnfit;

TEST(Render, TldrOneShot) { EXPECT_EQ(render(Template::TlDr, {{"A1", "S1"}}, "T"), "A1 TL;DR: S1 T TL;DR:"); }

TEST(Render, TldrZeroShot) { EXPECT_EQ(render(Template::TlDr, {}, "T"), "T TL;DR:"); }

TEST(Render, NoneTwoShot) {
  EXPECT_EQ(render(Template::None, {{"A1", "S1"}, {"A2", "S2"}}, "T"), "A1 S1 A2 S2 T ");
}

TEST(Render, TemplateNames) {
  EXPECT_EQ(parse_template("TL;DR"), Template::TlDr);
  EXPECT_EQ(parse_template("none"), Template::None);
  EXPECT_THROW(parse_template("bullet"), Error);
}

TEST(SampleIndices, DistinctAndSeeded) {
  auto a = sample_indices(20, 5, 3);
  EXPECT_EQ(a, sample_indices(20, 5, 3));
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 5u);
  EXPECT_EQ(sample_indices(3, 5, 1).size(), 3u);
}

namespace {

struct Fixture {
  Corpus pool;
  Tokenizer tok;
  Fixture() {
    // Each shot renders to exactly 5 tokens: 3 article words, marker, 1 summary word.
    for (int i = 0; i < 6; ++i) {
      auto s = std::to_string(i);
      pool.add({"p" + s, "w" + s + " x y", "s" + s});
    }
    tok = build_tokenizer(pool, 1000);
  }
};

}  // namespace

TEST(Assemble, ZeroShotIsPlainRender) {
  Fixture f;
  PromptSpec spec;
  auto p = assemble(spec, f.pool, "t u", f.tok);
  EXPECT_TRUE(p.used_shot_ids.empty());
  EXPECT_EQ(p.text, "t u TL;DR:");
  EXPECT_FALSE(p.truncated);
  EXPECT_EQ(p.n_tokens, 3u);
}

TEST(Assemble, TwoRandomShotsFit) {
  Fixture f;
  PromptSpec spec{Template::TlDr, 2, RandomSelection{7}, 1000};
  auto p = assemble(spec, f.pool, "t", f.tok);
  ASSERT_EQ(p.used_shot_ids.size(), 2u);
  EXPECT_NE(p.used_shot_ids[0], p.used_shot_ids[1]);
  EXPECT_FALSE(p.truncated);
  EXPECT_EQ(p.text, assemble(spec, f.pool, "t", f.tok).text);
}

TEST(Assemble, DropsEarliestShotsFirst) {
  Fixture f;
  // Test part "t TL;DR:" = 2 tokens; 4 shots = 22 tokens; budget 17 fits 3.
  PromptSpec full{Template::TlDr, 4, RandomSelection{11}, 1000};
  auto all = assemble(full, f.pool, "t", f.tok);
  ASSERT_EQ(all.n_tokens, 22u);
  PromptSpec tight = full;
  tight.token_budget = 17;
  auto p = assemble(tight, f.pool, "t", f.tok);
  EXPECT_TRUE(p.truncated);
  ASSERT_EQ(p.used_shot_ids.size(), 3u);
  EXPECT_EQ(p.n_tokens, 17u);
  EXPECT_EQ(std::vector<std::string>(all.used_shot_ids.begin() + 1, all.used_shot_ids.end()), p.used_shot_ids);
}

TEST(Assemble, BudgetProperty) {
  Fixture f;
  for (std::size_t budget = 2; budget < 40; ++budget)
    for (std::size_t k = 0; k <= 6; ++k) {
      PromptSpec spec{Template::TlDr, k, RandomSelection{budget}, budget};
      auto p = assemble(spec, f.pool, "t", f.tok);
      EXPECT_LE(p.n_tokens, budget);
      EXPECT_EQ(p.n_tokens, f.tok.encode(p.text).size());
      EXPECT_LE(p.used_shot_ids.size(), k);
    }
}

TEST(Assemble, TestArticleTooLong) {
  Fixture f;
  PromptSpec spec{Template::TlDr, 0, RandomSelection{}, 2};
  EXPECT_THROW(assemble(spec, f.pool, "a b c", f.tok), Error);
}

TEST(Assemble, TopKNeedsIndexAndUsesIt) {
  Fixture f;
  PromptSpec spec{Template::TlDr, 1, TopKSelection{}, 1000};
  EXPECT_THROW(assemble(spec, f.pool, "w3", f.tok), Error);
  auto idx = build_index(f.pool);
  auto p = assemble(spec, f.pool, "w3 x y", f.tok, &idx);
  EXPECT_EQ(p.used_shot_ids, std::vector<std::string>{"p3"});
}

TEST(Assemble, EmptyPoolWithShots) {
  Fixture f;
  PromptSpec spec{Template::TlDr, 1, RandomSelection{}, 1000};
  EXPECT_THROW(assemble(spec, Corpus{}, "t", f.tok), Error);
}
