#include <gtest/gtest.h>

#include <numeric>
#include <set>
#include <sstream>

#include "elearnfit/trainer.hpp"

using namespace elearnfit;

namespace {

struct Synthetic {
  Corpus corpus;
  Tokenizer tok;
  ModelConfig config;
  Synthetic() {
    SyntheticTaskConfig sc;
    sc.n_documents = 200;
    sc.n_keys = 4;
    sc.n_facts_per_article = 4;
    corpus = generate_synthetic(sc);
    tok = build_tokenizer(corpus, 1000);
    config = {2, 32, 2, 64, 64, tok.vocab_size()};
  }
};

const Synthetic& synthetic() {
  static const Synthetic s;
  return s;
}

std::map<std::string, std::uint64_t> hashes(const Parameters& p) {
  std::map<std::string, std::uint64_t> out;
  for_each_tensor([&](const std::string& n, const Mat& m) { out[n] = tensor_hash(m); }, p);
  return out;
}

bool same(const Parameters& a, const Parameters& b) {
  bool eq = true;
  for_each_tensor([&](const std::string&, const Mat& x, const Mat& y) { eq = eq && bitwise_equal(x, y); }, a, b);
  return eq;
}

}  // namespace

TEST(Sampler, WithoutReplacementAcrossCalls) {
  Sampler s(10, 1);
  auto a = s.draw(4), b = s.draw(4);
  std::set<std::size_t> all(a.begin(), a.end());
  all.insert(b.begin(), b.end());
  EXPECT_EQ(all.size(), 8u);
}

TEST(Sampler, ClampsToPool) {
  Sampler s(3, 1);
  EXPECT_EQ(s.draw(5).size(), 3u);
}

TEST(Sampler, ReshufflesWhenExhausted) {
  Sampler s(5, 2);
  std::vector<std::size_t> seen;
  for (int pass = 0; pass < 3; ++pass) {
    auto d = s.draw(5);
    std::vector<std::size_t> sorted = d;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  }
  Sampler t(5, 2);
  t.draw(4);
  EXPECT_EQ(t.draw(4).size(), 1u);
  EXPECT_EQ(t.draw(4).size(), 4u);
}

TEST(Sampler, DeterministicAndErrors) {
  Sampler a(20, 9), b(20, 9);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(a.draw(7), b.draw(7));
  EXPECT_THROW(Sampler(0, 1), Error);
  EXPECT_THROW(a.draw(0), Error);
}

TEST(Example, MaskCoversSummaryAndStop) {
  const auto& s = synthetic();
  Document d{"x", "colour = red . Q: colour", "colour red"};
  auto ex = make_example(s.tok, d);
  auto full = s.tok.encode("colour = red . Q: colour TL;DR: colour red");
  full.push_back(s.tok.stop_id());
  ASSERT_EQ(ex.tokens.size(), full.size() - 1);
  EXPECT_EQ(ex.tokens, TokenIds(full.begin(), full.end() - 1));
  EXPECT_EQ(ex.targets, TokenIds(full.begin() + 1, full.end()));
  // Targets at positions 6.. are "colour", "red", STOP.
  LossMask want(ex.tokens.size(), 0);
  for (std::size_t i = 6; i < want.size(); ++i) want[i] = 1;
  EXPECT_EQ(ex.mask, want);
}

TEST(Example, ShotSummariesScoredOnlyWhenAsked) {
  const auto& s = synthetic();
  Document d{"x", "size = red . Q: size", "size red"};
  std::vector<ShotPair> shots{{"colour = blue . Q: colour", "colour blue"}};
  auto plain = make_example(s.tok, shots, d);
  auto scored = make_example(s.tok, shots, d, true);
  EXPECT_EQ(plain.tokens, scored.tokens);
  auto count = [](const LossMask& m) { return std::accumulate(m.begin(), m.end(), 0); };
  EXPECT_EQ(count(plain.mask), 3);
  EXPECT_EQ(count(scored.mask), 5);
}

TEST(Example, PromptTargetsDoNotAffectLoss) {
  const auto& s = synthetic();
  auto p = init_parameters(s.config, 3);
  for (std::size_t k = 0; k < 5; ++k) {
    auto ex = make_example(s.tok, s.corpus[k]);
    const double base = loss(p, ex.tokens, ex.targets, ex.mask);
    for (std::size_t i = 0; i < ex.targets.size(); ++i) {
      if (ex.mask[i]) continue;
      auto t = ex.targets;
      t[i] = (t[i] + 1) % static_cast<TokenId>(s.tok.vocab_size());
      EXPECT_EQ(loss(p, ex.tokens, t, ex.mask), base);
    }
    auto t = ex.targets;
    t.back() = (t.back() + 1) % static_cast<TokenId>(s.tok.vocab_size());
    EXPECT_NE(loss(p, ex.tokens, t, ex.mask), base);
  }
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  auto p = init_parameters({1, 4, 1, 4, 4, 6}, 1);
  auto before = p;
  auto g = make_gradients(p, nullptr, {"head"});
  g.base.head.setConstant(0.5);
  g.base.head(0, 0) = -2.0;
  TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.eps = 0.0;
  AdamOptimizer opt(tc);
  opt.step(p, nullptr, g);
  EXPECT_NEAR(p.head(0, 0) - before.head(0, 0), 0.1, 1e-15);
  EXPECT_NEAR(p.head(1, 1) - before.head(1, 1), -0.1, 1e-15);
  EXPECT_TRUE(bitwise_equal(p.tok_emb, before.tok_emb));
  EXPECT_EQ(opt.tracked_tensors(), 1u);
}

TEST(Adam, DecoupledWeightDecay) {
  auto p = init_parameters({1, 4, 1, 4, 4, 6}, 1);
  auto before = p;
  auto g = make_gradients(p, nullptr, {"head"});
  TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.weight_decay = 0.5;
  AdamOptimizer opt(tc);
  opt.step(p, nullptr, g);
  Mat want = before.head * (1.0 - 0.1 * 0.5);
  EXPECT_LT((p.head - want).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Pretrain, ZeroStepsReturnsInit) {
  const auto& s = synthetic();
  TrainConfig tc;
  tc.seed = 4;
  auto r = pretrain(s.config, s.corpus, s.tok, tc, 0);
  EXPECT_TRUE(same(r.params, init_parameters(s.config, 4)));
  EXPECT_TRUE(r.trace.rows.empty());
}

TEST(Pretrain, DeterministicAndRejectsLongDocuments) {
  const auto& s = synthetic();
  TrainConfig tc;
  tc.seed = 5;
  auto a = pretrain(s.config, s.corpus, s.tok, tc, 5, 2);
  auto b = pretrain(s.config, s.corpus, s.tok, tc, 5, 2);
  EXPECT_TRUE(same(a.params, b.params));
  auto small = s.config;
  small.context_len = 8;
  try {
    pretrain(small, s.corpus, s.tok, tc, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(s.corpus[0].id), std::string::npos);
  }
  auto wrong_vocab = s.config;
  wrong_vocab.vocab_size += 1;
  EXPECT_THROW(pretrain(wrong_vocab, s.corpus, s.tok, tc, 1), Error);
}

TEST(Pretrain, LossFallsOverFiveHundredSteps) {
  const auto& s = synthetic();
  TrainConfig tc;
  tc.seed = 6;
  auto r = pretrain(s.config, s.corpus, s.tok, tc, 500);
  ASSERT_EQ(r.trace.rows.size(), 500u);
  EXPECT_LT(r.trace.rows.back().loss, r.trace.rows.front().loss);
  for (const auto& row : r.trace.rows) EXPECT_LE(row.grad_norm, tc.grad_clip_norm + 1e-6);
}

namespace {

const Parameters& pretrained() {
  static const Parameters p = [] {
    const auto& s = synthetic();
    TrainConfig tc;
    tc.seed = 7;
    return pretrain(s.config, s.corpus, s.tok, tc, 100).params;
  }();
  return p;
}

Corpus train64() {
  SyntheticTaskConfig sc;
  sc.n_documents = 64;
  sc.n_keys = 4;
  sc.n_facts_per_article = 4;
  sc.seed = 99;
  sc.key_aliases = {{"colour", "hue"}};
  return generate_synthetic(sc);
}

}  // namespace

TEST(Finetune, LayerZeroLeavesOtherTensorsBitwise) {
  const auto& s = synthetic();
  const auto& base = pretrained();
  auto before = hashes(base);
  auto r = finetune(base, LayerMode{0}, train64(), s.tok, TrainConfig{});
  auto after = hashes(r.params);
  std::size_t changed = 0;
  for (const auto& [n, h] : before) {
    if (n.rfind("block0.", 0) == 0) {
      changed += after[n] != h;
    } else {
      EXPECT_EQ(after[n], h) << n;
    }
  }
  EXPECT_GT(changed, 0u);
  EXPECT_FALSE(r.adapters);
}

TEST(Finetune, LoraLeavesBaseBitwise) {
  const auto& s = synthetic();
  const auto& base = pretrained();
  auto r = finetune(base, LoraMode{16, {AttnProj::Q, AttnProj::V}}, train64(), s.tok, TrainConfig{});
  EXPECT_EQ(hashes(r.params), hashes(base));
  ASSERT_TRUE(r.adapters);
  bool b_moved = false;
  for_each_lora_tensor([&](const std::string& n, const Mat& m) { if (n.back() == 'B') b_moved |= !m.isZero(0.0); },
                       *r.adapters);
  EXPECT_TRUE(b_moved);
}

TEST(Finetune, Deterministic) {
  const auto& s = synthetic();
  TrainConfig tc;
  tc.seed = 11;
  auto a = finetune(pretrained(), LoraMode{4, {AttnProj::Q, AttnProj::V}}, train64(), s.tok, tc);
  auto b = finetune(pretrained(), LoraMode{4, {AttnProj::Q, AttnProj::V}}, train64(), s.tok, tc);
  for_each_lora_tensor([](const std::string& n, const Mat& x, const Mat& y) { EXPECT_TRUE(bitwise_equal(x, y)) << n; },
                       *a.adapters, *b.adapters);
  ASSERT_EQ(a.trace.rows.size(), b.trace.rows.size());
  for (std::size_t i = 0; i < a.trace.rows.size(); ++i) EXPECT_EQ(a.trace.rows[i].loss, b.trace.rows[i].loss);
}

TEST(Finetune, LayerZeroLossDecreases) {
  const auto& s = synthetic();
  auto r = finetune(pretrained(), LayerMode{0}, train64(), s.tok, TrainConfig{});
  ASSERT_EQ(r.trace.rows.size(), 10u);
  EXPECT_LT(r.trace.rows.back().loss, r.trace.rows.front().loss);
}

TEST(Finetune, ClippingBound) {
  const auto& s = synthetic();
  TrainConfig tc;
  tc.grad_clip_norm = 0.05;
  tc.iterations = 6;
  auto r = finetune(pretrained(), FullMode{}, train64(), s.tok, tc);
  bool clipped = false;
  for (const auto& row : r.trace.rows) {
    EXPECT_LE(row.grad_norm, tc.grad_clip_norm + 1e-6);
    clipped |= row.raw_grad_norm > tc.grad_clip_norm;
  }
  EXPECT_TRUE(clipped);
}

TEST(Finetune, SkipsOverlongDocuments) {
  const auto& s = synthetic();
  auto set = train64();
  std::vector<std::string> many(80, "colour");
  set.add({"long", join(many, " "), "colour red"});
  auto r = finetune(pretrained(), LayerMode{1}, set, s.tok, TrainConfig{});
  EXPECT_EQ(r.trace.skipped, 1u);
  Corpus only;
  only.add({"long", join(many, " "), "colour red"});
  EXPECT_THROW(finetune(pretrained(), LayerMode{1}, only, s.tok, TrainConfig{}), Error);
  EXPECT_THROW(finetune(pretrained(), LayerMode{1}, Corpus{}, s.tok, TrainConfig{}), Error);
}

TEST(Trace, CsvColumns) {
  LossTrace t;
  t.rows.push_back({1, 2.5, 0.75, 3.0});
  std::ostringstream o;
  t.write_csv(o);
  EXPECT_EQ(o.str(), "step,loss,grad_norm\n1,2.5,0.75\n");
}

TEST(TrainConfig, Validation) {
  TrainConfig tc;
  tc.iterations = 0;
  EXPECT_THROW(tc.validate(), Error);
  tc = {};
  tc.learning_rate = 0;
  EXPECT_THROW(tc.validate(), Error);
  tc = {};
  nlohmann::json j = tc;
  auto back = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}
