#include <gtest/gtest.h>

#include <cmath>

#include "elearnfit/model.hpp"
#include "support/tiny.hpp"

using namespace elearnfit;

namespace {

// Final layer norm outputs beta = 1 everywhere, so logit v = sum(head[:, v]).
Parameters rigged(TokenId winner) {
  auto p = init_parameters(tiny::config(), 1);
  p.lnf_gamma.setZero();
  p.lnf_beta.setOnes();
  p.head.setZero();
  p.head.col(winner).setOnes();
  return p;
}

}  // namespace

TEST(Init, DeterministicAndLayerNormOnes) {
  auto a = init_parameters(tiny::config(), 9);
  auto b = init_parameters(tiny::config(), 9);
  for_each_tensor([](const std::string& n, const Mat& x, const Mat& y) { EXPECT_TRUE(bitwise_equal(x, y)) << n; }, a, b);
  EXPECT_TRUE((a.lnf_gamma.array() == 1.0).all());
  for (const auto& blk : a.blocks) {
    EXPECT_TRUE((blk.ln1_gamma.array() == 1.0).all());
    EXPECT_TRUE((blk.ln2_gamma.array() == 1.0).all());
  }
}

TEST(Init, ClosedFormParameterCount) {
  // tok 50*16 + pos 32*16 + 2 * (4*16*16 + 16*32 + 32 + 32*16 + 16 + 4*16) + 2*16 + 16*50
  const std::size_t expected = 800 + 512 + 2 * (1024 + 512 + 32 + 512 + 16 + 64) + 32 + 800;
  EXPECT_EQ(expected, 6464u);
  EXPECT_EQ(parameter_count(tiny::config()), expected);
  EXPECT_EQ(scalar_count(init_parameters(tiny::config(), 0)), expected);
}

TEST(Init, InvalidConfig) {
  auto c = tiny::config();
  c.n_heads = 3;
  EXPECT_THROW(init_parameters(c, 0), Error);
  c = tiny::config();
  c.vocab_size = 0;
  EXPECT_THROW(init_parameters(c, 0), Error);
}

TEST(Forward, ShapeAndTokenChecks) {
  auto p = init_parameters(tiny::config(), 2);
  auto logits = forward(p, {1, 2, 3});
  EXPECT_EQ(logits.rows(), 3);
  EXPECT_EQ(logits.cols(), 50);
  EXPECT_THROW(forward(p, {50}), Error);
  EXPECT_THROW(forward(p, TokenIds(33, 1)), Error);
  EXPECT_THROW(forward(p, {}), Error);
}

TEST(Forward, Causal) {
  auto p = init_parameters(tiny::config(), 3);
  auto e = tiny::example(1, 20, 50);
  auto base = forward(p, e.tokens);
  for (std::size_t k = 0; k < e.tokens.size(); ++k) {
    auto t = e.tokens;
    t[k] = (t[k] + 17) % 50;
    auto moved = forward(p, t);
    for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(k); ++r)
      EXPECT_TRUE(bitwise_equal(base.row(r), moved.row(r))) << "row " << r << " perturb " << k;
    EXPECT_FALSE(bitwise_equal(base.row(k), moved.row(k)));
  }
}

TEST(Forward, LastRowMatchesFull) {
  auto p = init_parameters(tiny::config(), 4);
  TokenIds t{5, 9, 2, 44, 13};
  auto full = forward(p, t);
  EXPECT_LT((forward_last(p, t) - full.bottomRows(1)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, AttentionRowsAreDistributions) {
  auto p = init_parameters(tiny::config(), 5);
  TokenIds t{1, 2, 3, 4, 5, 6};
  for (const auto& layer : attention_maps(p, t))
    for (const auto& head : layer)
      for (Eigen::Index r = 0; r < head.rows(); ++r) {
        EXPECT_NEAR(head.row(r).sum(), 1.0, 1e-12);
        for (Eigen::Index c = r + 1; c < head.cols(); ++c) EXPECT_EQ(head(r, c), 0.0);
      }
}

TEST(Loss, UniformLogitsGiveLogV) {
  auto p = init_parameters(tiny::config(), 6);
  p.head.setZero();
  auto e = tiny::example(2, 10, 50);
  EXPECT_NEAR(loss(p, e.tokens, e.targets, e.mask), std::log(50.0), 1e-12);
}

TEST(Loss, SinglePositionEqualsItsCrossEntropy) {
  auto p = init_parameters(tiny::config(), 7);
  auto e = tiny::example(3, 8, 50);
  LossMask m(8, 0);
  m[5] = 1;
  auto logits = forward(p, e.tokens);
  const auto row = logits.row(5);
  const double mx = row.maxCoeff();
  const double ce = std::log((row.array() - mx).exp().sum()) + mx - row(e.targets[5]);
  EXPECT_NEAR(loss(p, e.tokens, e.targets, m), ce, 1e-12);
  EXPECT_NEAR(static_cast<double>(loss_extended(p, e.tokens, e.targets, m)), ce, 1e-12);
}

TEST(Loss, EmptyMaskAndBadLengths) {
  auto p = init_parameters(tiny::config(), 8);
  EXPECT_THROW(loss(p, {1, 2}, {2, 3}, {0, 0}), Error);
  EXPECT_THROW(loss(p, {1, 2}, {2}, {1, 1}), Error);
  EXPECT_THROW(loss(p, {1, 2}, {2, 50}, {1, 1}), Error);
}

TEST(Gradients, MatchFiniteDifferencesForEveryMode) {
  const auto cfg = tiny::config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = init_parameters(cfg, 100 + seed);
    auto e = tiny::example(200 + seed, 12, 50);
    for (const char* m : {"full", "layer:0", "layer:1", "lora:4"}) {
      auto mode = parse_peft_mode(m, cfg.n_layers);
      std::optional<LoraAdapters> ad;
      if (is_lora(mode)) {
        ad = attach_lora(p, std::get<LoraMode>(mode), seed);
        tiny::perturb_b(*ad, seed);
      }
      auto rep = finite_diff_check(p, e.tokens, e.targets, e.mask, ad ? &*ad : nullptr, trainable_mask(mode, cfg),
                                   16, 1e-4, seed);
      EXPECT_LT(rep.max_rel_error, 1e-4) << "seed " << seed << " mode " << m << " worst " << rep.worst_tensor;
      EXPECT_GT(rep.coords_checked, 0u);
    }
  }
}

TEST(Gradients, ZeroedTensorIsDetected) {
  const auto cfg = tiny::config();
  auto p = init_parameters(cfg, 11);
  auto e = tiny::example(12, 10, 50);
  auto lg = loss_and_grad(p, e.tokens, e.targets, e.mask, nullptr, trainable_mask(FullMode{}, cfg));
  lg.grads.base.blocks[1].w1.setZero();
  auto rep = compare_finite_differences(p, e.tokens, e.targets, e.mask, nullptr, lg.grads, 16, 1e-4, 1);
  EXPECT_GT(rep.max_rel_error, 0.99);
  EXPECT_EQ(rep.worst_tensor, "block1.ffn.W1");
}

TEST(Gradients, CentralDifferenceErrorShrinksQuadratically) {
  const auto cfg = tiny::config();
  auto p = init_parameters(cfg, 13);
  auto e = tiny::example(14, 10, 50);
  auto lg = loss_and_grad(p, e.tokens, e.targets, e.mask, nullptr, trainable_mask(FullMode{}, cfg));
  const Mat& g = lg.grads.base.blocks[0].w1;
  Eigen::Index r = 0, c = 0;
  g.cwiseAbs().maxCoeff(&r, &c);
  const Eigen::Index i = r * g.cols() + c;
  auto cd_error = [&](double h) {
    Parameters w = p;
    const double orig = w.blocks[0].w1.data()[i];
    w.blocks[0].w1.data()[i] = orig + h;
    const long double up = loss_extended(w, e.tokens, e.targets, e.mask);
    w.blocks[0].w1.data()[i] = orig - h;
    const long double down = loss_extended(w, e.tokens, e.targets, e.mask);
    const long double span = static_cast<long double>(orig + h) - static_cast<long double>(orig - h);
    return std::abs(static_cast<double>((up - down) / span) - g.data()[i]);
  };
  const double ratio = cd_error(2e-2) / cd_error(1e-2);
  EXPECT_GT(ratio, 3.0);
  EXPECT_LT(ratio, 5.0);
}

TEST(Gradients, OnlyMaskedTensorsAllocated) {
  const auto cfg = tiny::config();
  auto p = init_parameters(cfg, 15);
  auto g = make_gradients(p, nullptr, trainable_mask(LayerMode{1}, cfg));
  EXPECT_EQ(g.find("tok_emb"), nullptr);
  EXPECT_EQ(g.find("block0.attn.Wq"), nullptr);
  EXPECT_NE(g.find("block1.attn.Wq"), nullptr);
}

TEST(Decode, RiggedAlwaysSeven) {
  auto p = rigged(7);
  auto out = greedy_decode(p, {1, 2, 3}, 49, 100);
  EXPECT_EQ(out, TokenIds(100, 7));
}

TEST(Decode, RiggedStopFirst) {
  auto p = rigged(49);
  EXPECT_TRUE(greedy_decode(p, {1, 2, 3}, 49, 100).empty());
}

TEST(Decode, CapAndDeterminism) {
  auto p = init_parameters(tiny::config(), 16);
  TokenIds prompt{3, 1, 4, 1, 5};
  for (std::size_t cap : {0u, 1u, 5u, 40u}) EXPECT_LE(greedy_decode(p, prompt, 49, cap).size(), cap);
  EXPECT_EQ(greedy_decode(p, prompt, 49, 40), greedy_decode(p, prompt, 49, 40));
  EXPECT_THROW(greedy_decode(p, {}, 49, 5), Error);
}

TEST(Decode, LongPromptSlidesWindow) {
  auto p = rigged(7);
  auto out = greedy_decode(p, TokenIds(40, 2), 49, 10);
  EXPECT_EQ(out, TokenIds(10, 7));
}
