#include <gtest/gtest.h>

#include "elearnfit/model.hpp"
#include "support/tiny.hpp"

using namespace elearnfit;

namespace {

ModelConfig four_layers() { return {4, 32, 4, 64, 32, 40}; }

}  // namespace

TEST(Mask, LayerZeroOnlyBlockZero) {
  auto m = trainable_mask(LayerMode{0}, four_layers());
  EXPECT_EQ(m.size(), 12u);
  for (const auto& n : m) EXPECT_EQ(n.rfind("block0.", 0), 0u) << n;
  EXPECT_FALSE(m.count("tok_emb"));
  EXPECT_FALSE(m.count("head"));
}

TEST(Mask, LoraCountsFactors) {
  auto m = trainable_mask(LoraMode{16, {AttnProj::Q, AttnProj::V}}, four_layers());
  EXPECT_EQ(m.size(), 16u);
  EXPECT_TRUE(m.count("block3.attn.Wv.lora.B"));
}

TEST(Mask, FullIsEveryBaseTensor) {
  auto m = trainable_mask(FullMode{}, four_layers());
  EXPECT_EQ(m.size(), base_tensor_names(four_layers()).size());
  EXPECT_EQ(m.size(), 2u + 12u * 4u + 3u);
}

TEST(Mask, Errors) {
  EXPECT_THROW(trainable_mask(LayerMode{4}, four_layers()), Error);
  EXPECT_THROW(trainable_mask(LoraMode{0, {AttnProj::Q}}, four_layers()), Error);
  EXPECT_THROW(trainable_mask(LoraMode{4, {}}, four_layers()), Error);
}

TEST(Mode, ParseAndPrint) {
  EXPECT_EQ(parse_peft_mode("layer:first", 4), PeftMode{LayerMode{0}});
  EXPECT_EQ(parse_peft_mode("layer:middle", 4), PeftMode{LayerMode{2}});
  EXPECT_EQ(parse_peft_mode("layer:last", 4), PeftMode{LayerMode{3}});
  EXPECT_EQ(parse_peft_mode("full", 4), PeftMode{FullMode{}});
  EXPECT_EQ(parse_peft_mode("lora:16", 4), (PeftMode{LoraMode{16, {AttnProj::Q, AttnProj::V}}}));
  EXPECT_EQ(parse_peft_mode("lora:4:qkvo", 4), (PeftMode{LoraMode{4, {AttnProj::Q, AttnProj::K, AttnProj::V, AttnProj::O}}}));
  for (const char* s : {"full", "layer:2", "lora:32", "lora:4:ko"})
    EXPECT_EQ(to_string(parse_peft_mode(s, 4)), s);
  for (const char* s : {"lora:", "lora:x", "layer:", "bitfit", "lora:4:qq", "lora:4:z"})
    EXPECT_THROW(parse_peft_mode(s, 4), Error) << s;
}

TEST(Attach, ShapesAndZeroB) {
  auto p = init_parameters({2, 128, 4, 256, 16, 30}, 1);
  auto ad = attach_lora(p, 4, {AttnProj::Q, AttnProj::V}, 7);
  const auto* f = ad.factor(0, AttnProj::Q);
  ASSERT_NE(f, nullptr);
  EXPECT_EQ(f->a.rows(), 128);
  EXPECT_EQ(f->a.cols(), 4);
  EXPECT_EQ(f->b.rows(), 128);
  EXPECT_TRUE(f->b.isZero(0.0));
  EXPECT_EQ(ad.factor(1, AttnProj::K), nullptr);
  EXPECT_GT(f->a.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Attach, DeterministicPerSeed) {
  auto p = init_parameters(tiny::config(), 1);
  auto a = attach_lora(p, 4, {AttnProj::Q, AttnProj::V}, 3);
  auto b = attach_lora(p, 4, {AttnProj::Q, AttnProj::V}, 3);
  for_each_lora_tensor([](const std::string& n, const Mat& x, const Mat& y) { EXPECT_TRUE(bitwise_equal(x, y)) << n; }, a,
                       b);
}

TEST(Attach, IdentityAtStart) {
  auto p = init_parameters(tiny::config(), 2);
  auto ad = attach_lora(p, 4, {AttnProj::Q, AttnProj::K, AttnProj::V, AttnProj::O}, 5);
  Rng rng(9);
  std::uniform_int_distribution<int> tok(0, 49), len(1, 32);
  for (int i = 0; i < 100; ++i) {
    TokenIds t(len(rng));
    for (auto& x : t) x = tok(rng);
    EXPECT_LE((forward(p, t, &ad) - forward(p, t)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(Effective, ZeroBIsBaseWeight) {
  Mat w0 = Mat::Random(3, 5);
  LoraFactor f{Mat::Random(3, 2), Mat::Zero(5, 2)};
  EXPECT_TRUE(bitwise_equal(effective_weight(w0, f), w0));
}

TEST(Effective, HandOuterProduct) {
  Mat w0 = Mat::Zero(2, 2);
  Mat a(2, 1), b(2, 1);
  a << 1, 0;
  b << 0, 1;
  Mat want(2, 2);
  want << 0, 1, 0, 0;
  EXPECT_TRUE(bitwise_equal(effective_weight(w0, {a, b}), want));
}

TEST(Effective, MergedModelMatchesAdapters) {
  auto p = init_parameters(tiny::config(), 4);
  auto ad = attach_lora(p, 4, {AttnProj::Q, AttnProj::V}, 5);
  tiny::perturb_b(ad, 6);
  auto merged = merge_lora(p, ad);
  TokenIds t{1, 7, 3, 9, 22, 41};
  EXPECT_LT((forward(p, t, &ad) - forward(merged, t)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT((forward(p, t, &ad) - forward(p, t)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Ratio, ClosedForm) {
  EXPECT_EQ(lora_param_ratio(4096, 4096, 16), 0.0078125);
  EXPECT_EQ(lora_param_ratio(128, 128, 4), 0.0625);
  EXPECT_EQ(lora_param_ratio(64, 64, 64), 2.0);
  EXPECT_EQ(lora_scalar_count(4096, 4096, 16), 131072u);
  EXPECT_DOUBLE_EQ(lora_param_ratio(300, 200, 8), double(lora_scalar_count(300, 200, 8)) / (300.0 * 200.0));
}
