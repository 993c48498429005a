#pragma once

// Decoder-only transformer configuration and weight containers.
//
// Tensor naming (checkpoint keys):
//   tok_emb [vocab x d]            pos_emb [ctx x d]
//   block{l}.attn.W{q,k,v,o} [d x d]
//   block{l}.ffn.W1 [d x ff]  block{l}.ffn.b1 [1 x ff]
//   block{l}.ffn.W2 [ff x d]  block{l}.ffn.b2 [1 x d]
//   block{l}.ln{1,2}.{gamma,beta} [1 x d]
//   ln_f.{gamma,beta} [1 x d]      head [d x vocab]
//   block{l}.attn.W{q,k,v,o}.lora.{A,B}  (adapters, [d x p])
//
// Activations are row vectors: a projection computes x * W with W of shape
// [d_in x d_out].

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "elearnfit/common.hpp"

namespace elearnfit {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t context_len = 256;
  std::size_t vocab_size = 0;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1) throw Error("invalid model config: n_layers must be positive");
    if (d_model < 1) throw Error("invalid model config: d_model must be positive");
    if (n_heads < 1) throw Error("invalid model config: n_heads must be positive");
    if (d_model % n_heads != 0) throw Error("invalid model config: d_model must be divisible by n_heads");
    if (d_ff < 1) throw Error("invalid model config: d_ff must be positive");
    if (context_len < 2) throw Error("invalid model config: context_len must be >= 2");
    if (vocab_size < 1) throw Error("invalid model config: vocab_size must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers}, {"d_model", c.d_model},         {"n_heads", c.n_heads},
       {"d_ff", c.d_ff},         {"context_len", c.context_len}, {"vocab_size", c.vocab_size}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.context_len = j.value("context_len", c.context_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
}

struct BlockWeights {
  Mat wq, wk, wv, wo;
  Mat w1, b1, w2, b2;
  Mat ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

struct Parameters {
  ModelConfig config;
  Mat tok_emb;
  Mat pos_emb;
  std::vector<BlockWeights> blocks;
  Mat lnf_gamma, lnf_beta;
  Mat head;
};

inline std::string block_prefix(std::size_t layer) { return "block" + std::to_string(layer) + "."; }

/// Calls f(name, tensor_0, tensor_1, ...) for every named tensor, walking
/// several congruent trees in lockstep. The first tree drives the walk.
template <class F, class First, class... Rest>
void for_each_tensor(F&& f, First& first, Rest&... rest) {
  f(std::string("tok_emb"), first.tok_emb, rest.tok_emb...);
  f(std::string("pos_emb"), first.pos_emb, rest.pos_emb...);
  for (std::size_t l = 0; l < first.blocks.size(); ++l) {
    const auto p = block_prefix(l);
    f(p + "attn.Wq", first.blocks[l].wq, rest.blocks[l].wq...);
    f(p + "attn.Wk", first.blocks[l].wk, rest.blocks[l].wk...);
    f(p + "attn.Wv", first.blocks[l].wv, rest.blocks[l].wv...);
    f(p + "attn.Wo", first.blocks[l].wo, rest.blocks[l].wo...);
    f(p + "ffn.W1", first.blocks[l].w1, rest.blocks[l].w1...);
    f(p + "ffn.b1", first.blocks[l].b1, rest.blocks[l].b1...);
    f(p + "ffn.W2", first.blocks[l].w2, rest.blocks[l].w2...);
    f(p + "ffn.b2", first.blocks[l].b2, rest.blocks[l].b2...);
    f(p + "ln1.gamma", first.blocks[l].ln1_gamma, rest.blocks[l].ln1_gamma...);
    f(p + "ln1.beta", first.blocks[l].ln1_beta, rest.blocks[l].ln1_beta...);
    f(p + "ln2.gamma", first.blocks[l].ln2_gamma, rest.blocks[l].ln2_gamma...);
    f(p + "ln2.beta", first.blocks[l].ln2_beta, rest.blocks[l].ln2_beta...);
  }
  f(std::string("ln_f.gamma"), first.lnf_gamma, rest.lnf_gamma...);
  f(std::string("ln_f.beta"), first.lnf_beta, rest.lnf_beta...);
  f(std::string("head"), first.head, rest.head...);
}

inline std::vector<std::string> tensor_names(const Parameters& p) {
  std::vector<std::string> names;
  for_each_tensor([&](const std::string& n, const Mat&) { names.push_back(n); }, p);
  return names;
}

/// Closed-form scalar count for a config.
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff, v = c.vocab_size;
  const std::size_t per_block = 4 * d * d + d * f + f + f * d + d + 4 * d;
  return v * d + c.context_len * d + c.n_layers * per_block + 2 * d + d * v;
}

inline std::size_t scalar_count(const Parameters& p) {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); }, p);
  return n;
}

/// Same shapes as `p`, all zeros.
inline Parameters zeros_like(const Parameters& p) {
  Parameters z = p;
  for_each_tensor([](const std::string&, Mat& m) { m.setZero(); }, z);
  return z;
}

inline Parameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto d = static_cast<Eigen::Index>(config.d_model);
  const auto f = static_cast<Eigen::Index>(config.d_ff);
  const auto v = static_cast<Eigen::Index>(config.vocab_size);
  const auto c = static_cast<Eigen::Index>(config.context_len);
  Parameters p;
  p.config = config;
  p.tok_emb = Mat(v, d);
  p.pos_emb = Mat(c, d);
  p.blocks.resize(config.n_layers);
  for (auto& b : p.blocks) {
    b.wq = Mat(d, d);
    b.wk = Mat(d, d);
    b.wv = Mat(d, d);
    b.wo = Mat(d, d);
    b.w1 = Mat(d, f);
    b.b1 = Mat::Zero(1, f);
    b.w2 = Mat(f, d);
    b.b2 = Mat::Zero(1, d);
    b.ln1_gamma = Mat::Ones(1, d);
    b.ln1_beta = Mat::Zero(1, d);
    b.ln2_gamma = Mat::Ones(1, d);
    b.ln2_beta = Mat::Zero(1, d);
  }
  p.lnf_gamma = Mat::Ones(1, d);
  p.lnf_beta = Mat::Zero(1, d);
  p.head = Mat(d, v);

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto fill = [&](Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  };
  fill(p.tok_emb);
  fill(p.pos_emb);
  for (auto& b : p.blocks) {
    fill(b.wq);
    fill(b.wk);
    fill(b.wv);
    fill(b.wo);
    fill(b.w1);
    fill(b.w2);
  }
  fill(p.head);
  return p;
}

inline bool bitwise_equal(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::equal(a.data(), a.data() + a.size(), b.data(), [](double x, double y) {
    return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
  });
}

/// FNV-1a over shape and raw bit patterns.
inline std::uint64_t tensor_hash(const Mat& m) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](std::uint64_t x) {
    for (int i = 0; i < 8; ++i) {
      h ^= (x >> (8 * i)) & 0xffU;
      h *= 1099511628211ULL;
    }
  };
  feed(static_cast<std::uint64_t>(m.rows()));
  feed(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) feed(std::bit_cast<std::uint64_t>(m.data()[i]));
  return h;
}

// ---------------------------------------------------------------------------
// LoRA adapter containers

enum class AttnProj : std::uint8_t { Q = 0, K = 1, V = 2, O = 3 };

inline std::string_view proj_name(AttnProj p) {
  static constexpr std::array<std::string_view, 4> names = {"Wq", "Wk", "Wv", "Wo"};
  return names[static_cast<std::size_t>(p)];
}

inline AttnProj parse_proj(std::string_view s) {
  for (auto p : {AttnProj::Q, AttnProj::K, AttnProj::V, AttnProj::O})
    if (s == proj_name(p) || (s.size() == 1 && std::tolower(s[0]) == std::tolower(proj_name(p)[1]))) return p;
  throw Error("unknown attention projection '" + std::string(s) + "'");
}

/// Low-rank factors for one [d1 x d2] matrix: W0 + A * B^T with
/// A [d1 x p] and B [d2 x p].
struct LoraFactor {
  Mat a;
  Mat b;
};

struct LoraAdapters {
  std::size_t rank = 0;
  std::vector<AttnProj> targets;
  std::vector<std::array<std::optional<LoraFactor>, 4>> blocks;

  const LoraFactor* factor(std::size_t layer, AttnProj p) const {
    if (layer >= blocks.size()) return nullptr;
    const auto& f = blocks[layer][static_cast<std::size_t>(p)];
    return f ? &*f : nullptr;
  }
  LoraFactor* factor(std::size_t layer, AttnProj p) {
    if (layer >= blocks.size()) return nullptr;
    auto& f = blocks[layer][static_cast<std::size_t>(p)];
    return f ? &*f : nullptr;
  }
};

/// Calls f(name, A_0, A_1, ...) and f(name, B_0, ...) for every factor
/// present in the first adapter set.
template <class F, class First, class... Rest>
void for_each_lora_tensor(F&& f, First& first, Rest&... rest) {
  for (std::size_t l = 0; l < first.blocks.size(); ++l) {
    for (auto p : {AttnProj::Q, AttnProj::K, AttnProj::V, AttnProj::O}) {
      auto* fac = first.factor(l, p);
      if (!fac) continue;
      const auto base = block_prefix(l) + "attn." + std::string(proj_name(p)) + ".lora.";
      f(base + "A", fac->a, rest.factor(l, p)->a...);
      f(base + "B", fac->b, rest.factor(l, p)->b...);
    }
  }
}

inline LoraAdapters lora_zeros_like(const LoraAdapters& a) {
  LoraAdapters z = a;
  for_each_lora_tensor([](const std::string&, Mat& m) { m.setZero(); }, z);
  return z;
}

}  // namespace elearnfit
