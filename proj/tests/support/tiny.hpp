#pragma once

#include <random>

#include "elearnfit/model.hpp"

namespace tiny {

inline elearnfit::ModelConfig config() { return {2, 16, 2, 32, 32, 50}; }

struct Example {
  elearnfit::TokenIds tokens, targets;
  elearnfit::LossMask mask;
};

/// Random tokens and targets; the mask is random with at least one true entry.
inline Example example(std::uint64_t seed, std::size_t len, std::size_t vocab) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(vocab) - 1);
  std::bernoulli_distribution coin(0.6);
  Example e;
  for (std::size_t i = 0; i < len; ++i) {
    e.tokens.push_back(tok(rng));
    e.targets.push_back(tok(rng));
    e.mask.push_back(coin(rng));
  }
  e.mask.back() = 1;
  return e;
}

/// Fills every B factor with small random values so A receives gradient.
inline void perturb_b(elearnfit::LoraAdapters& ad, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.05);
  elearnfit::for_each_lora_tensor(
      [&](const std::string& name, elearnfit::Mat& m) {
        if (name.back() == 'B')
          for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
      },
      ad);
}

}  // namespace tiny
