#pragma once

// Parameter-efficient fine-tuning: which tensors train, and LoRA adapters
// realizing W_ft = W0 + A * B^T.

#include <set>
#include <string>
#include <variant>
#include <vector>

#include "elearnfit/common.hpp"
#include "elearnfit/parameters.hpp"

namespace elearnfit {

struct FullMode {
  bool operator==(const FullMode&) const = default;
};
struct LayerMode {
  std::size_t layer = 0;
  bool operator==(const LayerMode&) const = default;
};
struct LoraMode {
  std::size_t rank = 16;
  std::vector<AttnProj> targets = {AttnProj::Q, AttnProj::V};
  bool operator==(const LoraMode&) const = default;
};
using PeftMode = std::variant<FullMode, LayerMode, LoraMode>;

inline bool is_lora(const PeftMode& m) { return std::holds_alternative<LoraMode>(m); }

/// Canonical text form: "full", "layer:<l>", "lora:<p>" or "lora:<p>:<targets>".
inline std::string to_string(const PeftMode& m) {
  if (std::holds_alternative<FullMode>(m)) return "full";
  if (const auto* l = std::get_if<LayerMode>(&m)) return "layer:" + std::to_string(l->layer);
  const auto& lo = std::get<LoraMode>(m);
  std::string s = "lora:" + std::to_string(lo.rank);
  if (lo.targets != std::vector<AttnProj>{AttnProj::Q, AttnProj::V}) {
    s += ":";
    for (auto t : lo.targets) s += static_cast<char>(std::tolower(proj_name(t)[1]));
  }
  return s;
}

/// Parses the canonical form. "layer:first|middle|last" resolves against
/// `n_layers`.
inline PeftMode parse_peft_mode(std::string_view text, std::size_t n_layers) {
  auto s = to_lower(std::string(text));
  if (s == "full") return FullMode{};
  auto parse_count = [&](const std::string& v) -> std::size_t {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
      throw Error("invalid peft mode '" + std::string(text) + "'");
    return std::stoul(v);
  };
  if (s.rfind("layer:", 0) == 0) {
    auto v = s.substr(6);
    if (n_layers == 0) throw Error("peft mode needs a layer count");
    if (v == "first") return LayerMode{0};
    if (v == "middle") return LayerMode{n_layers / 2};
    if (v == "last") return LayerMode{n_layers - 1};
    return LayerMode{parse_count(v)};
  }
  if (s.rfind("lora:", 0) == 0) {
    auto rest = s.substr(5);
    LoraMode m;
    auto colon = rest.find(':');
    m.rank = parse_count(rest.substr(0, colon));
    if (colon != std::string::npos) {
      m.targets.clear();
      for (char c : rest.substr(colon + 1)) {
        auto p = parse_proj(std::string(1, c));
        if (std::find(m.targets.begin(), m.targets.end(), p) != m.targets.end())
          throw Error("duplicate LoRA target in '" + std::string(text) + "'");
        m.targets.push_back(p);
      }
      if (m.targets.empty()) throw Error("LoRA mode without targets");
    }
    return m;
  }
  throw Error("unknown peft mode '" + std::string(text) + "'");
}

using TrainableMask = std::set<std::string>;

inline std::vector<std::string> base_tensor_names(const ModelConfig& config) {
  Parameters shell;
  shell.blocks.resize(config.n_layers);
  return tensor_names(shell);
}

inline std::string lora_tensor_name(std::size_t layer, AttnProj p, char factor) {
  return block_prefix(layer) + "attn." + std::string(proj_name(p)) + ".lora." + factor;
}

/// Full: every base tensor. Layer(l): the twelve tensors of block l.
/// LoRA: the A and B factors of each targeted projection in every block.
inline TrainableMask trainable_mask(const PeftMode& mode, const ModelConfig& config) {
  TrainableMask mask;
  if (std::holds_alternative<FullMode>(mode)) {
    for (auto& n : base_tensor_names(config)) mask.insert(n);
  } else if (const auto* l = std::get_if<LayerMode>(&mode)) {
    if (l->layer >= config.n_layers)
      throw Error("layer index " + std::to_string(l->layer) + " out of range [0, " +
                  std::to_string(config.n_layers) + ")");
    const auto prefix = block_prefix(l->layer);
    for (auto& n : base_tensor_names(config))
      if (n.rfind(prefix, 0) == 0) mask.insert(n);
  } else {
    const auto& lo = std::get<LoraMode>(mode);
    if (lo.rank < 1) throw Error("LoRA rank must be >= 1");
    if (lo.targets.empty()) throw Error("LoRA mode without targets");
    for (std::size_t l = 0; l < config.n_layers; ++l)
      for (auto t : lo.targets) {
        mask.insert(lora_tensor_name(l, t, 'A'));
        mask.insert(lora_tensor_name(l, t, 'B'));
      }
  }
  return mask;
}

inline const Mat& projection(const BlockWeights& b, AttnProj p) {
  switch (p) {
    case AttnProj::Q: return b.wq;
    case AttnProj::K: return b.wk;
    case AttnProj::V: return b.wv;
    case AttnProj::O: break;
  }
  return b.wo;
}

inline Mat& projection(BlockWeights& b, AttnProj p) {
  return const_cast<Mat&>(projection(static_cast<const BlockWeights&>(b), p));
}

/// A ~ N(0, 0.02^2), B = 0, so the adapted model starts identical to the
/// base model.
inline LoraAdapters attach_lora(const Parameters& params, std::size_t rank, std::vector<AttnProj> targets,
                                std::uint64_t seed) {
  if (rank < 1) throw Error("LoRA rank must be >= 1");
  std::sort(targets.begin(), targets.end());
  targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
  LoraAdapters ad;
  ad.rank = rank;
  ad.targets = targets;
  ad.blocks.resize(params.blocks.size());
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const auto p = static_cast<Eigen::Index>(rank);
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    for (auto t : targets) {
      const Mat& w = projection(params.blocks[l], t);
      LoraFactor f;
      f.a = Mat(w.rows(), p);
      for (Eigen::Index i = 0; i < f.a.size(); ++i) f.a.data()[i] = normal(rng);
      f.b = Mat::Zero(w.cols(), p);
      ad.blocks[l][static_cast<std::size_t>(t)] = std::move(f);
    }
  }
  return ad;
}

inline LoraAdapters attach_lora(const Parameters& params, const LoraMode& mode, std::uint64_t seed) {
  return attach_lora(params, mode.rank, mode.targets, seed);
}

inline Mat effective_weight(const Mat& w0, const LoraFactor& f) {
  if (f.a.rows() != w0.rows() || f.b.rows() != w0.cols() || f.a.cols() != f.b.cols())
    throw Error("LoRA factor shapes [" + std::to_string(f.a.rows()) + "x" + std::to_string(f.a.cols()) + "], [" +
                std::to_string(f.b.rows()) + "x" + std::to_string(f.b.cols()) + "] do not match weight [" +
                std::to_string(w0.rows()) + "x" + std::to_string(w0.cols()) + "]");
  return w0 + f.a * f.b.transpose();
}

/// Folds every adapter into its base matrix.
inline Parameters merge_lora(const Parameters& params, const LoraAdapters& adapters) {
  Parameters out = params;
  for (std::size_t l = 0; l < out.blocks.size(); ++l)
    for (auto t : {AttnProj::Q, AttnProj::K, AttnProj::V, AttnProj::O})
      if (const auto* f = adapters.factor(l, t)) {
        Mat& w = projection(out.blocks[l], t);
        w = effective_weight(w, *f);
      }
  return out;
}

/// Fraction of a d1 x d2 matrix's parameter count that rank-p factors
/// occupy: (1/d1 + 1/d2) * p.
inline double lora_param_ratio(std::size_t d1, std::size_t d2, std::size_t p) {
  if (d1 == 0 || d2 == 0 || p == 0) throw Error("lora_param_ratio: dimensions must be positive");
  return (1.0 / static_cast<double>(d1) + 1.0 / static_cast<double>(d2)) * static_cast<double>(p);
}

inline std::size_t lora_scalar_count(std::size_t d1, std::size_t d2, std::size_t p) { return (d1 + d2) * p; }

}  // namespace elearnfit
