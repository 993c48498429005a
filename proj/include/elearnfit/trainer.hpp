#pragma once

// Pre-training and PEFT fine-tuning loops (Adam, global-norm clipping).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "elearnfit/common.hpp"
#include "elearnfit/corpus.hpp"
#include "elearnfit/model.hpp"
#include "elearnfit/peft.hpp"
#include "elearnfit/prompt.hpp"

namespace elearnfit {

struct TrainConfig {
  std::size_t iterations = 10;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (iterations < 1) throw Error("train config: iterations must be >= 1");
    if (batch_size < 1) throw Error("train config: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw Error("train config: learning_rate must be positive");
    if (!(grad_clip_norm > 0.0)) throw Error("train config: grad_clip_norm must be positive");
    if (!(eps > 0.0)) throw Error("train config: eps must be positive");
    if (weight_decay < 0.0) throw Error("train config: weight_decay must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"iterations", c.iterations}, {"batch_size", c.batch_size},     {"learning_rate", c.learning_rate},
       {"beta1", c.beta1},           {"beta2", c.beta2},               {"eps", c.eps},
       {"weight_decay", c.weight_decay}, {"grad_clip_norm", c.grad_clip_norm}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  c.seed = j.value("seed", c.seed);
}

/// Draws documents uniformly without replacement; once every document has
/// been drawn the order is reshuffled and drawing continues.
class Sampler {
 public:
  Sampler(std::size_t pool_size, std::uint64_t seed) : order_(pool_size), rng_(seed) {
    if (pool_size == 0) throw Error("cannot sample from an empty pool");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  /// Up to `n` indices not yet drawn in the current pass.
  std::vector<std::size_t> draw(std::size_t n) {
    if (n < 1) throw Error("sample size must be >= 1");
    if (cursor_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    const std::size_t take = std::min(n, order_.size() - cursor_);
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
    cursor_ += take;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

inline std::vector<Document> sample_without_replacement(Sampler& sampler, const Corpus& pool, std::size_t n) {
  std::vector<Document> out;
  for (auto i : sampler.draw(n)) out.push_back(pool[i]);
  return out;
}

/// Next-token training sequence. targets[i] = sequence[i + 1]; mask is true
/// on positions whose target lies in the summary or the trailing STOP.
struct TrainingExample {
  TokenIds tokens;
  TokenIds targets;
  LossMask mask;
};

/// `{shots...} article TL;DR: summary STOP`, loss on `summary STOP`. With
/// `loss_on_shots` the demonstration summaries are scored as well.
inline TrainingExample make_example(const Tokenizer& tok, const std::vector<ShotPair>& shots, const Document& doc,
                                    bool loss_on_shots = false) {
  // Built piecewise; identical to encoding the rendered text because the
  // tokenizer splits on whitespace.
  TokenIds seq;
  std::vector<std::uint8_t> scored;  // scored[i]: seq[i] is a loss target
  auto append = [&](const TokenIds& ids, bool s) {
    for (TokenId t : ids) {
      seq.push_back(t);
      scored.push_back(s ? 1 : 0);
    }
  };
  for (const auto& sh : shots) {
    append(tok.encode(sh.article), false);
    append({tok.marker_id()}, false);
    append(tok.encode(sh.summary), loss_on_shots);
  }
  append(tok.encode(doc.article), false);
  append({tok.marker_id()}, false);
  append(tok.encode(doc.summary), true);
  append({tok.stop_id()}, true);

  TrainingExample ex;
  ex.tokens.assign(seq.begin(), seq.end() - 1);
  ex.targets.assign(seq.begin() + 1, seq.end());
  ex.mask.assign(scored.begin() + 1, scored.end());
  return ex;
}

inline TrainingExample make_example(const Tokenizer& tok, const Document& doc) { return make_example(tok, {}, doc); }

struct TraceRow {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;  // after clipping
  double raw_grad_norm = 0.0;
};

struct LossTrace {
  std::vector<TraceRow> rows;
  std::size_t skipped = 0;

  void write_csv(std::ostream& out) const {
    out << "step,loss,grad_norm\n";
    out.precision(17);
    for (const auto& r : rows) out << r.step << ',' << r.loss << ',' << r.grad_norm << '\n';
  }
  void save_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    write_csv(out);
  }
};

/// Adam with decoupled weight decay over the tensors present in a
/// Gradients tree.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(Parameters& params, LoraAdapters* adapters, const Gradients& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto update = [&](const std::string& name, Mat& w, const Mat& g) {
      if (!g.size()) return;
      auto& st = state_[name];
      if (!st.m.size()) {
        st.m = Mat::Zero(w.rows(), w.cols());
        st.v = Mat::Zero(w.rows(), w.cols());
      }
      st.m = cfg_.beta1 * st.m + (1.0 - cfg_.beta1) * g;
      st.v = cfg_.beta2 * st.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      Mat upd = (st.m / bc1).array() / ((st.v / bc2).array().sqrt() + cfg_.eps);
      if (cfg_.weight_decay > 0.0) upd += cfg_.weight_decay * w;
      w -= cfg_.learning_rate * upd;
    };
    for_each_tensor(update, params, grads.base);
    if (adapters) for_each_lora_tensor(update, *adapters, grads.lora);
  }

  std::size_t steps_taken() const { return t_; }
  std::size_t tracked_tensors() const { return state_.size(); }

 private:
  struct Moments {
    Mat m, v;
  };
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> state_;
};

/// Averages gradients over `batch`, clips the global norm, applies one
/// optimizer step. Returns the trace row (step filled by the caller).
inline TraceRow train_step(Parameters& params, LoraAdapters* adapters, const std::vector<TrainingExample>& batch,
                           Gradients& grads, AdamOptimizer& opt, double clip_norm) {
  if (batch.empty()) throw Error("empty training batch");
  grads.set_zero();
  TraceRow row;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch)
    row.loss += w * accumulate_loss_and_grad(params, ex.tokens, ex.targets, ex.mask, adapters, grads, w);
  row.raw_grad_norm = std::sqrt(grads.squared_norm());
  if (row.raw_grad_norm > clip_norm) grads.scale(clip_norm / row.raw_grad_norm);
  row.grad_norm = std::sqrt(grads.squared_norm());
  opt.step(params, adapters, grads);
  return row;
}

struct PretrainResult {
  Parameters params;
  LossTrace trace;
};

/// Full-parameter training from a fresh initialization. Each sample is a
/// TL;DR-rendered document preceded by up to `max_shots` other documents
/// as in-context demonstrations (the count is uniform in [0, max_shots] and
/// reduced until the sample fits the context window). Every summary in the
/// sample is scored.
inline PretrainResult pretrain(const ModelConfig& config, const Corpus& corpus, const Tokenizer& tok,
                               const TrainConfig& tc, std::size_t steps, std::size_t max_shots = 0) {
  tc.validate();
  if (corpus.empty()) throw Error("pretrain: empty corpus");
  if (config.vocab_size != tok.vocab_size()) throw Error("pretrain: model vocab_size does not match tokenizer");
  for (const auto& d : corpus) {
    auto ex = make_example(tok, d);
    if (ex.tokens.size() > config.context_len)
      throw Error("pretrain: document " + d.id + " exceeds context_len");
  }
  PretrainResult out{init_parameters(config, tc.seed), {}};
  if (steps == 0) return out;

  auto grads = make_gradients(out.params, nullptr, trainable_mask(FullMode{}, config));
  AdamOptimizer opt(tc);
  Sampler sampler(corpus.size(), derive_seed(tc.seed, 1));
  Rng shot_rng(derive_seed(tc.seed, 2));
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<TrainingExample> batch;
    for (auto i : sampler.draw(tc.batch_size)) {
      std::size_t k = max_shots ? std::uniform_int_distribution<std::size_t>(0, max_shots)(shot_rng) : 0;
      std::vector<ShotPair> shots;
      for (std::size_t j = 0; j < k && corpus.size() > 1; ++j) {
        std::size_t o = std::uniform_int_distribution<std::size_t>(0, corpus.size() - 2)(shot_rng);
        if (o >= i) ++o;
        shots.push_back({corpus[o].article, corpus[o].summary});
      }
      auto ex = make_example(tok, shots, corpus[i], true);
      while (ex.tokens.size() > config.context_len && !shots.empty()) {
        shots.erase(shots.begin());
        ex = make_example(tok, shots, corpus[i], true);
      }
      batch.push_back(std::move(ex));
    }
    auto row = train_step(out.params, nullptr, batch, grads, opt, tc.grad_clip_norm);
    row.step = s + 1;
    out.trace.rows.push_back(row);
  }
  return out;
}

struct FinetuneResult {
  Parameters params;
  std::optional<LoraAdapters> adapters;
  LossTrace trace;

  const LoraAdapters* adapter_ptr() const { return adapters ? &*adapters : nullptr; }
};

/// Runs `tc.iterations` optimizer steps under `mode`. Each step draws a
/// batch without replacement from `train_set`. Tensors outside the
/// trainable mask are never written.
inline FinetuneResult finetune(const Parameters& base, const PeftMode& mode, const Corpus& train_set,
                               const Tokenizer& tok, const TrainConfig& tc) {
  tc.validate();
  if (train_set.empty()) throw Error("finetune: empty training set");
  FinetuneResult out{base, std::nullopt, {}};
  if (const auto* lo = std::get_if<LoraMode>(&mode)) out.adapters = attach_lora(base, *lo, derive_seed(tc.seed, 3));

  std::vector<TrainingExample> examples;
  for (const auto& d : train_set) {
    auto ex = make_example(tok, d);
    if (ex.tokens.size() > base.config.context_len) {
      ++out.trace.skipped;
      std::cerr << "warning: finetune skips document " << d.id << " (exceeds context_len)\n";
      examples.emplace_back();
    } else {
      examples.push_back(std::move(ex));
    }
  }
  if (out.trace.skipped == train_set.size()) throw Error("finetune: every training document exceeds context_len");

  LoraAdapters* adapters = out.adapters ? &*out.adapters : nullptr;
  auto grads = make_gradients(out.params, adapters, trainable_mask(mode, base.config));
  AdamOptimizer opt(tc);
  Sampler sampler(train_set.size(), derive_seed(tc.seed, 4));
  for (std::size_t it = 0; it < tc.iterations; ++it) {
    std::vector<TrainingExample> batch;
    // Skipped documents still consume their draw; redraw until the batch
    // has at least one usable example.
    while (batch.empty()) {
      for (auto i : sampler.draw(tc.batch_size))
        if (!examples[i].tokens.empty()) batch.push_back(examples[i]);
    }
    auto row = train_step(out.params, adapters, batch, grads, opt, tc.grad_clip_norm);
    row.step = it + 1;
    out.trace.rows.push_back(row);
  }
  return out;
}

}  // namespace elearnfit
