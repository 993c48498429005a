#pragma once

// Experiment grids for prompting (ELearn), fine-tuning (EFit) and
// fine-tune-then-prompt (ELearnFit), trial statistics and report files.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "elearnfit/common.hpp"
#include "elearnfit/corpus.hpp"
#include "elearnfit/eval.hpp"
#include "elearnfit/model.hpp"
#include "elearnfit/peft.hpp"
#include "elearnfit/prompt.hpp"
#include "elearnfit/retrieval.hpp"
#include "elearnfit/trainer.hpp"

namespace elearnfit {

/// How shots or training examples are chosen. Random draws uniformly;
/// top-k retrieves by tf-idf similarity to the test article. For prompts
/// k = 0 means "as many as the cell's shot count".
struct Selection {
  bool top = false;
  std::size_t k = 0;

  std::string name() const { return !top ? "random" : k ? "top" + std::to_string(k) : "topk"; }
  bool operator==(const Selection&) const = default;
};

inline Selection parse_selection(std::string_view text) {
  auto s = to_lower(trim(text));
  if (s == "random") return {};
  if (s == "topk") return {true, 0};
  if (s.rfind("top", 0) == 0 && s.size() > 3 && s.find_first_not_of("0123456789", 3) == std::string::npos) {
    auto k = std::stoul(s.substr(3));
    if (k < 1) throw Error("selection top-k needs k >= 1");
    return {true, k};
  }
  throw Error("unknown selection policy '" + std::string(text) + "'");
}

enum class GridKind { ELearn, EFit, ELearnFit, Robustness };

inline std::string to_string(GridKind k) {
  switch (k) {
    case GridKind::ELearn: return "elearn";
    case GridKind::EFit: return "efit";
    case GridKind::ELearnFit: return "elearnfit";
    case GridKind::Robustness: break;
  }
  return "robustness";
}

inline GridKind parse_grid_kind(std::string_view s) {
  for (auto k : {GridKind::ELearn, GridKind::EFit, GridKind::ELearnFit, GridKind::Robustness})
    if (to_lower(std::string(s)) == to_string(k)) return k;
  throw Error("unknown grid kind '" + std::string(s) + "'");
}

struct ExperimentGrid {
  std::string name = "grid";
  GridKind kind = GridKind::ELearn;
  std::vector<std::size_t> shots = {0, 1, 2, 4, 8};
  std::vector<Template> templates = {Template::TlDr};
  /// Text forms accepted by parse_peft_mode ("layer:first", "lora:16", ...).
  std::vector<std::string> peft_modes = {"layer:first", "lora:16"};
  std::vector<std::size_t> n_train = {0, 1, 8, 64};
  std::vector<Selection> prompt_selections = {Selection{}};
  std::vector<Selection> train_selections = {Selection{}};
  std::size_t n_trials = 5;
  std::uint64_t base_seed = 0;
  std::size_t token_budget = 256;
  std::size_t max_new_tokens = 100;
  /// Evaluate only the first `max_test` test documents (0 = all).
  std::size_t max_test = 0;
  TrainConfig train;

  void validate() const {
    if (name.empty()) throw Error("grid: name must not be empty");
    if (shots.empty()) throw Error("grid: shots axis is empty");
    if (templates.empty()) throw Error("grid: templates axis is empty");
    if (n_trials < 1) throw Error("grid: n_trials must be >= 1");
    if (kind != GridKind::ELearn) {
      if (peft_modes.empty()) throw Error("grid: peft_modes axis is empty");
      if (n_train.empty()) throw Error("grid: n_train axis is empty");
      if (train_selections.empty()) throw Error("grid: train_selections axis is empty");
    }
    if (prompt_selections.empty()) throw Error("grid: prompt_selections axis is empty");
    for (const auto& s : train_selections)
      if (s.top && s.k == 0) throw Error("grid: train selection needs an explicit k (top1, top2, ...)");
    if (token_budget < 1) throw Error("grid: token_budget must be >= 1");
    train.validate();
  }
};

inline void to_json(nlohmann::json& j, const ExperimentGrid& g) {
  std::vector<std::string> templates, psel, tsel;
  for (auto t : g.templates) templates.emplace_back(to_string(t));
  for (const auto& s : g.prompt_selections) psel.push_back(s.name());
  for (const auto& s : g.train_selections) tsel.push_back(s.name());
  j = {{"name", g.name},
       {"kind", to_string(g.kind)},
       {"shots", g.shots},
       {"templates", templates},
       {"peft_modes", g.peft_modes},
       {"n_train", g.n_train},
       {"prompt_selections", psel},
       {"train_selections", tsel},
       {"n_trials", g.n_trials},
       {"base_seed", g.base_seed},
       {"token_budget", g.token_budget},
       {"max_new_tokens", g.max_new_tokens},
       {"max_test", g.max_test},
       {"train", g.train}};
}

/// Fields absent from `j` keep the values already in `g`, so a config file
/// can override a built-in grid.
inline void from_json(const nlohmann::json& j, ExperimentGrid& g) {
  if (!j.is_object()) throw Error("grid config must be a JSON object");
  static const std::set<std::string> known = {"name",          "kind",          "shots",    "templates",
                                              "peft_modes",    "n_train",       "prompt_selections",
                                              "train_selections", "n_trials",   "base_seed", "token_budget",
                                              "max_new_tokens", "max_test",     "train"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw Error("grid config: unknown key '" + key + "'");
  g.name = j.value("name", g.name);
  if (j.contains("kind")) g.kind = parse_grid_kind(j["kind"].get<std::string>());
  g.shots = j.value("shots", g.shots);
  if (j.contains("templates")) {
    g.templates.clear();
    for (const auto& t : j["templates"]) g.templates.push_back(parse_template(t.get<std::string>()));
  }
  g.peft_modes = j.value("peft_modes", g.peft_modes);
  g.n_train = j.value("n_train", g.n_train);
  auto selections = [&](const char* key, std::vector<Selection>& out) {
    if (!j.contains(key)) return;
    out.clear();
    for (const auto& s : j[key]) out.push_back(parse_selection(s.get<std::string>()));
  };
  selections("prompt_selections", g.prompt_selections);
  selections("train_selections", g.train_selections);
  g.n_trials = j.value("n_trials", g.n_trials);
  g.base_seed = j.value("base_seed", g.base_seed);
  g.token_budget = j.value("token_budget", g.token_budget);
  g.max_new_tokens = j.value("max_new_tokens", g.max_new_tokens);
  g.max_test = j.value("max_test", g.max_test);
  if (j.contains("train")) {
    auto t = g.train;
    from_json(j["train"], t);
    g.train = t;
  }
}

inline std::vector<std::string> builtin_grid_names() {
  return {"elearn", "efit", "elearnfit", "selective", "robustness"};
}

inline ExperimentGrid builtin_grid(std::string_view name) {
  ExperimentGrid g;
  g.name = std::string(name);
  if (name == "elearn") {
    g.kind = GridKind::ELearn;
    g.templates = {Template::TlDr, Template::None};
    g.prompt_selections = {Selection{}, Selection{true, 0}};
  } else if (name == "efit") {
    g.kind = GridKind::EFit;
    g.peft_modes = {"layer:first", "layer:middle", "layer:last", "lora:4", "lora:16", "lora:32"};
  } else if (name == "elearnfit") {
    g.kind = GridKind::ELearnFit;
    g.prompt_selections = {Selection{}, Selection{true, 0}};
  } else if (name == "selective") {
    g.kind = GridKind::EFit;
    g.n_train = {64};
    g.train_selections = {Selection{}, Selection{true, 1}, Selection{true, 2}};
  } else if (name == "robustness") {
    g.kind = GridKind::Robustness;
  } else {
    throw Error("unknown grid '" + std::string(name) + "'");
  }
  return g;
}

struct CaseScore {
  std::string test_id;
  RougeScore score;
};

struct RunRecord {
  std::string grid;
  std::size_t trial = 0;
  Template tmpl = Template::TlDr;
  std::size_t shots = 0;
  std::string prompt_selection = "random";
  std::string peft_mode = "none";
  std::size_t n_train = 0;
  std::string train_selection = "none";
  RougeScore mean;
  std::vector<CaseScore> cases;
  double seconds = 0.0;
  /// Trial seed; shot and training-set seeds derive from it.
  std::uint64_t seed = 0;
};

struct AuditEntry {
  std::string grid;
  std::size_t trial = 0;
  std::string cell;
  std::string test_id;
  std::string prompt;
  std::vector<std::string> shot_ids;
  std::string generated;
  std::string reference;
  RougeScore score;
};

using AuditLog = std::vector<AuditEntry>;

inline std::string cell_label(const RunRecord& r) {
  return "template=" + std::string(to_string(r.tmpl)) + " shots=" + std::to_string(r.shots) +
         " prompt=" + r.prompt_selection + " peft=" + r.peft_mode + " n_train=" + std::to_string(r.n_train) +
         " train=" + r.train_selection;
}

/// Worker count: ELEARNFIT_WORKERS if set (>= 1), else the hardware count.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("ELEARNFIT_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw Error("ELEARNFIT_WORKERS must be a positive integer");
    n = static_cast<std::size_t>(v);
  }
  return n;
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads; the first
/// exception (lowest index) is rethrown.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  std::vector<std::exception_ptr> errors(n);
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace detail {

inline constexpr std::uint64_t kShotStream = 0x5107;
inline constexpr std::uint64_t kTrainSetStream = 0x7a15;

/// Throws if any tensor outside `mask` differs between `base` and `tuned`.
inline void verify_frozen(const Parameters& base, const Parameters& tuned, const TrainableMask& mask) {
  for_each_tensor(
      [&](const std::string& name, const Mat& a, const Mat& b) {
        if (!mask.count(name) && tensor_hash(a) != tensor_hash(b))
          throw Error("frozen tensor " + name + " changed during fine-tuning");
      },
      base, tuned);
}

class GridRunner {
 public:
  GridRunner(const ExperimentGrid& grid, const SplitSet& split, const Parameters& model, const Tokenizer& tok,
             AuditLog* audit)
      : grid_(grid), split_(split), model_(model), tok_(tok), audit_(audit) {
    grid_.validate();
    if (split_.test.empty()) throw Error("grid: test split is empty");
    const std::size_t n = grid_.max_test ? std::min(grid_.max_test, split_.test.size()) : split_.test.size();
    for (std::size_t i = 0; i < n; ++i) tests_.push_back(&split_.test[i]);
    workers_ = worker_count();
  }

  std::uint64_t trial_seed(std::size_t t) const { return grid_.base_seed + t; }

  const TfidfIndex& support_index() {
    if (!support_index_) support_index_ = TfidfIndex::build(split_.support_pool);
    return *support_index_;
  }
  const TfidfIndex& finetune_index() {
    if (!finetune_index_) finetune_index_ = TfidfIndex::build(split_.finetune);
    return *finetune_index_;
  }

  /// Random: a seeded uniform draw from the fine-tune split. Top-k: for each
  /// test article in order, its k nearest fine-tune documents, deduplicated
  /// and truncated to n.
  Corpus training_set(std::size_t n, const Selection& sel, std::uint64_t seed) {
    if (split_.finetune.empty()) throw Error("grid: fine-tune split is empty");
    Corpus out;
    if (!sel.top) {
      if (n > split_.finetune.size())
        throw Error("grid: n_train " + std::to_string(n) + " exceeds the fine-tune split of " +
                    std::to_string(split_.finetune.size()));
      for (auto i : sample_indices(split_.finetune.size(), n, derive_seed(seed, kTrainSetStream)))
        out.add(split_.finetune[i]);
      return out;
    }
    const auto& index = finetune_index();
    for (const auto* t : tests_) {
      for (const auto& hit : index.query(t->article, sel.k)) {
        if (out.size() == n) return out;
        if (!out.contains(hit.id)) out.add(*split_.finetune.find(hit.id));
      }
    }
    return out;
  }

  struct Tuned {
    Parameters params;
    std::optional<LoraAdapters> adapters;
    const LoraAdapters* adapter_ptr() const { return adapters ? &*adapters : nullptr; }
  };

  /// n_train = 0 returns the base model unchanged.
  Tuned fine_tuned(const std::string& mode_text, std::size_t n, const Selection& sel, std::uint64_t seed) {
    if (n == 0) return {model_, std::nullopt};
    const auto mode = parse_peft_mode(mode_text, model_.config.n_layers);
    auto train_set = training_set(n, sel, seed);
    auto tc = grid_.train;
    tc.seed = seed;
    auto r = finetune(model_, mode, train_set, tok_, tc);
    verify_frozen(model_, r.params, trainable_mask(mode, model_.config));
    return {std::move(r.params), std::move(r.adapters)};
  }

  /// Prompts, decodes and scores every test document for one cell.
  void evaluate(RunRecord& rec, const Parameters& params, const LoraAdapters* adapters, const Selection& psel) {
    const auto start = std::chrono::steady_clock::now();
    PromptSpec spec;
    spec.tmpl = rec.tmpl;
    spec.shots = rec.shots;
    spec.token_budget = grid_.token_budget;
    const Retriever* retriever = nullptr;
    if (psel.top && rec.shots > 0) {
      if (psel.k && psel.k != rec.shots)
        throw Error("prompt selection " + psel.name() + " does not match shots=" + std::to_string(rec.shots));
      retriever = &support_index();
    }
    std::vector<AuditEntry> entries(tests_.size());
    rec.cases.assign(tests_.size(), {});
    const std::uint64_t shot_base = derive_seed(rec.seed, kShotStream);
    parallel_for(tests_.size(), workers_, [&](std::size_t i) {
      const Document& doc = *tests_[i];
      try {
        PromptSpec s = spec;
        if (!psel.top) s.selection = RandomSelection{derive_seed(shot_base, i)};
        else s.selection = TopKSelection{};
        auto prompt = assemble(s, split_.support_pool, doc.article, tok_, retriever);
        auto out = greedy_decode(params, tok_.encode(prompt.text), tok_.stop_id(), grid_.max_new_tokens, adapters);
        auto& e = entries[i];
        e.generated = tok_.decode(out);
        e.score = rouge1(e.generated, doc.summary);
        e.prompt = std::move(prompt.text);
        e.shot_ids = std::move(prompt.used_shot_ids);
        e.reference = doc.summary;
        e.test_id = doc.id;
        rec.cases[i] = {doc.id, e.score};
      } catch (const std::exception& ex) {
        throw Error("test " + doc.id + ": " + ex.what());
      }
    });
    std::vector<RougeScore> scores;
    for (const auto& c : rec.cases) scores.push_back(c.score);
    rec.mean = corpus_mean(scores);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (audit_) {
      const auto label = cell_label(rec);
      for (auto& e : entries) {
        e.grid = rec.grid;
        e.trial = rec.trial;
        e.cell = label;
        audit_->push_back(std::move(e));
      }
    }
  }

  std::vector<RunRecord> run_elearn() {
    std::vector<RunRecord> out;
    for (std::size_t t = 0; t < grid_.n_trials; ++t)
      for (auto tmpl : grid_.templates)
        for (auto k : grid_.shots)
          for (const auto& psel : grid_.prompt_selections) {
            RunRecord r = base_record(t);
            r.tmpl = tmpl;
            r.shots = k;
            r.prompt_selection = psel.name();
            evaluate(r, model_, nullptr, psel);
            out.push_back(std::move(r));
          }
    return out;
  }

  std::vector<RunRecord> run_efit() {
    std::vector<RunRecord> out;
    for (std::size_t t = 0; t < grid_.n_trials; ++t)
      for (const auto& mode : grid_.peft_modes)
        for (auto n : grid_.n_train)
          for (const auto& tsel : grid_.train_selections) {
            auto tuned = fine_tuned(mode, n, tsel, trial_seed(t));
            RunRecord r = base_record(t);
            r.peft_mode = canonical_mode(mode);
            r.n_train = n;
            r.train_selection = tsel.name();
            evaluate(r, tuned.params, tuned.adapter_ptr(), Selection{});
            out.push_back(std::move(r));
          }
    return out;
  }

  std::vector<RunRecord> run_elearnfit() {
    std::vector<RunRecord> out;
    for (std::size_t t = 0; t < grid_.n_trials; ++t)
      for (const auto& mode : grid_.peft_modes)
        for (auto n : grid_.n_train)
          for (const auto& tsel : grid_.train_selections) {
            auto tuned = fine_tuned(mode, n, tsel, trial_seed(t));
            for (auto tmpl : grid_.templates)
              for (auto k : grid_.shots)
                for (const auto& psel : grid_.prompt_selections) {
                  RunRecord r = base_record(t);
                  r.tmpl = tmpl;
                  r.shots = k;
                  r.prompt_selection = psel.name();
                  r.peft_mode = canonical_mode(mode);
                  r.n_train = n;
                  r.train_selection = tsel.name();
                  evaluate(r, tuned.params, tuned.adapter_ptr(), psel);
                  out.push_back(std::move(r));
                }
          }
    return out;
  }

 private:
  RunRecord base_record(std::size_t t) const {
    RunRecord r;
    r.grid = grid_.name;
    r.trial = t;
    r.seed = trial_seed(t);
    return r;
  }

  std::string canonical_mode(const std::string& text) const {
    return to_string(parse_peft_mode(text, model_.config.n_layers));
  }

  ExperimentGrid grid_;
  const SplitSet& split_;
  const Parameters& model_;
  const Tokenizer& tok_;
  AuditLog* audit_;
  std::vector<const Document*> tests_;
  std::size_t workers_ = 1;
  std::optional<TfidfIndex> support_index_, finetune_index_;
};

}  // namespace detail

/// One record per (trial, template, shots, prompt selection).
inline std::vector<RunRecord> run_elearn(const ExperimentGrid& grid, const SplitSet& split, const Parameters& model,
                                         const Tokenizer& tok, AuditLog* audit = nullptr) {
  return detail::GridRunner(grid, split, model, tok, audit).run_elearn();
}

/// One record per (trial, peft mode, n_train, train selection); zero-shot
/// TL;DR prompts. n_train = 0 evaluates the base model.
inline std::vector<RunRecord> run_efit(const ExperimentGrid& grid, const SplitSet& split, const Parameters& model,
                                       const Tokenizer& tok, AuditLog* audit = nullptr) {
  return detail::GridRunner(grid, split, model, tok, audit).run_efit();
}

/// Fine-tunes once per (trial, peft mode, n_train, train selection), then
/// prompts the tuned model across templates, shots and prompt selections.
inline std::vector<RunRecord> run_elearnfit(const ExperimentGrid& grid, const SplitSet& split,
                                            const Parameters& model, const Tokenizer& tok,
                                            AuditLog* audit = nullptr) {
  return detail::GridRunner(grid, split, model, tok, audit).run_elearnfit();
}

/// The five robustness models, each run for `grid.n_trials` trials:
/// ELearn (4 random shots), EFit_first / EFit_LoRA16 (64 random examples),
/// ELearnFit_first / ELearnFit_LoRA16 (64 examples, then 4 shots).
inline std::vector<RunRecord> run_robustness(const ExperimentGrid& grid, const SplitSet& split,
                                             const Parameters& model, const Tokenizer& tok,
                                             AuditLog* audit = nullptr) {
  struct Def {
    const char* label;
    GridKind kind;
    const char* mode;
  };
  static constexpr Def defs[] = {{"ELearn", GridKind::ELearn, ""},
                                 {"EFit_first", GridKind::EFit, "layer:first"},
                                 {"EFit_LoRA16", GridKind::EFit, "lora:16"},
                                 {"ELearnFit_first", GridKind::ELearnFit, "layer:first"},
                                 {"ELearnFit_LoRA16", GridKind::ELearnFit, "lora:16"}};
  std::vector<RunRecord> out;
  for (const auto& d : defs) {
    ExperimentGrid g = grid;
    g.name = d.label;
    g.kind = d.kind;
    g.templates = {Template::TlDr};
    g.prompt_selections = {Selection{}};
    g.train_selections = {Selection{}};
    g.shots = {d.kind == GridKind::EFit ? 0u : 4u};
    g.n_train = {64};
    if (*d.mode) g.peft_modes = {d.mode};
    std::vector<RunRecord> part;
    if (d.kind == GridKind::ELearn) part = run_elearn(g, split, model, tok, audit);
    else if (d.kind == GridKind::EFit) part = run_efit(g, split, model, tok, audit);
    else part = run_elearnfit(g, split, model, tok, audit);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

inline std::vector<RunRecord> run_grid(const ExperimentGrid& grid, const SplitSet& split, const Parameters& model,
                                       const Tokenizer& tok, AuditLog* audit = nullptr) {
  switch (grid.kind) {
    case GridKind::ELearn: return run_elearn(grid, split, model, tok, audit);
    case GridKind::EFit: return run_efit(grid, split, model, tok, audit);
    case GridKind::ELearnFit: return run_elearnfit(grid, split, model, tok, audit);
    case GridKind::Robustness: break;
  }
  return run_robustness(grid, split, model, tok, audit);
}

// ---------------------------------------------------------------------------
// Trial statistics

struct TrialStats {
  std::string configuration;  // grid + cell label
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
  double min = 0.0;
  double max = 0.0;
};

inline std::string configuration_key(const RunRecord& r) { return r.grid + " " + cell_label(r); }

/// Mean and sample standard deviation of the cell F1 across trials, per
/// configuration (everything but trial and seed), in first-seen order.
inline std::vector<TrialStats> robustness_stats(const std::vector<RunRecord>& records) {
  if (records.empty()) throw Error("robustness_stats: no records");
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> groups;
  for (const auto& r : records) {
    auto key = configuration_key(r);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(r.mean.f1);
  }
  std::vector<TrialStats> out;
  for (const auto& key : order) {
    const auto& v = groups[key];
    if (v.size() < 2)
      throw Error("robustness_stats: configuration '" + key + "' has " + std::to_string(v.size()) +
                  " trial; at least 2 are required");
    TrialStats s;
    s.configuration = key;
    s.n = v.size();
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    s.min = *std::min_element(v.begin(), v.end());
    s.max = *std::max_element(v.begin(), v.end());
    // Keep the mean inside [min, max] despite summation rounding.
    s.mean = std::clamp(s.mean, s.min, s.max);
    out.push_back(s);
  }
  return out;
}

/// Convenience overload for a bare list of trial F1 values.
inline TrialStats robustness_stats(const std::vector<double>& f1s) {
  std::vector<RunRecord> records;
  for (std::size_t t = 0; t < f1s.size(); ++t) {
    RunRecord r;
    r.grid = "values";
    r.trial = t;
    r.mean.f1 = f1s[t];
    records.push_back(r);
  }
  return robustness_stats(records).front();
}

struct ReferenceStat {
  std::string model;
  double mean;
  double std;
};

/// Published 7B-model robustness numbers (ROUGE-1 F1 over five trials),
/// kept for side-by-side comparison only.
inline const std::vector<ReferenceStat>& reference_robustness() {
  static const std::vector<ReferenceStat> ref = {{"ELearn", 0.2962, 0.0303},
                                                 {"EFit_first", 0.3465, 0.0039},
                                                 {"EFit_LoRA16", 0.3274, 0.0029},
                                                 {"ELearnFit_first", 0.3441, 0.0086},
                                                 {"ELearnFit_LoRA16", 0.3273, 0.0053}};
  return ref;
}

// ---------------------------------------------------------------------------
// Report files

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string exact(double x) {
  std::ostringstream o;
  o << std::setprecision(17) << x;
  return o.str();
}

/// Splits CSV text into rows of fields (RFC 4180 quoting).
inline std::vector<std::vector<std::string>> parse_csv(std::istream& in) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  char c;
  while (in.get(c)) {
    any = true;
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field += '"';
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (quoted) throw Error("csv: unterminated quoted field");
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline const std::vector<std::string>& runs_header() {
  static const std::vector<std::string> h = {"grid",      "trial",   "template",        "shots",     "prompt_selection",
                                             "peft_mode", "n_train", "train_selection", "precision", "recall",
                                             "f1",        "n_cases", "seconds",         "seed",      "cases"};
  return h;
}

}  // namespace detail

inline void write_runs_csv(std::ostream& out, const std::vector<RunRecord>& records) {
  out << join(detail::runs_header(), ",") << '\n';
  for (const auto& r : records) {
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& c : r.cases) cases.push_back({c.test_id, c.score.precision, c.score.recall, c.score.f1});
    std::vector<std::string> f = {r.grid,
                                  std::to_string(r.trial),
                                  std::string(to_string(r.tmpl)),
                                  std::to_string(r.shots),
                                  r.prompt_selection,
                                  r.peft_mode,
                                  std::to_string(r.n_train),
                                  r.train_selection,
                                  detail::exact(r.mean.precision),
                                  detail::exact(r.mean.recall),
                                  detail::exact(r.mean.f1),
                                  std::to_string(r.cases.size()),
                                  detail::exact(r.seconds),
                                  std::to_string(r.seed),
                                  cases.dump()};
    for (std::size_t i = 0; i < f.size(); ++i) out << (i ? "," : "") << detail::csv_field(f[i]);
    out << '\n';
  }
}

inline std::vector<RunRecord> read_runs_csv(std::istream& in) {
  auto rows = detail::parse_csv(in);
  if (rows.empty() || rows[0] != detail::runs_header()) throw Error("runs.csv: unexpected header");
  std::vector<RunRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() != detail::runs_header().size())
      throw Error("runs.csv: row " + std::to_string(i + 1) + " has " + std::to_string(f.size()) + " fields");
    try {
      RunRecord r;
      r.grid = f[0];
      r.trial = std::stoull(f[1]);
      r.tmpl = parse_template(f[2]);
      r.shots = std::stoull(f[3]);
      r.prompt_selection = f[4];
      r.peft_mode = f[5];
      r.n_train = std::stoull(f[6]);
      r.train_selection = f[7];
      r.mean = {std::stod(f[8]), std::stod(f[9]), std::stod(f[10])};
      r.seconds = std::stod(f[12]);
      r.seed = std::stoull(f[13]);
      for (const auto& c : nlohmann::json::parse(f[14]))
        r.cases.push_back({c.at(0).get<std::string>(), {c.at(1).get<double>(), c.at(2).get<double>(), c.at(3).get<double>()}});
      if (r.cases.size() != std::stoull(f[11])) throw Error("case count mismatch");
      out.push_back(std::move(r));
    } catch (const Error& e) {
      throw Error("runs.csv: row " + std::to_string(i + 1) + ": " + e.what());
    } catch (const std::exception&) {
      throw Error("runs.csv: row " + std::to_string(i + 1) + " is malformed");
    }
  }
  return out;
}

inline std::vector<RunRecord> load_runs_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return read_runs_csv(in);
}

inline void write_stats_csv(std::ostream& out, const std::vector<TrialStats>& stats) {
  out << "configuration,n,mean,std,min,max\n";
  for (const auto& s : stats)
    out << detail::csv_field(s.configuration) << ',' << s.n << ',' << detail::exact(s.mean) << ','
        << detail::exact(s.std) << ',' << detail::exact(s.min) << ',' << detail::exact(s.max) << '\n';
}

inline nlohmann::json audit_json(const AuditEntry& e) {
  return {{"grid", e.grid},
          {"trial", e.trial},
          {"cell", e.cell},
          {"test_id", e.test_id},
          {"prompt", e.prompt},
          {"shot_ids", e.shot_ids},
          {"generated", e.generated},
          {"reference", e.reference},
          {"precision", e.score.precision},
          {"recall", e.score.recall},
          {"f1", e.score.f1}};
}

/// Plain-text table: one line per configuration with trial mean and, when
/// available, the sample std; published reference numbers are appended for
/// configurations whose grid name matches one.
inline void write_summary(std::ostream& out, const std::vector<RunRecord>& records,
                          const std::vector<TrialStats>& stats) {
  std::map<std::string, const TrialStats*> by_key;
  for (const auto& s : stats) by_key[s.configuration] = &s;
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunRecord*>> groups;
  for (const auto& r : records) {
    auto key = configuration_key(r);
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  out << std::fixed << std::setprecision(4);
  out << "ROUGE-1 F1 by configuration (" << records.size() << " runs)\n\n";
  for (const auto& key : order) {
    const auto& g = groups[key];
    double sum = 0.0;
    for (const auto* r : g) sum += r->mean.f1;
    out << std::left << std::setw(110) << key << " n=" << g.size() << "  f1=" << sum / static_cast<double>(g.size());
    if (auto it = by_key.find(key); it != by_key.end()) out << " +/- " << it->second->std;
    for (const auto& ref : reference_robustness())
      if (g.front()->grid == ref.model) out << "   [7B reference " << ref.mean << " +/- " << ref.std << "]";
    out << '\n';
  }
}

/// Writes runs.csv, stats.csv, summary.txt and audit.jsonl into `out_dir`.
inline void report(const std::vector<RunRecord>& records, const std::vector<TrialStats>& stats,
                   const AuditLog& audit, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create " + out_dir.string() + ": " + ec.message());
  auto open = [&](const char* name) {
    std::ofstream f(out_dir / name);
    if (!f) throw Error("cannot write " + (out_dir / name).string());
    return f;
  };
  {
    auto f = open("runs.csv");
    write_runs_csv(f, records);
  }
  {
    auto f = open("stats.csv");
    write_stats_csv(f, stats);
  }
  {
    auto f = open("summary.txt");
    write_summary(f, records, stats);
  }
  {
    auto f = open("audit.jsonl");
    for (const auto& e : audit) f << audit_json(e).dump() << '\n';
  }
}

}  // namespace elearnfit
