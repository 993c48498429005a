// elearnfit command-line driver.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "elearnfit/checkpoint.hpp"
#include "elearnfit/corpus.hpp"
#include "elearnfit/eval.hpp"
#include "elearnfit/harness.hpp"
#include "elearnfit/model.hpp"
#include "elearnfit/peft.hpp"
#include "elearnfit/prompt.hpp"
#include "elearnfit/retrieval.hpp"
#include "elearnfit/trainer.hpp"

namespace fs = std::filesystem;
using namespace elearnfit;

namespace {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": invalid JSON (" + e.what() + ")");
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

CheckpointFormat parse_format(const std::string& s) {
  if (s == "json") return CheckpointFormat::Json;
  if (s == "binary") return CheckpointFormat::Binary;
  throw Error("unknown checkpoint format '" + s + "'");
}

struct TrainFlags {
  TrainConfig tc;
  void add(CLI::App* app) {
    app->add_option("--batch-size", tc.batch_size, "examples per optimizer step")->capture_default_str();
    app->add_option("--lr", tc.learning_rate, "Adam learning rate")->capture_default_str();
    app->add_option("--weight-decay", tc.weight_decay, "decoupled weight decay")->capture_default_str();
    app->add_option("--clip", tc.grad_clip_norm, "global gradient-norm clip")->capture_default_str();
    app->add_option("--seed", tc.seed, "training seed")->capture_default_str();
  }
};

SplitSet load_split_dir(const fs::path& dir) {
  return {load_jsonl(dir / "finetune.jsonl"), load_jsonl(dir / "test.jsonl"), load_jsonl(dir / "support.jsonl")};
}

Checkpoint load_model(const std::string& path, const Tokenizer& tok) {
  auto ck = load_checkpoint(path);
  if (ck.params.config.vocab_size != tok.vocab_size())
    throw Error("model vocab_size " + std::to_string(ck.params.config.vocab_size) + " does not match tokenizer (" +
                std::to_string(tok.vocab_size()) + ")");
  return ck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompting and parameter-efficient fine-tuning experiments on a toy summarizer"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic key/value corpus as JSONL");
  std::string gen_config, gen_out, gen_separator;
  std::size_t gen_n = 0;
  std::uint64_t gen_seed = 0;
  bool gen_seed_set = false;
  gen->add_option("--config", gen_config, "SyntheticTaskConfig JSON file");
  gen->add_option("-n,--n-documents", gen_n, "number of documents (overrides config)");
  gen->add_option("--seed", gen_seed, "generator seed (overrides config)")->each([&](const std::string&) {
    gen_seed_set = true;
  });
  gen->add_option("--separator", gen_separator, "key/value separator token (overrides config)");
  gen->add_option("-o,--out", gen_out, "output JSONL")->required();

  // prepare
  auto* prep = app.add_subcommand("prepare", "length-filter, split, and build a tokenizer");
  std::string prep_in, prep_out;
  std::vector<std::string> prep_vocab_from;
  std::size_t prep_ft = 256, prep_test = 125, prep_words = 100, prep_vocab = 20000;
  prep->add_option("-i,--in", prep_in, "input JSONL (document/summary records)")->required();
  prep->add_option("-o,--out-dir", prep_out, "output directory")->required();
  prep->add_option("--n-finetune", prep_ft, "fine-tune split size")->capture_default_str();
  prep->add_option("--n-test", prep_test, "test split size")->capture_default_str();
  prep->add_option("--max-words", prep_words, "combined article+summary word limit")->capture_default_str();
  prep->add_option("--max-vocab", prep_vocab, "tokenizer vocabulary cap")->capture_default_str();
  prep->add_option("--vocab-from", prep_vocab_from, "extra JSONL corpora to include in the vocabulary");

  // build-index
  auto* bidx = app.add_subcommand("build-index", "build a tf-idf index over a pool");
  std::string bidx_pool, bidx_out;
  bidx->add_option("--pool", bidx_pool, "pool JSONL")->required();
  bidx->add_option("-o,--out", bidx_out, "index JSON")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "full-parameter training from scratch");
  std::string pre_corpus, pre_tok, pre_out, pre_trace, pre_format = "binary", pre_model_config;
  ModelConfig pre_mc;
  std::size_t pre_steps = 500, pre_shots = 0;
  TrainFlags pre_tf;
  pre->add_option("--corpus", pre_corpus, "training JSONL")->required();
  pre->add_option("--tokenizer", pre_tok, "tokenizer JSON")->required();
  pre->add_option("-o,--out", pre_out, "output checkpoint")->required();
  pre->add_option("--model-config", pre_model_config, "ModelConfig JSON file");
  pre->add_option("--layers", pre_mc.n_layers)->capture_default_str();
  pre->add_option("--d-model", pre_mc.d_model)->capture_default_str();
  pre->add_option("--heads", pre_mc.n_heads)->capture_default_str();
  pre->add_option("--d-ff", pre_mc.d_ff)->capture_default_str();
  pre->add_option("--context", pre_mc.context_len)->capture_default_str();
  pre->add_option("--steps", pre_steps)->capture_default_str();
  pre->add_option("--max-shots", pre_shots, "demonstrations packed before each sample")->capture_default_str();
  pre->add_option("--trace", pre_trace, "loss trace CSV");
  pre->add_option("--format", pre_format, "json or binary")->capture_default_str();
  pre_tf.add(pre);

  // finetune
  auto* ft = app.add_subcommand("finetune", "fine-tune under a PEFT mode");
  std::string ft_model, ft_tok, ft_train, ft_mode = "layer:first", ft_out, ft_trace, ft_format = "binary";
  bool ft_merged = false;
  TrainFlags ft_tf;
  ft->add_option("--model", ft_model, "base checkpoint")->required();
  ft->add_option("--tokenizer", ft_tok, "tokenizer JSON")->required();
  ft->add_option("--train", ft_train, "training JSONL")->required();
  ft->add_option("--mode", ft_mode, "full | layer:<l|first|middle|last> | lora:<rank>[:targets]")
      ->capture_default_str();
  ft->add_option("--iterations", ft_tf.tc.iterations)->capture_default_str();
  ft->add_option("-o,--out", ft_out, "output checkpoint")->required();
  ft->add_option("--trace", ft_trace, "loss trace CSV");
  ft->add_option("--format", ft_format, "json or binary")->capture_default_str();
  ft->add_flag("--merged", ft_merged, "fold LoRA factors into the base weights");
  ft_tf.add(ft);

  // generate / eval share prompt options
  struct PromptFlags {
    std::string tmpl = "tldr", selection = "random", pool;
    std::size_t shots = 0, budget = 256, max_new = 100;
    std::uint64_t seed = 0;
    void add(CLI::App* a) {
      a->add_option("--template", tmpl, "tldr or none")->capture_default_str();
      a->add_option("--shots", shots)->capture_default_str();
      a->add_option("--selection", selection, "random or topk")->capture_default_str();
      a->add_option("--pool", pool, "support pool JSONL for shots");
      a->add_option("--budget", budget, "prompt token budget")->capture_default_str();
      a->add_option("--max-new", max_new)->capture_default_str();
      a->add_option("--seed", seed, "shot sampling seed")->capture_default_str();
    }
  };

  auto* gen1 = app.add_subcommand("generate", "summarize one article");
  std::string g_model, g_tok, g_article;
  PromptFlags g_pf;
  gen1->add_option("--model", g_model)->required();
  gen1->add_option("--tokenizer", g_tok)->required();
  gen1->add_option("--article", g_article)->required();
  g_pf.add(gen1);

  auto* ev = app.add_subcommand("eval", "score a model on a test set");
  std::string e_model, e_tok, e_test, e_audit;
  PromptFlags e_pf;
  ev->add_option("--model", e_model)->required();
  ev->add_option("--tokenizer", e_tok)->required();
  ev->add_option("--test", e_test, "test JSONL")->required();
  ev->add_option("--audit", e_audit, "per-case JSONL output");
  e_pf.add(ev);

  // run
  auto* run = app.add_subcommand("run", "run an experiment grid and write report files");
  std::string r_grid, r_config, r_data, r_model, r_tok, r_out;
  run->add_option("grid", r_grid, "built-in grid: elearn, efit, elearnfit, selective, robustness")->required();
  run->add_option("--config", r_config, "JSON overriding ExperimentGrid fields");
  run->add_option("--data", r_data, "directory with finetune/test/support JSONL")->required();
  run->add_option("--model", r_model, "pretrained checkpoint")->required();
  run->add_option("--tokenizer", r_tok)->required();
  run->add_option("-o,--out-dir", r_out)->required();

  // report
  auto* rep = app.add_subcommand("report", "recompute stats and summary from runs.csv");
  std::string rep_runs, rep_out;
  rep->add_option("--runs", rep_runs, "runs.csv")->required();
  rep->add_option("-o,--out-dir", rep_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      SyntheticTaskConfig cfg;
      if (!gen_config.empty()) cfg = read_json_file(gen_config).get<SyntheticTaskConfig>();
      if (gen_n) cfg.n_documents = gen_n;
      if (gen_seed_set) cfg.seed = gen_seed;
      if (!gen_separator.empty()) cfg.separator = gen_separator;
      auto corpus = generate_synthetic(cfg);
      save_jsonl(gen_out, corpus);
      std::cout << "wrote " << corpus.size() << " documents to " << gen_out << '\n';
    } else if (*prep) {
      auto raw = load_jsonl(prep_in);
      auto filtered = filter_by_length(raw, prep_words);
      auto s = split(filtered, prep_ft, prep_test);
      fs::create_directories(prep_out);
      save_jsonl(fs::path(prep_out) / "finetune.jsonl", s.finetune);
      save_jsonl(fs::path(prep_out) / "test.jsonl", s.test);
      save_jsonl(fs::path(prep_out) / "support.jsonl", s.support_pool);
      std::vector<Corpus> extra;
      for (const auto& p : prep_vocab_from) extra.push_back(load_jsonl(p));
      std::vector<const Corpus*> sources{&filtered};
      for (const auto& c : extra) sources.push_back(&c);
      auto tok = build_tokenizer(sources, prep_vocab);
      tok.save(fs::path(prep_out) / "tokenizer.json");
      std::cout << "raw " << raw.size() << ", filtered " << filtered.size() << ", finetune " << s.finetune.size()
                << ", test " << s.test.size() << ", support " << s.support_pool.size() << ", vocab "
                << tok.vocab_size() << '\n';
    } else if (*bidx) {
      auto idx = build_index(load_jsonl(bidx_pool));
      idx.save(bidx_out);
      std::cout << "indexed " << idx.ids().size() << " documents, " << idx.terms().size() << " terms\n";
    } else if (*pre) {
      auto tok = Tokenizer::load(pre_tok);
      auto corpus = load_jsonl(pre_corpus);
      ModelConfig mc = pre_mc;
      if (!pre_model_config.empty()) mc = read_json_file(pre_model_config).get<ModelConfig>();
      mc.vocab_size = tok.vocab_size();
      auto r = pretrain(mc, corpus, tok, pre_tf.tc, pre_steps, pre_shots);
      save_checkpoint(pre_out, r.params, nullptr, parse_format(pre_format));
      if (!pre_trace.empty()) r.trace.save_csv(pre_trace);
      if (!r.trace.rows.empty())
        std::cout << "loss " << r.trace.rows.front().loss << " -> " << r.trace.rows.back().loss << '\n';
      std::cout << "saved " << pre_out << '\n';
    } else if (*ft) {
      auto tok = Tokenizer::load(ft_tok);
      auto base = load_model(ft_model, tok);
      if (base.adapters) throw Error("finetune expects a checkpoint without adapters");
      auto mode = parse_peft_mode(ft_mode, base.params.config.n_layers);
      auto r = finetune(base.params, mode, load_jsonl(ft_train), tok, ft_tf.tc);
      const auto fmt = parse_format(ft_format);
      if (ft_merged && r.adapters) save_merged_checkpoint(ft_out, r.params, *r.adapters, fmt);
      else save_checkpoint(ft_out, r.params, r.adapter_ptr(), fmt);
      if (!ft_trace.empty()) r.trace.save_csv(ft_trace);
      std::cout << "loss " << r.trace.rows.front().loss << " -> " << r.trace.rows.back().loss;
      if (r.trace.skipped) std::cout << " (" << r.trace.skipped << " documents skipped)";
      std::cout << "\nsaved " << ft_out << '\n';
    } else if (*gen1 || *ev) {
      const bool single = gen1->parsed();
      auto& pf = single ? g_pf : e_pf;
      auto tok = Tokenizer::load(single ? g_tok : e_tok);
      auto ck = load_model(single ? g_model : e_model, tok);
      const LoraAdapters* adapters = ck.adapters ? &*ck.adapters : nullptr;
      Corpus pool;
      if (!pf.pool.empty()) pool = load_jsonl(pf.pool);
      if (pf.shots > 0 && pool.empty()) throw Error("--shots needs a non-empty --pool");
      std::optional<TfidfIndex> index;
      const auto sel = parse_selection(pf.selection);
      if (sel.top && pf.shots > 0) index = build_index(pool);
      auto summarize = [&](const std::string& article, std::size_t i) {
        PromptSpec spec;
        spec.tmpl = parse_template(pf.tmpl);
        spec.shots = pf.shots;
        spec.token_budget = pf.budget;
        if (sel.top) spec.selection = TopKSelection{};
        else spec.selection = RandomSelection{derive_seed(pf.seed, i)};
        auto prompt = assemble(spec, pool, article, tok, index ? &*index : nullptr);
        auto out = greedy_decode(ck.params, tok.encode(prompt.text), tok.stop_id(), pf.max_new, adapters);
        return std::pair{prompt, tok.decode(out)};
      };
      if (single) {
        auto [prompt, text] = summarize(g_article, 0);
        std::cout << text << '\n';
      } else {
        auto test = load_jsonl(e_test);
        std::ofstream audit;
        if (!e_audit.empty()) {
          audit.open(e_audit);
          if (!audit) throw Error("cannot write " + e_audit);
        }
        std::vector<RougeScore> scores;
        for (std::size_t i = 0; i < test.size(); ++i) {
          auto [prompt, text] = summarize(test[i].article, i);
          scores.push_back(rouge1(text, test[i].summary));
          if (audit.is_open()) {
            AuditEntry e{"eval", 0, "", test[i].id, prompt.text, prompt.used_shot_ids, text, test[i].summary,
                         scores.back()};
            audit << audit_json(e).dump() << '\n';
          }
        }
        auto m = corpus_mean(scores);
        std::cout << "n=" << scores.size() << " precision=" << m.precision << " recall=" << m.recall
                  << " f1=" << m.f1 << '\n';
      }
    } else if (*run) {
      auto grid = builtin_grid(r_grid);
      if (!r_config.empty()) from_json(read_json_file(r_config), grid);
      grid.validate();
      auto tok = Tokenizer::load(r_tok);
      auto ck = load_model(r_model, tok);
      if (ck.adapters) throw Error("run expects a pretrained checkpoint without adapters");
      auto split = load_split_dir(r_data);
      AuditLog audit;
      auto records = run_grid(grid, split, ck.params, tok, &audit);
      std::vector<TrialStats> stats;
      if (grid.n_trials >= 2) stats = robustness_stats(records);
      report(records, stats, audit, r_out);
      write_json_file(fs::path(r_out) / "grid.json", grid);
      std::cout << records.size() << " runs, " << audit.size() << " decoded test cases; report in " << r_out
                << '\n';
    } else if (*rep) {
      auto records = load_runs_csv(rep_runs);
      std::vector<TrialStats> stats;
      try {
        stats = robustness_stats(records);
      } catch (const Error& e) {
        std::cerr << "note: no trial statistics (" << e.what() << ")\n";
      }
      fs::create_directories(rep_out);
      std::ofstream s(fs::path(rep_out) / "stats.csv");
      if (!s) throw Error("cannot write " + (fs::path(rep_out) / "stats.csv").string());
      write_stats_csv(s, stats);
      std::ofstream t(fs::path(rep_out) / "summary.txt");
      if (!t) throw Error("cannot write " + (fs::path(rep_out) / "summary.txt").string());
      write_summary(t, records, stats);
      write_summary(std::cout, records, stats);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
