// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "dlm/checkpoint.hpp"
#include "dlm/config.hpp"
#include "dlm/data_pipeline.hpp"
#include "dlm/errors.hpp"
#include "dlm/evalsuite.hpp"
#include "dlm/kernels.hpp"
#include "dlm/sampler.hpp"
#include "dlm/trainer.hpp"
#include "dlm/verify.hpp"
#include "json.hpp"

namespace dlm::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string> kModelKeys = {"n_layers", "d_model", "n_heads",
                                             "d_ff",     "max_seq_len", "block_len"};
const std::vector<std::string> kTrainKeys = {
    "steps",   "batch_size", "lr",        "warmup_steps", "anneal_steps",
    "t_eps",   "weight_decay", "beta1",   "beta2",        "adam_eps",
    "grad_clip", "min_lr_ratio", "grad_accum", "log_interval", "alignment"};
const std::vector<std::string> kSamplerKeys = {"T",     "len",   "strategy",
                                               "top_k", "top_p", "temperature"};

struct Command {
  CLI::App* app = nullptr;
  std::vector<std::string> keys;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  std::optional<std::uint64_t> seed;
  std::string config_path;
};

std::vector<std::string> concat(std::initializer_list<const std::vector<std::string>*> parts) {
  std::vector<std::string> out;
  for (const auto* p : parts) out.insert(out.end(), p->begin(), p->end());
  return out;
}

void add_common(Command& c, const std::vector<std::string>& keys) {
  c.keys = keys;
  c.app->add_option("--seed", c.seed, "RNG seed (derived from entropy and printed when omitted)");
  c.app->add_option("--config", c.config_path, "JSON config file; flags override its values")
      ->check(CLI::ExistingFile);
  for (const auto& key : keys) {
    std::string names = "--" + key;
    std::string dashed = key;
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    if (dashed != key) names += ",--" + dashed;
    c.options[key] = c.app->add_option(names, c.values[key], "config key '" + key + "'");
  }
}

std::uint64_t entropy_seed() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

// File values, then flags, then the seed.
CliConfig resolve(Command& c, std::ostream& err, std::optional<std::uint64_t> fallback_seed = {}) {
  CliConfig cfg = c.config_path.empty() ? CliConfig{} : load_config_file(c.config_path);
  for (const auto& key : c.keys) {
    if (c.options[key]->count() > 0) set_config_value(cfg, key, c.values[key]);
  }
  if (c.seed) {
    set_config_value(cfg, "seed", std::to_string(*c.seed));
  } else if (!cfg.explicit_keys.contains("seed")) {
    const bool fixed = fallback_seed.has_value();
    const std::uint64_t s = fixed ? *fallback_seed : entropy_seed();
    set_config_value(cfg, "seed", std::to_string(s));
    err << "seed: " << s << (fixed ? " (default)" : " (derived from entropy)") << '\n';
  }
  std::vector<std::string> defaulted;
  const json all = config_to_json(cfg);
  for (const auto& key : c.keys) {
    if (!cfg.explicit_keys.contains(key)) defaulted.push_back(key + "=" + all.at(key).dump());
  }
  if (!defaulted.empty()) {
    err << "notice: using defaults for";
    for (const auto& d : defaulted) err << ' ' << d;
    err << '\n';
  }
  return cfg;
}

fs::path vocab_path_for(const fs::path& checkpoint) { return checkpoint.string() + ".vocab.json"; }

void write_or_print(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  f << text;
}

TrainHooks progress_hooks(std::size_t steps, std::ostream& err) {
  const std::size_t every = std::max<std::size_t>(1, steps / 20);
  TrainHooks h;
  h.on_record = [every, steps, &err](const RunRecord& r) {
    if (r.step % every == 0 || r.step + 1 == steps) {
      err << "step " << r.step << "/" << steps << " loss " << std::fixed << std::setprecision(4)
          << r.loss << " anneal " << std::setprecision(3) << r.anneal_ratio << " lr "
          << std::scientific << std::setprecision(2) << r.lr << std::defaultfloat << " ("
          << std::fixed << std::setprecision(1) << r.wall_seconds << "s)" << std::defaultfloat
          << '\n';
    }
  };
  return h;
}

// Unset anneal/warmup lengths follow short runs down instead of failing.
void fit_schedule(CliConfig& cfg) {
  if (!cfg.explicit_keys.contains("anneal_steps")) {
    cfg.train.anneal_steps = std::min(cfg.train.anneal_steps, cfg.train.steps);
  }
  if (!cfg.explicit_keys.contains("warmup_steps")) {
    cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, cfg.train.steps);
  }
}

void finish_training(const TrainResult& r, const CliConfig& cfg, const std::string& out_path,
                     const std::string& log_path, const Vocab* vocab, std::ostream& out,
                     std::ostream& err) {
  save_checkpoint(out_path, {r.params, cfg.train});
  if (vocab) save_vocab(*vocab, vocab_path_for(out_path));
  if (!log_path.empty()) {
    std::ofstream f(log_path);
    if (!f) throw FormatError("cannot write " + log_path);
    r.log.write_jsonl(f);
  }
  if (r.log.skipped_steps > 0) {
    err << "warning: " << r.log.skipped_steps << " steps skipped on non-finite gradients\n";
  }
  json summary{{"checkpoint", out_path},
               {"steps", cfg.train.steps},
               {"parameters", r.params.parameter_count()},
               {"mode", std::string(to_string(r.params.config.mode))},
               {"final_loss", r.log.records.empty() ? json(nullptr) : json(r.log.final_loss())}};
  out << summary.dump() << '\n';
}

struct Corpus {
  Vocab vocab;
  PackedBatchSet packed;
};

Corpus load_training_corpus(const std::string& path, CliConfig& cfg, std::ostream& err) {
  const std::vector<std::string> docs = read_corpus(path);
  Corpus c;
  c.vocab = build_vocab(docs);
  const std::size_t n = cfg.effective_block_len();
  if (n > cfg.model.max_seq_len) {
    throw ConfigError("block_len " + std::to_string(n) + " exceeds max_seq_len " +
                      std::to_string(cfg.model.max_seq_len));
  }
  c.packed = pack_sequences(c.vocab, docs, n);
  cfg.model.vocab_size = c.vocab.size();
  err << "corpus: " << docs.size() << " documents, " << c.packed.blocks.size() << " blocks of "
      << n << ", vocabulary " << c.vocab.size() << '\n';
  return c;
}

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw ConfigError("cannot parse list item '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adapt small autoregressive character models into masked diffusion models", "dlm"};
  app.require_subcommand(1);
  std::string kernel_choice = "auto";
  app.add_option("--kernels", kernel_choice, "kernel variant: auto, reference or avx2")
      ->check(CLI::IsMember({"auto", "reference", "avx2"}));

  // tokenize
  Command tok;
  tok.app = app.add_subcommand("tokenize", "Build a vocabulary and optionally encode text");
  std::string tok_corpus, tok_out, tok_text;
  add_common(tok, {});
  tok.app->add_option("--corpus", tok_corpus, "UTF-8 corpus file")->required()->check(CLI::ExistingFile);
  tok.app->add_option("--out", tok_out, "vocabulary output path (stdout if omitted)");
  tok.app->add_option("--text", tok_text, "text to encode with the new vocabulary");

  // train-ar / train-scratch / adapt
  Command tar;
  tar.app = app.add_subcommand("train-ar", "Pretrain a causal next-token model");
  Command tsc;
  tsc.app = app.add_subcommand("train-scratch", "Train a diffusion model from random init");
  Command tad;
  tad.app = app.add_subcommand("adapt", "Adapt an AR checkpoint into a diffusion model");
  std::string corpus, out_path, log_path, init_path, vocab_override;
  for (Command* c : {&tar, &tsc, &tad}) {
    add_common(*c, concat({&kModelKeys, &kTrainKeys}));
    auto* opt = c->app->add_option("--corpus", corpus, "UTF-8 corpus file")->check(CLI::ExistingFile);
    if (c != &tad) opt->required();
    c->app->add_option("--out", out_path, "output checkpoint")->required();
    c->app->add_option("--log", log_path, "run log (JSON lines)");
  }
  tad.app->add_option("--init", init_path, "AR checkpoint to adapt")->required()->check(CLI::ExistingFile);
  tad.app->add_option("--vocab", vocab_override, "vocabulary file (default: <init>.vocab.json)");

  // sample / infill
  Command smp;
  smp.app = app.add_subcommand("sample", "Generate text by iterative denoising");
  Command inf;
  inf.app = app.add_subcommand("infill", "Fill a hole between a prefix and a suffix");
  std::string ckpt, trace_path, prefix, suffix;
  std::size_t count = 1, hole = 8;
  for (Command* c : {&smp, &inf}) {
    add_common(*c, kSamplerKeys);
    c->app->add_option("--ckpt", ckpt, "diffusion checkpoint")->required()->check(CLI::ExistingFile);
    c->app->add_option("--vocab", vocab_override, "vocabulary file (default: <ckpt>.vocab.json)");
    c->app->add_option("--trace", trace_path, "write the denoising trace (JSON lines)");
    c->app->add_option("--out", out_path, "write results here instead of stdout");
  }
  smp.app->add_option("--count", count, "number of samples")->check(CLI::PositiveNumber);
  inf.app->add_option("--prefix", prefix, "text before the hole");
  inf.app->add_option("--suffix", suffix, "text after the hole");
  inf.app->add_option("--hole", hole, "number of tokens to fill");

  // evaluation
  Command eel;
  eel.app = app.add_subcommand("eval-elbo", "Estimate the diffusion bound on held-out text");
  Command emc;
  emc.app = app.add_subcommand("eval-mc", "Score multiple-choice items by lowest loss");
  Command egn;
  egn.app = app.add_subcommand("eval-gen", "Generation perplexity and diversity across T");
  std::size_t num_t = 16, max_blocks = 64, samples = 64, seeds = 5;
  std::string items_path, scorer_path, ts_text = "4,16,64", data_path;
  add_common(eel, {"block_len"});
  eel.app->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eel.app->add_option("--vocab", vocab_override, "vocabulary file");
  eel.app->add_option("--corpus", corpus, "held-out text")->required()->check(CLI::ExistingFile);
  eel.app->add_option("--num-t", num_t, "t strata per block")->check(CLI::PositiveNumber);
  eel.app->add_option("--max-blocks", max_blocks, "blocks to evaluate")->check(CLI::PositiveNumber);
  eel.app->add_option("--out", out_path, "write the JSON report here");
  add_common(emc, {});
  emc.app->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  emc.app->add_option("--vocab", vocab_override, "vocabulary file");
  emc.app->add_option("--items", items_path, "JSON lines {prompt, choices, answer?}")
      ->required()
      ->check(CLI::ExistingFile);
  emc.app->add_option("--num-t", num_t, "t strata per choice")->check(CLI::PositiveNumber);
  emc.app->add_option("--out", out_path, "write per-item JSON lines here");
  add_common(egn, kSamplerKeys);
  egn.app->add_option("--ckpt", ckpt, "diffusion checkpoint")->required()->check(CLI::ExistingFile);
  egn.app->add_option("--scorer", scorer_path, "causal scorer checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  egn.app->add_option("--Ts", ts_text, "comma-separated step counts");
  egn.app->add_option("--samples", samples, "samples per seed")->check(CLI::PositiveNumber);
  egn.app->add_option("--seeds", seeds, "number of seeds")->check(CLI::PositiveNumber);
  egn.app->add_option("--data", data_path, "write 'T perplexity distinct_2' rows here");
  egn.app->add_option("--out", out_path, "write JSON report lines here");

  Command ver;
  ver.app = app.add_subcommand("verify", "Run the identity and oracle self-checks");
  add_common(ver, {});

  std::vector<std::string> rest(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    kernels::select(kernel_choice);
    err << "kernels: " << kernels::active().name << '\n';

    if (*tok.app) {
      resolve(tok, err);
      const std::vector<std::string> docs = read_corpus(tok_corpus);
      const Vocab vocab = build_vocab(docs);
      if (tok_out.empty()) {
        out << vocab_to_json(vocab) << '\n';
      } else {
        save_vocab(vocab, tok_out);
        err << "vocabulary of " << vocab.size() << " written to " << tok_out << '\n';
      }
      if (!tok_text.empty()) {
        json ids = encode(vocab, tok_text);
        out << ids.dump() << '\n';
      }
      return 0;
    }

    if (*tar.app || *tsc.app) {
      Command& c = *tar.app ? tar : tsc;
      CliConfig cfg = resolve(c, err);
      fit_schedule(cfg);
      Corpus data = load_training_corpus(corpus, cfg, err);
      const TrainHooks hooks = progress_hooks(cfg.train.steps, err);
      TrainResult r = *tar.app ? pretrain_ar(data.packed, cfg.model, cfg.train, hooks)
                               : train_scratch(data.packed, cfg.model, cfg.train, hooks);
      finish_training(r, cfg, out_path, log_path, &data.vocab, out, err);
      return 0;
    }

    if (*tad.app) {
      CliConfig cfg = resolve(tad, err);
      cfg.train.init = init_path;
      fit_schedule(cfg);
      const Checkpoint base = load_checkpoint(init_path);
      const fs::path vpath = vocab_override.empty() ? vocab_path_for(init_path) : fs::path(vocab_override);
      std::optional<Vocab> vocab;
      if (fs::exists(vpath)) vocab = load_vocab(vpath);
      PackedBatchSet packed;
      if (cfg.train.steps > 0) {
        if (corpus.empty()) throw ConfigError("adapt needs --corpus when steps > 0");
        if (!vocab) throw ConfigError("vocabulary not found at " + vpath.string());
        const std::size_t n = cfg.explicit_keys.contains("block_len") ? cfg.block_len
                                                                      : base.params.config.max_seq_len;
        packed = pack_sequences(*vocab, read_corpus(corpus), n);
        err << "corpus: " << packed.blocks.size() << " blocks of " << n << '\n';
      }
      const TrainResult r = adapt(base.params, packed, cfg.train, progress_hooks(cfg.train.steps, err));
      finish_training(r, cfg, out_path, log_path, vocab ? &*vocab : nullptr, out, err);
      return 0;
    }

    if (*smp.app || *inf.app) {
      Command& c = *smp.app ? smp : inf;
      CliConfig cfg = resolve(c, err);
      const Checkpoint ck = load_checkpoint(ckpt);
      const Vocab vocab =
          load_vocab(vocab_override.empty() ? vocab_path_for(ckpt) : fs::path(vocab_override));
      std::ostringstream results, trace;
      if (*smp.app) {
        for (std::size_t i = 0; i < count; ++i) {
          SamplerConfig sc = cfg.sampler;
          if (count > 1) sc.seed = derive_seed(cfg.sampler.seed, i);
          const Generation g = generate(ck.params, sc);
          results << decode(vocab, g.tokens) << '\n';
          g.trace.write_jsonl(trace);
        }
      } else {
        const TokenSeq pre = encode(vocab, prefix);
        const TokenSeq suf = encode(vocab, suffix);
        SampleTrace tr;
        const TokenSeq filled = infill(ck.params, pre, suf, hole, cfg.sampler, &tr);
        results << prefix << decode(vocab, filled) << suffix << '\n';
        tr.write_jsonl(trace);
      }
      write_or_print(out_path, results.str(), out);
      if (!trace_path.empty()) write_or_print(trace_path, trace.str(), out);
      return 0;
    }

    if (*eel.app) {
      CliConfig cfg = resolve(eel, err);
      const Checkpoint ck = load_checkpoint(ckpt);
      const Vocab vocab =
          load_vocab(vocab_override.empty() ? vocab_path_for(ckpt) : fs::path(vocab_override));
      const std::size_t n = cfg.explicit_keys.contains("block_len") ? cfg.block_len
                                                                    : ck.params.config.max_seq_len;
      const PackedBatchSet packed = pack_sequences(vocab, read_corpus(corpus), n);
      const std::size_t blocks = std::min(max_blocks, packed.blocks.size());
      EvalOptions opts;
      if (ck.train) opts.alignment = ck.train->alignment;
      double sum = 0.0, var = 0.0;
      for (std::size_t b = 0; b < blocks; ++b) {
        const ElboReport r =
            elbo_estimate(ck.params, packed.blocks[b], num_t, derive_seed(cfg.train.seed, b), opts);
        sum += r.nats_per_token;
        var += r.standard_error * r.standard_error;
      }
      const double mean = sum / static_cast<double>(blocks);
      const double se = std::sqrt(var) / static_cast<double>(blocks);
      json report{{"nats_per_token", mean}, {"standard_error", se},   {"blocks", blocks},
                  {"num_t_samples", num_t}, {"block_len", n},         {"stratification", "stratified-uniform"}};
      out << std::left << std::setw(16) << "blocks" << std::setw(16) << "nats/token" << "std.err\n"
          << std::setw(16) << blocks << std::setw(16) << mean << se << '\n';
      if (!out_path.empty()) write_or_print(out_path, report.dump() + "\n", out);
      return 0;
    }

    if (*emc.app) {
      CliConfig cfg = resolve(emc, err);
      const Checkpoint ck = load_checkpoint(ckpt);
      const Vocab vocab =
          load_vocab(vocab_override.empty() ? vocab_path_for(ckpt) : fs::path(vocab_override));
      EvalOptions opts;
      if (ck.train) opts.alignment = ck.train->alignment;
      std::ifstream in(items_path);
      std::string line;
      std::size_t total = 0, answered = 0, correct = 0;
      std::ostringstream records;
      out << std::left << std::setw(8) << "item" << std::setw(10) << "chosen" << "answer\n";
      while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const json item = json::parse(line);
        const TokenSeq p = encode(vocab, item.at("prompt").get<std::string>());
        std::vector<TokenSeq> choices;
        for (const auto& ch : item.at("choices")) choices.push_back(encode(vocab, ch.get<std::string>()));
        const MultipleChoiceResult r = multiple_choice(ck.params, p, choices, num_t, cfg.train.seed, opts);
        for (const auto& w : r.warnings) err << "warning: item " << total << ": " << w << '\n';
        json rec{{"item", total}, {"chosen", r.chosen}, {"scores", r.scores}};
        out << std::setw(8) << total << std::setw(10) << r.chosen;
        if (item.contains("answer")) {
          const auto ans = item.at("answer").get<std::size_t>();
          rec["answer"] = ans;
          ++answered;
          correct += ans == r.chosen ? 1 : 0;
          out << ans;
        } else {
          out << '-';
        }
        out << '\n';
        records << rec.dump() << '\n';
        ++total;
      }
      if (answered > 0) {
        out << "accuracy " << correct << "/" << answered << " = "
            << static_cast<double>(correct) / static_cast<double>(answered) << '\n';
      }
      if (!out_path.empty()) write_or_print(out_path, records.str(), out);
      return 0;
    }

    if (*egn.app) {
      CliConfig cfg = resolve(egn, err);
      const Checkpoint ck = load_checkpoint(ckpt);
      const Checkpoint scorer = load_checkpoint(scorer_path);
      std::vector<std::uint64_t> seed_list;
      for (std::size_t k = 0; k < seeds; ++k) seed_list.push_back(derive_seed(cfg.sampler.seed, k));
      std::ostringstream data, records;
      std::vector<double> xs, ys;
      out << std::left << std::setw(8) << "T" << std::setw(14) << "perplexity" << std::setw(12)
          << "distinct_2" << "samples\n";
      for (std::size_t T : parse_list(ts_text)) {
        SamplerConfig sc = cfg.sampler;
        sc.steps = T;
        const GenQualityReport r = generation_quality(ck.params, scorer.params, sc, samples, seed_list);
        out << std::setw(8) << T << std::setw(14) << r.perplexity << std::setw(12) << r.distinct_2
            << r.sample_count << '\n';
        data << T << ' ' << r.perplexity << ' ' << r.distinct_2 << '\n';
        records << json{{"T", T},
                        {"perplexity", r.perplexity},
                        {"per_seed_perplexity", r.per_seed_perplexity},
                        {"distinct_2", r.distinct_2},
                        {"sample_count", r.sample_count}}
                       .dump()
                << '\n';
        for (double p : r.per_seed_perplexity) {
          xs.push_back(static_cast<double>(T));
          ys.push_back(p);
        }
      }
      if (xs.size() >= 2) out << "spearman(T, perplexity) = " << spearman(xs, ys) << '\n';
      if (!data_path.empty()) write_or_print(data_path, data.str(), out);
      if (!out_path.empty()) write_or_print(out_path, records.str(), out);
      return 0;
    }

    if (*ver.app) {
      // A fixed default keeps `verify` reproducible; --seed explores others.
      CliConfig cfg = resolve(ver, err, std::uint64_t{0});
      bool all = true;
      for (const CheckResult& r : run_verify_suite(cfg.train.seed)) {
        all = all && r.passed;
        out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << " ("
            << std::fixed << std::setprecision(2) << r.seconds << "s)" << std::defaultfloat << '\n';
      }
      return all ? 0 : 1;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace dlm::cli
