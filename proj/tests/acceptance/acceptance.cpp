// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.

#include <chrono>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "cli.hpp"
#include "dlm/checkpoint.hpp"
#include "dlm/corpus.hpp"
#include "dlm/data_pipeline.hpp"
#include "dlm/evalsuite.hpp"
#include "dlm/kernels.hpp"
#include "dlm/rng.hpp"
#include "dlm/trainer.hpp"
#include "dlm/verify.hpp"

using namespace dlm;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

bool report(int id, const std::string& title, double limit_seconds,
            const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  const bool in_time = limit_seconds <= 0.0 || secs < limit_seconds;
  const bool ok = o.passed && in_time;
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << id << " " << title << ": " << o.detail
            << " [" << std::fixed << std::setprecision(2) << secs << " s";
  if (limit_seconds > 0.0) std::cout << ", limit " << limit_seconds << " s";
  if (!in_time) std::cout << ", TOO SLOW";
  std::cout << "]" << std::defaultfloat << std::setprecision(6) << std::endl;
  return ok;
}

Outcome from_check(const CheckResult& r) { return {r.passed, r.detail}; }

// Shared state between the training criterion and the ones that reuse its models.
struct Trained {
  ModelParams<float> base;
  ModelParams<float> adapted;
};

constexpr std::size_t kBlock = 32;
constexpr std::size_t kSeeds = 3;

ModelConfig experiment_model(std::size_t vocab_size) {
  ModelConfig m;
  m.n_layers = 4;
  m.d_model = 128;
  m.n_heads = 4;
  m.d_ff = 512;
  m.max_seq_len = kBlock;
  m.vocab_size = vocab_size;
  return m;
}

TrainConfig experiment_train(std::uint64_t seed) {
  TrainConfig t;
  t.steps = 2000;
  t.batch_size = 4;
  t.lr = 3e-3;
  t.warmup_steps = 100;
  t.anneal_steps = 500;
  t.seed = seed;
  return t;
}

// Mean held-out bound over the first 200 blocks. Every model sees the same
// corruptions because the per-block seeds are fixed.
double heldout_loss(const ModelParams<float>& model, const PackedBatchSet& held,
                    LogitAlignment alignment) {
  EvalOptions opts;
  opts.alignment = alignment;
  const std::size_t blocks = std::min<std::size_t>(held.blocks.size(), 200);
  double sum = 0.0;
  for (std::size_t i = 0; i < blocks; ++i) {
    sum += elbo_estimate(model, held.blocks[i], 8, derive_seed(5, i), opts).nats_per_token;
  }
  return sum / static_cast<double>(blocks);
}

Outcome adaptation_benefit(std::optional<Trained>& keep) {
  const auto docs = corpus::toy_sentences(1000000, 1);
  const auto held_docs = corpus::toy_sentences(20000, 777);
  const Vocab vocab = build_vocab(docs);
  const PackedBatchSet train = pack_sequences(vocab, docs, kBlock);
  const PackedBatchSet held = pack_sequences(vocab, held_docs, kBlock);
  const ModelConfig mc = experiment_model(vocab.size());

  TrainConfig ar = experiment_train(100);
  ar.objective = Objective::ar;
  ar.anneal_steps = 0;
  const TrainResult base = pretrain_ar(train, mc, ar);
  std::cout << std::setprecision(4) << "  AR base: final train loss "
            << base.log.final_loss(100) << std::endl;

  std::size_t adapt_wins = 0, shift_wins = 0;
  std::ostringstream d;
  d << std::fixed << std::setprecision(4);
  for (std::size_t s = 0; s < kSeeds; ++s) {
    const TrainConfig tc = experiment_train(1000 + s);
    const TrainResult a = adapt(base.params, train, tc);
    const TrainResult sc = train_scratch(train, mc, tc);
    TrainConfig un = tc;
    un.alignment = LogitAlignment::unshifted;
    const TrainResult ns = adapt(base.params, train, un);

    const double la = heldout_loss(a.params, held, LogitAlignment::shifted);
    const double ls = heldout_loss(sc.params, held, LogitAlignment::shifted);
    const double ln = heldout_loss(ns.params, held, LogitAlignment::unshifted);
    adapt_wins += la < ls ? 1 : 0;
    shift_wins += la < ln ? 1 : 0;
    std::cout << std::setprecision(4) << "  seed " << s << ": held-out nats/token adapted " << la
              << ", scratch " << ls << ", no-shift " << ln << "; final train loss "
              << a.log.final_loss(100) << " / " << sc.log.final_loss(100) << " / "
              << ns.log.final_loss(100) << std::endl;
    if (s == 0) keep = Trained{base.params, a.params};
  }
  d << "adapted < scratch on " << adapt_wins << "/" << kSeeds << " seeds, full < no-shift on "
    << shift_wins << "/" << kSeeds << " seeds";
  const std::size_t majority = kSeeds / 2 + 1;
  return {adapt_wins >= majority && shift_wins >= majority, d.str()};
}

Outcome steps_quality(const std::optional<Trained>& models) {
  if (!models) return {false, "no adapted model available"};
  const std::vector<std::size_t> ts = {4, 16, 64};
  const std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<double> medians, xs, ys;
  std::ostringstream d;
  d << std::fixed << std::setprecision(3) << "median scorer perplexity";
  for (std::size_t T : ts) {
    SamplerConfig sc;
    sc.steps = T;
    sc.length = kBlock;
    const GenQualityReport r = generation_quality(models->adapted, models->base, sc, 64, seeds);
    medians.push_back(r.perplexity);
    for (double p : r.per_seed_perplexity) {
      xs.push_back(static_cast<double>(T));
      ys.push_back(p);
    }
    d << " T=" << T << ": " << r.perplexity << " (distinct-2 " << r.distinct_2 << ")";
  }
  bool monotone = true;
  for (std::size_t i = 1; i < medians.size(); ++i) monotone = monotone && medians[i] <= medians[i - 1];
  d << "; spearman(T, ppl) " << spearman(xs, ys);
  return {monotone, d.str()};
}

Outcome checkpoint_and_verify(const std::optional<Trained>& models) {
  const ModelParams<float> params =
      models ? models->adapted : random_tiny_model(experiment_model(40), 3);
  const Checkpoint ck{params, experiment_train(1000)};
  const auto bytes = serialize_checkpoint(ck);
  const Checkpoint back = deserialize_checkpoint(bytes);
  bool same = back.params.config == params.config &&
              back.params.tensors.size() == params.tensors.size();
  for (std::size_t i = 0; same && i < params.tensors.size(); ++i) {
    const auto& x = params.tensors[i].data;
    const auto& y = back.params.tensors[i].data;
    same = x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0;
  }
  const std::filesystem::path dir = DLM_TEST_TMPDIR;
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", ck);
  same = same && serialize_checkpoint(load_checkpoint(dir / "model.ckpt")) == bytes;

  std::ostringstream out, err;
  const int code = cli::run({"dlm", "verify"}, out, err);
  const std::string text = out.str();
  bool all_listed = true;
  for (const char* name : {"process identities", "loss oracle", "gradient check", "ar equivalence",
                           "sampler contracts"}) {
    all_listed = all_listed && text.find(std::string("PASS ") + name) != std::string::npos;
  }
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) std::cout << "  verify> " << line << '\n';

  std::ostringstream d;
  d << "checkpoint " << (same ? "bitwise identical" : "MISMATCH") << " (" << bytes.size()
    << " bytes); verify exit " << code << (all_listed ? "" : ", missing checks");
  return {same && code == 0 && all_listed, d.str()};
}

}  // namespace

int main() {
  std::cout << "kernels: " << kernels::active().name << std::endl;
  constexpr std::uint64_t kSeed = 1;
  bool ok = true;
  std::optional<Trained> models;

  ok &= report(1, "process identities", 1.0,
               [] { return from_check(check_process_identities(kSeed, 1000)); });
  ok &= report(2, "loss oracle", 120.0,
               [] { return from_check(check_loss_oracle(kSeed, 20, 10000)); });
  ok &= report(3, "gradient check", 30.0,
               [] { return from_check(check_gradients(kSeed, 50, 1e-4)); });
  ok &= report(4, "AR-as-diffusion equivalence", 10.0,
               [] { return from_check(check_ar_equivalence(kSeed, 10)); });
  ok &= report(5, "adaptation benefit", 600.0, [&] { return adaptation_benefit(models); });
  ok &= report(6, "sampler contracts", 60.0,
               [] { return from_check(check_sampler_contracts(kSeed, 100)); });
  ok &= report(7, "steps-quality trend", 300.0, [&] { return steps_quality(models); });
  ok &= report(8, "checkpoint round trip and verify", 0.0,
               [&] { return checkpoint_and_verify(models); });

  std::cout << (ok ? "all criteria passed" : "some criteria failed") << std::endl;
  return ok ? 0 : 1;
}
