// SPDX-License-Identifier: Apache-2.0
//
// Likelihood-bound estimation, exact enumeration oracles, multiple-choice
// scoring and generation-quality metrics.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dlm/diffusion_core.hpp"
#include "dlm/sampler.hpp"
#include "dlm/tinylm.hpp"

namespace dlm {

struct EvalOptions {
  NoiseSchedule schedule;
  LogitAlignment alignment = LogitAlignment::shifted;
  /// Positions before this index are never corrupted nor scored. The default
  /// keeps the BOS slot clean.
  std::size_t loss_from = 1;
  /// Defaults to inference_mask(model.config, n).
  std::optional<AttentionMask> mask;
};

struct ElboReport {
  double nats_per_token = 0.0;
  std::size_t num_t_samples = 0;
  std::string stratification = "stratified-uniform";
  double standard_error = 0.0;
};

/// Stratified Monte-Carlo estimate of the continuous-time bound: stratum i
/// draws t in [i/num_t, (i+1)/num_t) (clamped to the schedule eps) and one
/// corruption. seq includes its leading BOS.
ElboReport elbo_estimate(const ModelParams<float>& model, const TokenSeq& seq, std::size_t num_t,
                         std::uint64_t seed, const EvalOptions& options = {});

/// Weighted diffusion loss of one corrupted item.
double item_diffusion_loss(const ModelParams<float>& model, const CorruptedItem& item,
                           const EvalOptions& options = {});

/// E over corruptions at time t of the weighted diffusion loss, by
/// enumerating every mask pattern of positions loss_from..n-1. Refuses
/// sequences longer than 12.
double exact_expected_loss(const ModelParams<float>& model, const TokenSeq& seq, double t,
                           const EvalOptions& options = {});

struct MonteCarloLoss {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t draws = 0;
};

/// Mean weighted diffusion loss over independent corruption draws at time t.
MonteCarloLoss monte_carlo_loss(const ModelParams<float>& model, const TokenSeq& seq, double t,
                                std::size_t draws, std::uint64_t seed,
                                const EvalOptions& options = {});

struct MultipleChoiceResult {
  std::size_t chosen = 0;
  /// Length-normalized loss per choice; NaN for skipped (empty) choices.
  std::vector<double> scores;
  std::vector<std::string> warnings;
};

/// Index of the smallest finite score; ties go to the lowest index.
std::size_t argmin_choice(const std::vector<double>& scores);

/// Scores each choice by elbo_estimate on [BOS, prompt, choice] with only
/// the choice positions corrupted, using the same seed for every choice.
/// prompt and choices hold content tokens only.
MultipleChoiceResult multiple_choice(const ModelParams<float>& model, const TokenSeq& prompt,
                                     const std::vector<TokenSeq>& choices,
                                     std::size_t num_t = 8, std::uint64_t seed = 0,
                                     const EvalOptions& options = {});

/// Unique n-grams over total n-grams across samples. Returns 0 and sets
/// *warning when no sample has n tokens.
double distinct_n(const std::vector<TokenSeq>& samples, std::size_t n,
                  std::string* warning = nullptr);

/// exp of mean next-token nats per token of [BOS, sample] under a causal
/// scorer.
double gen_ppl_proxy(const ModelParams<float>& scorer, const std::vector<TokenSeq>& samples);

/// (sequential masking loss, AR loss) under the causal mask.
template <class Real>
std::pair<double, double> ar_equivalence_check(const ModelParams<Real>& model,
                                               const TokenSeq& seq);

struct GenQualityReport {
  double perplexity = 0.0;  ///< median over seeds
  double distinct_2 = 0.0;
  std::size_t steps = 0;
  std::size_t sample_count = 0;
  std::vector<double> per_seed_perplexity;
};

/// Generates samples_per_seed samples for each seed (sample i of seed s uses
/// derive_seed(s, i)) with config.steps reverse steps and scores them.
GenQualityReport generation_quality(const ModelParams<float>& model,
                                    const ModelParams<float>& scorer, const SamplerConfig& config,
                                    std::size_t samples_per_seed,
                                    const std::vector<std::uint64_t>& seeds);

double median(std::vector<double> values);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace dlm
