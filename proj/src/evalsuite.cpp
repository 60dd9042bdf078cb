// SPDX-License-Identifier: Apache-2.0

#include "dlm/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "dlm/errors.hpp"
#include "dlm/trainer.hpp"

namespace dlm {

namespace {

constexpr std::size_t kMaxExactLen = 12;
// Rows per forward_batch call when scoring many corruptions of one sequence.
constexpr std::size_t kChunk = 512;

AttentionMask eval_mask(const ModelParams<float>& model, std::size_t n, const EvalOptions& o) {
  if (o.mask) {
    if (o.mask->size() != n) throw DimensionError("evaluation mask size mismatch");
    return *o.mask;
  }
  return inference_mask(model.config, n);
}

void check_seq(const TokenSeq& seq, const EvalOptions& o) {
  if (seq.size() < 2) throw DimensionError("sequence needs BOS plus at least one token");
  if (o.loss_from >= seq.size()) throw InvalidInput("no scorable positions after loss_from");
}

Matrix<float> aligned(const Matrix<float>& logits, LogitAlignment alignment) {
  return alignment == LogitAlignment::shifted ? shift_logits(logits) : logits;
}

// Weighted losses of many corruptions of equal length, batched.
std::vector<double> batch_losses(const ModelParams<float>& model,
                                 const std::vector<CorruptedItem>& items, const EvalOptions& o) {
  std::vector<double> out(items.size(), 0.0);
  if (items.empty()) return out;
  const std::size_t n = items.front().noisy.size();
  const AttentionMask mask = eval_mask(model, n, o);
  for (std::size_t start = 0; start < items.size(); start += kChunk) {
    const std::size_t stop = std::min(items.size(), start + kChunk);
    std::vector<TokenSeq> inputs;
    std::vector<std::size_t> which;
    for (std::size_t i = start; i < stop; ++i) {
      if (items[i].masked_count() == 0) continue;  // nothing scored
      inputs.push_back(items[i].noisy);
      which.push_back(i);
    }
    if (inputs.empty()) continue;
    const Matrix<float> logits = forward_batch(model, inputs, mask);
    for (std::size_t b = 0; b < which.size(); ++b) {
      Matrix<float> one(n, logits.cols);
      std::copy(logits.row(b * n), logits.row(b * n) + n * logits.cols, one.data.begin());
      out[which[b]] = diffusion_loss(aligned(one, o.alignment), items[which[b]], o.schedule);
    }
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double standard_error_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

}  // namespace

double item_diffusion_loss(const ModelParams<float>& model, const CorruptedItem& item,
                           const EvalOptions& options) {
  validate(item);
  if (item.masked_count() == 0) return 0.0;
  const Matrix<float> logits =
      forward(model, item.noisy, eval_mask(model, item.noisy.size(), options));
  return diffusion_loss(aligned(logits, options.alignment), item, options.schedule);
}

ElboReport elbo_estimate(const ModelParams<float>& model, const TokenSeq& seq, std::size_t num_t,
                         std::uint64_t seed, const EvalOptions& options) {
  if (num_t < 1) throw InvalidInput("elbo_estimate needs num_t >= 1");
  check_seq(seq, options);
  Rng rng(seed);
  std::vector<CorruptedItem> items;
  items.reserve(num_t);
  for (std::size_t i = 0; i < num_t; ++i) {
    const double u = rng.uniform();
    const double t = std::clamp((static_cast<double>(i) + u) / static_cast<double>(num_t),
                                options.schedule.eps, 1.0);
    items.push_back(corrupt_sequence(options.schedule, seq, t, rng, options.loss_from));
  }
  std::vector<double> losses = batch_losses(model, items, options);
  const auto scored = static_cast<double>(seq.size() - options.loss_from);
  for (double& l : losses) l /= scored;
  ElboReport r;
  r.nats_per_token = mean_of(losses);
  r.num_t_samples = num_t;
  r.standard_error = standard_error_of(losses);
  if (!std::isfinite(r.nats_per_token)) throw NumericError("non-finite ELBO estimate");
  return r;
}

double exact_expected_loss(const ModelParams<float>& model, const TokenSeq& seq, double t,
                           const EvalOptions& options) {
  check_seq(seq, options);
  if (seq.size() > kMaxExactLen) {
    throw InvalidInput("exact enumeration refused for sequences longer than " +
                       std::to_string(kMaxExactLen));
  }
  if (!(t >= options.schedule.eps && t <= 1.0)) throw DomainError("t outside [eps, 1]");
  const std::size_t free = seq.size() - options.loss_from;
  const std::size_t patterns = std::size_t{1} << free;
  std::vector<CorruptedItem> items;
  std::vector<double> weights;
  items.reserve(patterns);
  for (std::size_t bits = 0; bits < patterns; ++bits) {
    std::vector<bool> pattern(seq.size(), false);
    std::size_t masked = 0;
    for (std::size_t k = 0; k < free; ++k) {
      if ((bits >> k) & 1U) {
        pattern[options.loss_from + k] = true;
        ++masked;
      }
    }
    const double w = std::pow(t, static_cast<double>(masked)) *
                     std::pow(1.0 - t, static_cast<double>(free - masked));
    if (w == 0.0) continue;
    items.push_back(corrupt_with_pattern(seq, pattern, t));
    weights.push_back(w);
  }
  const std::vector<double> losses = batch_losses(model, items, options);
  double total = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) total += weights[i] * losses[i];
  return total;
}

MonteCarloLoss monte_carlo_loss(const ModelParams<float>& model, const TokenSeq& seq, double t,
                                std::size_t draws, std::uint64_t seed,
                                const EvalOptions& options) {
  if (draws < 1) throw InvalidInput("monte_carlo_loss needs at least one draw");
  check_seq(seq, options);
  Rng rng(seed);
  std::vector<CorruptedItem> items;
  items.reserve(draws);
  for (std::size_t i = 0; i < draws; ++i) {
    items.push_back(corrupt_sequence(options.schedule, seq, t, rng, options.loss_from));
  }
  const std::vector<double> losses = batch_losses(model, items, options);
  return {mean_of(losses), standard_error_of(losses), draws};
}

std::size_t argmin_choice(const std::vector<double>& scores) {
  std::size_t best = scores.size();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) continue;
    if (best == scores.size() || scores[i] < scores[best]) best = i;
  }
  if (best == scores.size()) throw InvalidInput("no scorable choice");
  return best;
}

MultipleChoiceResult multiple_choice(const ModelParams<float>& model, const TokenSeq& prompt,
                                     const std::vector<TokenSeq>& choices, std::size_t num_t,
                                     std::uint64_t seed, const EvalOptions& options) {
  if (choices.size() < 2) throw InvalidInput("multiple_choice needs at least two choices");
  MultipleChoiceResult r;
  r.scores.assign(choices.size(), std::numeric_limits<double>::quiet_NaN());
  EvalOptions o = options;
  o.loss_from = prompt.size() + 1;
  for (std::size_t c = 0; c < choices.size(); ++c) {
    if (choices[c].empty()) {
      r.warnings.push_back("choice " + std::to_string(c) + " is empty; skipped");
      continue;
    }
    TokenSeq seq{kBosId};
    seq.insert(seq.end(), prompt.begin(), prompt.end());
    seq.insert(seq.end(), choices[c].begin(), choices[c].end());
    r.scores[c] = elbo_estimate(model, seq, num_t, seed, o).nats_per_token;
  }
  r.chosen = argmin_choice(r.scores);
  return r;
}

double distinct_n(const std::vector<TokenSeq>& samples, std::size_t n, std::string* warning) {
  if (n < 1) throw InvalidInput("distinct_n needs n >= 1");
  if (samples.empty()) throw InvalidInput("distinct_n needs at least one sample");
  std::set<std::vector<TokenId>> unique;
  std::size_t total = 0;
  for (const TokenSeq& s : samples) {
    if (s.size() < n) continue;
    for (std::size_t i = 0; i + n <= s.size(); ++i) {
      unique.emplace(s.begin() + static_cast<std::ptrdiff_t>(i),
                     s.begin() + static_cast<std::ptrdiff_t>(i + n));
      ++total;
    }
  }
  if (total == 0) {
    if (warning) *warning = "every sample is shorter than n=" + std::to_string(n);
    return 0.0;
  }
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

double gen_ppl_proxy(const ModelParams<float>& scorer, const std::vector<TokenSeq>& samples) {
  if (samples.empty()) throw InvalidInput("gen_ppl_proxy needs at least one sample");
  if (scorer.config.mode != AttentionMode::causal) {
    throw InvalidInput("perplexity scorer must be a causal model");
  }
  double nats = 0.0;
  std::size_t tokens = 0;
  for (const TokenSeq& s : samples) {
    if (s.empty()) continue;
    TokenSeq seq{kBosId};
    seq.insert(seq.end(), s.begin(), s.end());
    nats += ar_sequence_loss(scorer, seq);
    tokens += s.size();
  }
  if (tokens == 0) throw InvalidInput("all samples are empty");
  return std::exp(nats / static_cast<double>(tokens));
}

template <class Real>
std::pair<double, double> ar_equivalence_check(const ModelParams<Real>& model,
                                               const TokenSeq& seq) {
  const AttentionMask causal = AttentionMask::causal(seq.size());
  return {sequential_masking_loss(model, seq, causal), ar_sequence_loss(model, seq)};
}

template std::pair<double, double> ar_equivalence_check<float>(const ModelParams<float>&,
                                                               const TokenSeq&);
template std::pair<double, double> ar_equivalence_check<double>(const ModelParams<double>&,
                                                                const TokenSeq&);

GenQualityReport generation_quality(const ModelParams<float>& model,
                                    const ModelParams<float>& scorer, const SamplerConfig& config,
                                    std::size_t samples_per_seed,
                                    const std::vector<std::uint64_t>& seeds) {
  if (samples_per_seed < 1 || seeds.empty()) {
    throw InvalidInput("generation_quality needs samples and seeds");
  }
  GenQualityReport r;
  r.steps = config.steps;
  std::vector<TokenSeq> all;
  for (std::uint64_t seed : seeds) {
    std::vector<TokenSeq> mine;
    for (std::size_t i = 0; i < samples_per_seed; ++i) {
      SamplerConfig c = config;
      c.seed = derive_seed(seed, i);
      mine.push_back(generate(model, c).tokens);
    }
    r.per_seed_perplexity.push_back(gen_ppl_proxy(scorer, mine));
    all.insert(all.end(), mine.begin(), mine.end());
  }
  r.sample_count = all.size();
  r.perplexity = median(r.per_seed_perplexity);
  r.distinct_2 = distinct_n(all, 2);
  return r;
}

double median(std::vector<double> values) {
  if (values.empty()) throw InvalidInput("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size() / 2;
  return values.size() % 2 == 1 ? values[m] : 0.5 * (values[m - 1] + values[m]);
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidInput("spearman needs paired samples");
  const std::vector<double> rx = ranks(x);
  const std::vector<double> ry = ranks(y);
  const double mx = mean_of(rx);
  const double my = mean_of(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace dlm
