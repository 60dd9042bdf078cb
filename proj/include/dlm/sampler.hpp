// SPDX-License-Identifier: Apache-2.0
//
// Iterative denoising generation for diffusion-adapted models.
//
// The buffer is [BOS, x_1, ..., x_{N-1}]. Because the model was trained with
// shifted logits, output slot j carries the prediction for buffer position
// j+1. Each step therefore builds the updated tokens in output coordinates
// and right-shifts them behind a fresh BOS, which puts every token back at
// its own position. Only buffer positions 1..N-1 are ever generated.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlm/diffusion_core.hpp"
#include "dlm/rng.hpp"
#include "dlm/tinylm.hpp"

namespace dlm {

enum class SamplingStrategy {
  posterior,   ///< masked positions jump to the candidate w.p. (a_s - a_t)/(1 - a_t)
  confidence,  ///< unmask the k most confident masked positions
};

std::string_view to_string(SamplingStrategy strategy);
SamplingStrategy sampling_strategy_from_string(std::string_view name);

struct SamplerConfig {
  std::size_t steps = 16;   ///< T
  std::size_t length = 32;  ///< N, including the BOS slot
  SamplingStrategy strategy = SamplingStrategy::posterior;
  std::optional<std::size_t> top_k;
  std::optional<double> top_p;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  NoiseSchedule schedule;

  /// Throws ConfigError unless T >= 1, N >= 2, temperature > 0 and
  /// top_p in (0, 1].
  void validate() const;
};

struct GenerationConstraint {
  /// (buffer position, token id) pairs held fixed for the whole run.
  std::vector<std::pair<std::size_t, TokenId>> fixed_positions;

  /// Throws ConfigError for position 0 (the BOS slot), positions >= N, MASK
  /// ids or ids outside the vocabulary.
  void validate(std::size_t length, std::size_t vocab_size) const;
  std::optional<TokenId> fixed_at(std::size_t position) const;
};

struct TraceStep {
  std::size_t step = 0;  ///< 1-based iteration index
  double t = 0.0;
  double s = 0.0;
  std::size_t masked_count = 0;  ///< masked positions on entry
  std::vector<std::size_t> newly_unmasked;
};

struct SampleTrace {
  /// Buffer after each step (snapshots[0] is the initial buffer).
  std::vector<TokenSeq> snapshots;
  /// Step at which each buffer position became non-MASK; 0 for positions
  /// that were never masked (BOS and constraints), -1 if still masked.
  std::vector<std::int64_t> unmask_step;
  std::vector<TraceStep> steps;

  /// One JSON object per step: {"step", "t", "s", "masked_count", "newly_unmasked"}.
  void write_jsonl(std::ostream& out) const;
};

struct Generation {
  TokenSeq tokens;  ///< buffer positions 1..N-1
  SampleTrace trace;
};

struct FilterResult {
  std::vector<double> probs;
  bool fell_back = false;  ///< everything was filtered; one-hot on argmax
};

/// Temperature softmax restricted to the top-k set and/or the smallest
/// nucleus reaching top_p, renormalized. MASK always gets probability 0.
FilterResult logits_filter(std::span<const float> scores, const SamplerConfig& config);

/// Draws an index from a probability vector.
TokenId sample_categorical(std::span<const double> probs, Rng& rng);

/// One reverse step from time t to s < t. Constrained positions and already
/// unmasked positions are never changed. Throws ConfigError if the buffer
/// does not start with BOS or the constraint touches slot 0.
TokenSeq denoise_step(const ModelParams<float>& model, const TokenSeq& buffer, double t, double s,
                      const GenerationConstraint& constraint, const SamplerConfig& config,
                      Rng& rng, std::vector<std::size_t>* newly_unmasked = nullptr);

/// Runs T reverse steps on the grid t_i = i / T, i = T..1. The output holds
/// no MASK; a leftover MASK throws InvariantViolation.
Generation generate(const ModelParams<float>& model, const SamplerConfig& config,
                    const GenerationConstraint& constraint = {});

/// Lays out [BOS, prefix, hole, suffix, free tail] in a buffer of
/// config.length, generates, and returns the hole tokens. hole_len == 0
/// returns an empty sequence without running the model.
TokenSeq infill(const ModelParams<float>& model, const TokenSeq& prefix, const TokenSeq& suffix,
                std::size_t hole_len, const SamplerConfig& config,
                SampleTrace* trace = nullptr);

}  // namespace dlm
