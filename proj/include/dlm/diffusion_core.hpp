// SPDX-License-Identifier: Apache-2.0
//
// Absorbing-state discrete diffusion: schedule, per-token process
// distributions, corruption, and the masked reweighted cross-entropy loss.
//
// Every distribution of the absorbing process is supported on at most two
// atoms (the conditioning token and MASK), so transition matrices are never
// materialized; Categorical2 is the canonical representation. All probability
// arithmetic is double precision regardless of the logits' element type.

#pragma once

#include <cstdint>
#include <vector>

#include "dlm/rng.hpp"
#include "dlm/tensor.hpp"

namespace dlm {

/// Reserved vocabulary ids. BOS doubles as the sampler's start token.
inline constexpr TokenId kBosId = 0;
inline constexpr TokenId kMaskId = 1;
inline constexpr TokenId kDocSepId = 2;
inline constexpr TokenId kFirstContentId = 3;

enum class ScheduleKind { linear };

struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  /// Lower clamp for t wherever the 1/t weight is evaluated.
  double eps = 1e-3;

  /// Survival probability alpha(t). Throws DomainError outside [0, 1].
  double alpha(double t) const;
  double alpha_derivative(double t) const;
  /// -alpha'(t) / (1 - alpha(t)); exactly 1/t for the linear schedule.
  /// Throws DomainError for t < eps or t > 1.
  double loss_weight(double t) const;
};

/// Two-atom categorical: `stay_prob` on `token`, `mask_prob` on MASK.
/// When the whole mass sits on MASK, token == kMaskId and stay_prob == 0.
struct Categorical2 {
  TokenId token = kMaskId;
  double stay_prob = 0.0;
  double mask_prob = 1.0;

  double prob(TokenId id) const;
  double total() const { return stay_prob + mask_prob; }
};

/// q(x_t | x_0) = alpha_t x_0 + (1 - alpha_t) m.
Categorical2 forward_marginal(const NoiseSchedule& schedule, TokenId x0, double t);

/// q(x_t | x_s) for 0 <= s < t <= 1.
Categorical2 forward_transition(const NoiseSchedule& schedule, TokenId xs, double s, double t);

/// q(x_s | x_t, x_0), closed form of the absorbing process.
Categorical2 backward_posterior(const NoiseSchedule& schedule, TokenId xt, TokenId x0, double s,
                                double t);

struct KlTerm {
  double nats = 0.0;
  /// Set when the model put zero mass on x_0 at a masked position.
  bool infinite = false;
};

/// KL(q(x_s|x_t,x_0) || p_theta(x_s|x_t)) for one token, which reduces to
/// -((alpha_s - alpha_t)/(1 - alpha_t)) * [x_t == MASK] * log p_theta(x_0).
KlTerm kl_step_term(const NoiseSchedule& schedule, TokenId x0, TokenId xt, double model_prob_on_x0,
                    double s, double t);

/// One corrupted training sequence.
struct CorruptedItem {
  TokenSeq noisy;
  std::vector<bool> mask_indicator;
  double t = 1.0;
  TokenSeq labels;

  std::size_t masked_count() const;
};

using CorruptedBatch = std::vector<CorruptedItem>;

/// Replaces each position at index >= keep_prefix by MASK independently with
/// probability 1 - alpha(t). The first keep_prefix positions (the BOS slot in
/// training blocks) are never corrupted. Deterministic given the rng state.
CorruptedItem corrupt_sequence(const NoiseSchedule& schedule, const TokenSeq& x0, double t,
                               Rng& rng, std::size_t keep_prefix = 0);

/// Builds an item from an explicit mask pattern (used by enumeration oracles
/// and the sequential AR-as-diffusion construction).
CorruptedItem corrupt_with_pattern(const TokenSeq& x0, const std::vector<bool>& pattern, double t);

/// Checks the CorruptedItem invariants; throws InvalidInput on violation.
void validate(const CorruptedItem& item);

/// Cross-entropy -log softmax(row)[label], computed in double.
template <class Real>
double cross_entropy(const Real* logits, std::size_t k, TokenId label);

/// weight(t) * sum over masked positions n >= 1 of CE(shifted_logits[n], labels[n]).
/// Slot 0 is ignored. Returns exactly 0 when nothing is masked.
/// Throws DimensionError if the logits do not have one row per label.
template <class Real>
double diffusion_loss(const Matrix<Real>& shifted_logits, const CorruptedItem& item,
                      const NoiseSchedule& schedule);

/// Gradient of `scale * diffusion_loss` w.r.t. the shifted logits, accumulated
/// into `grad` (same shape). Returns the unscaled loss.
template <class Real>
double diffusion_loss_backward(const Matrix<Real>& shifted_logits, const CorruptedItem& item,
                               const NoiseSchedule& schedule, double scale, Matrix<Real>& grad);

}  // namespace dlm
