// SPDX-License-Identifier: Apache-2.0

#include "dlm/diffusion_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dlm/errors.hpp"

namespace dlm {
namespace {

void require_unit_time(double t, const char* what) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw DomainError(std::string(what) + " must lie in [0, 1], got " + std::to_string(t));
  }
}

void require_ordered(double s, double t) {
  require_unit_time(s, "s");
  require_unit_time(t, "t");
  if (!(s < t)) {
    throw DomainError("expected s < t, got s=" + std::to_string(s) + " t=" + std::to_string(t));
  }
}

void require_clean(TokenId x0) {
  if (x0 == kMaskId) throw InvalidInput("x0 must not be the MASK token");
}

template <class Real>
void check_shape(const Matrix<Real>& logits, const CorruptedItem& item) {
  if (logits.rows != item.labels.size() || item.noisy.size() != item.labels.size() ||
      item.mask_indicator.size() != item.labels.size()) {
    throw DimensionError("logits rows (" + std::to_string(logits.rows) +
                         ") must match sequence length (" + std::to_string(item.labels.size()) +
                         ")");
  }
  for (TokenId id : item.labels) {
    if (id < 0 || static_cast<std::size_t>(id) >= logits.cols) {
      throw DimensionError("label id " + std::to_string(id) + " outside logits width " +
                           std::to_string(logits.cols));
    }
  }
}

}  // namespace

double NoiseSchedule::alpha(double t) const {
  require_unit_time(t, "t");
  switch (kind) {
    case ScheduleKind::linear:
      return 1.0 - t;
  }
  return 1.0 - t;
}

double NoiseSchedule::alpha_derivative(double t) const {
  require_unit_time(t, "t");
  return -1.0;
}

double NoiseSchedule::loss_weight(double t) const {
  if (!(t >= eps && t <= 1.0)) {
    throw DomainError("loss weight requires t in [eps, 1], got " + std::to_string(t));
  }
  switch (kind) {
    case ScheduleKind::linear:
      return 1.0 / t;
  }
  return -alpha_derivative(t) / (1.0 - alpha(t));
}

double Categorical2::prob(TokenId id) const {
  double p = 0.0;
  if (id == token) p += stay_prob;
  if (id == kMaskId) p += mask_prob;
  return p;
}

Categorical2 forward_marginal(const NoiseSchedule& schedule, TokenId x0, double t) {
  require_clean(x0);
  const double a = schedule.alpha(t);
  return {x0, a, 1.0 - a};
}

Categorical2 forward_transition(const NoiseSchedule& schedule, TokenId xs, double s, double t) {
  require_ordered(s, t);
  if (xs == kMaskId) return {kMaskId, 0.0, 1.0};
  const double as = schedule.alpha(s);
  if (as == 0.0) {
    throw InvariantViolation("x_s is unmasked at a time where alpha_s = 0");
  }
  const double ratio = schedule.alpha(t) / as;
  return {xs, ratio, 1.0 - ratio};
}

Categorical2 backward_posterior(const NoiseSchedule& schedule, TokenId xt, TokenId x0, double s,
                                double t) {
  require_clean(x0);
  if (t == 0.0) throw DomainError("backward posterior is undefined at t = 0 (no noise)");
  require_ordered(s, t);
  if (xt != kMaskId) return {x0, 1.0, 0.0};
  const double as = schedule.alpha(s);
  const double at = schedule.alpha(t);
  const double denom = 1.0 - at;
  return {x0, (as - at) / denom, (1.0 - as) / denom};
}

KlTerm kl_step_term(const NoiseSchedule& schedule, TokenId x0, TokenId xt, double model_prob_on_x0,
                    double s, double t) {
  require_clean(x0);
  require_ordered(s, t);
  if (!(model_prob_on_x0 >= 0.0 && model_prob_on_x0 <= 1.0)) {
    throw DomainError("model probability must lie in [0, 1]");
  }
  if (xt != kMaskId) return {0.0, false};
  const double at = schedule.alpha(t);
  const double jump = (schedule.alpha(s) - at) / (1.0 - at);
  if (model_prob_on_x0 == 0.0) {
    return {jump > 0.0 ? std::numeric_limits<double>::infinity() : 0.0, jump > 0.0};
  }
  return {-jump * std::log(model_prob_on_x0), false};
}

std::size_t CorruptedItem::masked_count() const {
  return static_cast<std::size_t>(std::count(mask_indicator.begin(), mask_indicator.end(), true));
}

CorruptedItem corrupt_sequence(const NoiseSchedule& schedule, const TokenSeq& x0, double t,
                               Rng& rng, std::size_t keep_prefix) {
  if (x0.empty()) throw InvalidInput("cannot corrupt an empty sequence");
  if (std::find(x0.begin(), x0.end(), kMaskId) != x0.end()) {
    throw InvalidInput("clean sequence contains the MASK token");
  }
  if (!(t >= schedule.eps && t <= 1.0)) {
    throw DomainError("corruption time must lie in [eps, 1], got " + std::to_string(t));
  }
  const double p_mask = 1.0 - schedule.alpha(t);
  CorruptedItem item;
  item.t = t;
  item.labels = x0;
  item.noisy = x0;
  item.mask_indicator.assign(x0.size(), false);
  for (std::size_t n = keep_prefix; n < x0.size(); ++n) {
    if (rng.uniform() < p_mask) {
      item.noisy[n] = kMaskId;
      item.mask_indicator[n] = true;
    }
  }
  return item;
}

CorruptedItem corrupt_with_pattern(const TokenSeq& x0, const std::vector<bool>& pattern,
                                   double t) {
  if (pattern.size() != x0.size()) throw DimensionError("mask pattern length mismatch");
  if (std::find(x0.begin(), x0.end(), kMaskId) != x0.end()) {
    throw InvalidInput("clean sequence contains the MASK token");
  }
  CorruptedItem item{x0, pattern, t, x0};
  for (std::size_t n = 0; n < x0.size(); ++n) {
    if (pattern[n]) item.noisy[n] = kMaskId;
  }
  return item;
}

void validate(const CorruptedItem& item) {
  const std::size_t n = item.labels.size();
  if (item.noisy.size() != n || item.mask_indicator.size() != n) {
    throw InvalidInput("corrupted item fields have inconsistent lengths");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (item.mask_indicator[i] != (item.noisy[i] == kMaskId)) {
      throw InvalidInput("mask indicator disagrees with noisy token at position " +
                         std::to_string(i));
    }
    if (!item.mask_indicator[i] && item.noisy[i] != item.labels[i]) {
      throw InvalidInput("unmasked position " + std::to_string(i) + " differs from its label");
    }
  }
}

template <class Real>
double cross_entropy(const Real* logits, std::size_t k, TokenId label) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(logits[j]));
  double z = 0.0;
  for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(logits[j]) - mx);
  return std::log(z) + mx - static_cast<double>(logits[label]);
}

template <class Real>
double diffusion_loss(const Matrix<Real>& shifted_logits, const CorruptedItem& item,
                      const NoiseSchedule& schedule) {
  check_shape(shifted_logits, item);
  double sum = 0.0;
  bool any = false;
  for (std::size_t n = 1; n < item.labels.size(); ++n) {
    if (!item.mask_indicator[n]) continue;
    any = true;
    sum += cross_entropy(shifted_logits.row(n), shifted_logits.cols, item.labels[n]);
  }
  if (!any) return 0.0;
  return schedule.loss_weight(item.t) * sum;
}

template <class Real>
double diffusion_loss_backward(const Matrix<Real>& shifted_logits, const CorruptedItem& item,
                               const NoiseSchedule& schedule, double scale, Matrix<Real>& grad) {
  check_shape(shifted_logits, item);
  if (grad.rows != shifted_logits.rows || grad.cols != shifted_logits.cols) {
    throw DimensionError("gradient buffer shape mismatch");
  }
  const std::size_t k = shifted_logits.cols;
  bool any = false;
  for (std::size_t n = 1; n < item.labels.size(); ++n) any = any || item.mask_indicator[n];
  if (!any) return 0.0;
  const double w = schedule.loss_weight(item.t);
  double sum = 0.0;
  std::vector<double> p(k);
  for (std::size_t n = 1; n < item.labels.size(); ++n) {
    if (!item.mask_indicator[n]) continue;
    const Real* row = shifted_logits.row(n);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      p[j] = std::exp(static_cast<double>(row[j]) - mx);
      z += p[j];
    }
    const TokenId label = item.labels[n];
    sum += std::log(z) + mx - static_cast<double>(row[label]);
    Real* g = grad.row(n);
    for (std::size_t j = 0; j < k; ++j) {
      const double dj = p[j] / z - (static_cast<TokenId>(j) == label ? 1.0 : 0.0);
      g[j] += static_cast<Real>(scale * w * dj);
    }
  }
  return w * sum;
}

template double cross_entropy<float>(const float*, std::size_t, TokenId);
template double cross_entropy<double>(const double*, std::size_t, TokenId);
template double diffusion_loss<float>(const Matrix<float>&, const CorruptedItem&,
                                      const NoiseSchedule&);
template double diffusion_loss<double>(const Matrix<double>&, const CorruptedItem&,
                                       const NoiseSchedule&);
template double diffusion_loss_backward<float>(const Matrix<float>&, const CorruptedItem&,
                                               const NoiseSchedule&, double, Matrix<float>&);
template double diffusion_loss_backward<double>(const Matrix<double>&, const CorruptedItem&,
                                                const NoiseSchedule&, double, Matrix<double>&);

}  // namespace dlm
