// SPDX-License-Identifier: Apache-2.0

#include "dlm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "dlm/errors.hpp"
#include "json.hpp"

namespace dlm {

std::string_view to_string(SamplingStrategy strategy) {
  return strategy == SamplingStrategy::posterior ? "posterior" : "confidence";
}

SamplingStrategy sampling_strategy_from_string(std::string_view name) {
  if (name == "posterior") return SamplingStrategy::posterior;
  if (name == "confidence") return SamplingStrategy::confidence;
  throw ConfigError("unknown sampling strategy: " + std::string(name));
}

void SamplerConfig::validate() const {
  if (steps < 1) throw ConfigError("sampler needs at least one step");
  if (length < 2) throw ConfigError("sampler buffer length must be at least 2");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be positive");
  }
  if (top_p && !(*top_p > 0.0 && *top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
}

void GenerationConstraint::validate(std::size_t length, std::size_t vocab_size) const {
  for (const auto& [pos, id] : fixed_positions) {
    if (pos == 0) throw ConfigError("constraint conflicts with the BOS slot");
    if (pos >= length) {
      throw ConfigError("constraint position " + std::to_string(pos) + " outside the buffer");
    }
    if (id == kMaskId) throw ConfigError("constraint cannot fix a MASK token");
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
      throw ConfigError("constraint id " + std::to_string(id) + " outside the vocabulary");
    }
  }
}

std::optional<TokenId> GenerationConstraint::fixed_at(std::size_t position) const {
  for (const auto& [pos, id] : fixed_positions) {
    if (pos == position) return id;
  }
  return std::nullopt;
}

void SampleTrace::write_jsonl(std::ostream& out) const {
  for (const TraceStep& st : steps) {
    nlohmann::json j{{"step", st.step},
                     {"t", st.t},
                     {"s", st.s},
                     {"masked_count", st.masked_count},
                     {"newly_unmasked", st.newly_unmasked}};
    out << j.dump() << '\n';
  }
}

FilterResult logits_filter(std::span<const float> scores, const SamplerConfig& config) {
  const std::size_t k = scores.size();
  FilterResult out;
  out.probs.assign(k, 0.0);
  std::vector<std::size_t> support;
  support.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    if (static_cast<TokenId>(j) != kMaskId) support.push_back(j);
  }
  auto fallback = [&] {
    std::fill(out.probs.begin(), out.probs.end(), 0.0);
    std::size_t best = support.empty() ? 0 : support.front();
    for (std::size_t j : support) {
      if (scores[j] > scores[best]) best = j;
    }
    out.probs[best] = 1.0;
    out.fell_back = true;
    return out;
  };
  if (support.empty()) return fallback();

  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j : support) mx = std::max(mx, static_cast<double>(scores[j]) / config.temperature);
  double z = 0.0;
  for (std::size_t j : support) {
    out.probs[j] = std::exp(static_cast<double>(scores[j]) / config.temperature - mx);
    z += out.probs[j];
  }
  if (!(z > 0.0) || !std::isfinite(z)) return fallback();
  for (std::size_t j : support) out.probs[j] /= z;

  // Highest probability first; ties broken by lower id for determinism.
  std::stable_sort(support.begin(), support.end(),
                   [&](std::size_t a, std::size_t b) { return out.probs[a] > out.probs[b]; });
  std::size_t keep = support.size();
  if (config.top_k) keep = std::min(keep, *config.top_k);
  if (config.top_p) {
    double cum = 0.0;
    std::size_t nucleus = 0;
    while (nucleus < keep) {
      cum += out.probs[support[nucleus]];
      ++nucleus;
      if (cum >= *config.top_p) break;
    }
    keep = nucleus;
  }
  if (keep == 0) return fallback();
  double kept = 0.0;
  for (std::size_t i = 0; i < keep; ++i) kept += out.probs[support[i]];
  if (!(kept > 0.0)) return fallback();
  for (std::size_t i = keep; i < support.size(); ++i) out.probs[support[i]] = 0.0;
  for (std::size_t i = 0; i < keep; ++i) out.probs[support[i]] /= kept;
  return out;
}

TokenId sample_categorical(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    if (probs[j] <= 0.0) continue;
    last_positive = j;
    cum += probs[j];
    if (u < cum) return static_cast<TokenId>(j);
  }
  return static_cast<TokenId>(last_positive);
}

TokenSeq denoise_step(const ModelParams<float>& model, const TokenSeq& buffer, double t, double s,
                      const GenerationConstraint& constraint, const SamplerConfig& config,
                      Rng& rng, std::vector<std::size_t>* newly_unmasked) {
  if (buffer.empty() || buffer[0] != kBosId) throw ConfigError("buffer must start with BOS");
  if (!(s < t)) throw DomainError("denoise step needs s < t");
  const std::size_t n = buffer.size();
  constraint.validate(n, model.config.vocab_size);

  const Matrix<float> logits = forward(model, buffer, inference_mask(model.config, n));

  // Candidates and confidences in output coordinates: slot j predicts
  // buffer position j + 1.
  std::vector<TokenId> candidate(n - 1);
  std::vector<double> confidence(n - 1);
  for (std::size_t j = 0; j + 1 < n; ++j) {
    const FilterResult f = logits_filter(logits.row_span(j), config);
    candidate[j] = sample_categorical(f.probs, rng);
    confidence[j] = f.probs[static_cast<std::size_t>(candidate[j])];
  }

  auto is_open = [&](std::size_t pos) {
    return buffer[pos] == kMaskId && !constraint.fixed_at(pos).has_value();
  };

  std::vector<TokenId> next_out(n - 1);
  for (std::size_t j = 0; j + 1 < n; ++j) next_out[j] = buffer[j + 1];
  if (newly_unmasked) newly_unmasked->clear();

  if (config.strategy == SamplingStrategy::posterior) {
    for (std::size_t j = 0; j + 1 < n; ++j) {
      if (!is_open(j + 1)) continue;
      const Categorical2 q = backward_posterior(config.schedule, kMaskId, candidate[j], s, t);
      if (rng.uniform() < q.stay_prob) {
        next_out[j] = candidate[j];
        if (newly_unmasked) newly_unmasked->push_back(j + 1);
      }
    }
  } else {
    std::vector<std::size_t> open;
    for (std::size_t j = 0; j + 1 < n; ++j) {
      if (is_open(j + 1)) open.push_back(j);
    }
    const double at = config.schedule.alpha(t);
    const double jump = (config.schedule.alpha(s) - at) / (1.0 - at);
    const auto m = static_cast<double>(open.size());
    auto count = static_cast<std::size_t>(std::llround(m * jump));
    if (s == 0.0) count = open.size();
    count = std::min(count, open.size());
    std::stable_sort(open.begin(), open.end(),
                     [&](std::size_t a, std::size_t b) { return confidence[a] > confidence[b]; });
    open.resize(count);
    std::sort(open.begin(), open.end());
    for (std::size_t j : open) {
      next_out[j] = candidate[j];
      if (newly_unmasked) newly_unmasked->push_back(j + 1);
    }
  }

  // Right shift behind a fresh start token.
  TokenSeq next;
  next.reserve(n);
  next.push_back(kBosId);
  next.insert(next.end(), next_out.begin(), next_out.end());
  return next;
}

Generation generate(const ModelParams<float>& model, const SamplerConfig& config,
                    const GenerationConstraint& constraint) {
  config.validate();
  const std::size_t n = config.length;
  if (n > model.config.max_seq_len) {
    throw ConfigError("buffer length exceeds the model's max_seq_len");
  }
  constraint.validate(n, model.config.vocab_size);

  TokenSeq buffer(n, kMaskId);
  buffer[0] = kBosId;
  for (const auto& [pos, id] : constraint.fixed_positions) buffer[pos] = id;

  Generation g;
  g.trace.unmask_step.assign(n, -1);
  for (std::size_t p = 0; p < n; ++p) {
    if (buffer[p] != kMaskId) g.trace.unmask_step[p] = 0;
  }
  g.trace.snapshots.push_back(buffer);

  Rng rng(config.seed);
  const auto T = static_cast<double>(config.steps);
  std::vector<std::size_t> newly;
  for (std::size_t i = config.steps, iter = 1; i >= 1; --i, ++iter) {
    const double t = static_cast<double>(i) / T;
    const double s = static_cast<double>(i - 1) / T;
    TraceStep st;
    st.step = iter;
    st.t = t;
    st.s = s;
    st.masked_count = static_cast<std::size_t>(std::count(buffer.begin(), buffer.end(), kMaskId));
    buffer = denoise_step(model, buffer, t, s, constraint, config, rng, &newly);
    for (std::size_t p : newly) g.trace.unmask_step[p] = static_cast<std::int64_t>(iter);
    st.newly_unmasked = newly;
    g.trace.steps.push_back(std::move(st));
    g.trace.snapshots.push_back(buffer);
  }
  if (std::find(buffer.begin(), buffer.end(), kMaskId) != buffer.end()) {
    throw InvariantViolation("MASK tokens remain after the final denoising step");
  }
  g.tokens.assign(buffer.begin() + 1, buffer.end());
  return g;
}

TokenSeq infill(const ModelParams<float>& model, const TokenSeq& prefix, const TokenSeq& suffix,
                std::size_t hole_len, const SamplerConfig& config, SampleTrace* trace) {
  if (hole_len == 0) return {};
  if (prefix.size() + hole_len + suffix.size() + 1 > config.length) {
    throw ConfigError("prefix + hole + suffix does not fit the sampler buffer");
  }
  GenerationConstraint c;
  std::size_t pos = 1;
  for (TokenId id : prefix) c.fixed_positions.emplace_back(pos++, id);
  const std::size_t hole_start = pos;
  pos += hole_len;
  for (TokenId id : suffix) c.fixed_positions.emplace_back(pos++, id);
  Generation g = generate(model, config, c);
  if (trace) *trace = std::move(g.trace);
  // g.tokens drops the BOS slot, so buffer position p is g.tokens[p - 1].
  return TokenSeq(g.tokens.begin() + static_cast<std::ptrdiff_t>(hole_start - 1),
                  g.tokens.begin() + static_cast<std::ptrdiff_t>(hole_start - 1 + hole_len));
}

}  // namespace dlm
