// SPDX-License-Identifier: Apache-2.0
//
// Self-checks that compare closed forms, gradients and sampler behaviour
// against brute-force oracles. Used by `dlm verify` and the acceptance
// tests.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dlm/tinylm.hpp"

namespace dlm {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

/// Small random model with weights spread wide enough that outputs depend
/// on context. Used as an oracle subject, not for generation quality.
ModelParams<float> random_tiny_model(const ModelConfig& config, std::uint64_t seed,
                                     double scale = 0.5);

/// Chapman-Kolmogorov, posterior/Bayes consistency and normalization over
/// `draws` random (x0, s, t) at tolerance 1e-12.
CheckResult check_process_identities(std::uint64_t seed, std::size_t draws = 1000);

/// Monte-Carlo diffusion loss vs exact enumeration on random (model, seq,
/// t) triples, each within 3 standard errors.
CheckResult check_loss_oracle(std::uint64_t seed, std::size_t triples = 20,
                              std::size_t draws = 10000);

/// Central finite differences (step 1e-3) against analytic gradients of
/// both objectives on randomly chosen parameters, in double precision.
CheckResult check_gradients(std::uint64_t seed, std::size_t params_per_objective = 50,
                            double tolerance = 1e-4);

/// Sequential right-to-left masking vs next-token loss on random sequences.
CheckResult check_ar_equivalence(std::uint64_t seed, std::size_t sequences = 10);

/// No MASK left, monotone traces, exact constraints, seed determinism.
CheckResult check_sampler_contracts(std::uint64_t seed, std::size_t generations = 100);

/// Kernel variants agree with the reference kernels.
CheckResult check_kernels(std::uint64_t seed);

std::vector<CheckResult> run_verify_suite(std::uint64_t seed);

}  // namespace dlm
