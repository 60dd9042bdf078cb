// SPDX-License-Identifier: Apache-2.0

#include "dlm/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <sstream>

#include "dlm/diffusion_core.hpp"
#include "dlm/errors.hpp"
#include "dlm/evalsuite.hpp"
#include "dlm/kernels.hpp"
#include "dlm/rng.hpp"
#include "dlm/sampler.hpp"

namespace dlm {

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

TokenSeq random_sequence(Rng& rng, std::size_t n, std::size_t vocab) {
  TokenSeq s(n);
  s[0] = kBosId;
  for (std::size_t i = 1; i < n; ++i) {
    s[i] = kFirstContentId + static_cast<TokenId>(rng.below(vocab - kFirstContentId));
  }
  return s;
}

ModelConfig tiny_config(std::size_t vocab, std::size_t max_len, AttentionMode mode) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = max_len;
  c.vocab_size = vocab;
  c.mode = mode;
  c.anneal_ratio = mode == AttentionMode::full ? 1.0 : 0.0;
  return c;
}

}  // namespace

ModelParams<float> random_tiny_model(const ModelConfig& config, std::uint64_t seed,
                                     double scale) {
  ModelParams<float> p = init_params(config, seed);
  Rng rng(derive_seed(seed, 7));
  for (auto& t : p.tensors) {
    for (float& v : t.data) v += static_cast<float>(scale * rng.normal());
  }
  return p;
}

CheckResult check_process_identities(std::uint64_t seed, std::size_t draws) {
  const auto start = Clock::now();
  const NoiseSchedule sched;
  Rng rng(seed);
  double worst_ck = 0.0, worst_bayes = 0.0, worst_norm = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    const TokenId x0 = kFirstContentId + static_cast<TokenId>(rng.below(64));
    double a = rng.uniform(), b = rng.uniform(), c = rng.uniform();
    if (a > b) std::swap(a, b);
    if (b > c) std::swap(b, c);
    if (a > b) std::swap(a, b);
    // u < s < t; nudge apart so every transition is defined.
    const double u = a * 0.98;
    const double s = 0.01 + b * 0.98;
    const double t = std::max(c, s + 1e-3) > 1.0 ? 1.0 : std::max(c, s + 1e-3);

    // Chapman-Kolmogorov: q(x_t | x_u) = sum_{x_s} q(x_t | x_s) q(x_s | x_u).
    const Categorical2 ut = forward_transition(sched, x0, u, t);
    const Categorical2 us = forward_transition(sched, x0, u, s);
    const Categorical2 st = forward_transition(sched, x0, s, t);
    const Categorical2 ms = forward_transition(sched, kMaskId, s, t);
    const double stay = us.stay_prob * st.stay_prob;
    const double mask = us.stay_prob * st.mask_prob + us.mask_prob * ms.mask_prob;
    worst_ck = std::max({worst_ck, std::abs(stay - ut.stay_prob), std::abs(mask - ut.mask_prob)});
    // Same identity from time 0 through the marginals.
    const Categorical2 m_s = forward_marginal(sched, x0, s);
    const Categorical2 m_t = forward_marginal(sched, x0, t);
    worst_ck = std::max(worst_ck, std::abs(m_s.stay_prob * st.stay_prob - m_t.stay_prob));

    // Bayes: q(x_s | x_t, x0) = q(x_t | x_s) q(x_s | x0) / q(x_t | x0).
    for (TokenId xt : {kMaskId, x0}) {
      const Categorical2 post = backward_posterior(sched, xt, x0, s, t);
      const double evidence = m_t.prob(xt);
      for (TokenId xs : {x0, kMaskId}) {
        const double joint = forward_transition(sched, xs, s, t).prob(xt) * m_s.prob(xs);
        worst_bayes = std::max(worst_bayes, std::abs(post.prob(xs) - joint / evidence));
      }
      worst_norm = std::max(worst_norm, std::abs(post.total() - 1.0));
    }
    for (const Categorical2& q : {ut, us, st, ms, m_s, m_t}) {
      worst_norm = std::max(worst_norm, std::abs(q.total() - 1.0));
    }
  }
  std::ostringstream d;
  d << draws << " draws; max err chapman-kolmogorov " << worst_ck << ", bayes " << worst_bayes
    << ", normalization " << worst_norm;
  const bool ok = worst_ck <= 1e-12 && worst_bayes <= 1e-12 && worst_norm <= 1e-12;
  return {"process identities", ok, d.str(), since(start)};
}

CheckResult check_loss_oracle(std::uint64_t seed, std::size_t triples, std::size_t draws) {
  const auto start = Clock::now();
  Rng rng(seed);
  std::size_t passed = 0;
  double worst_z = 0.0;
  for (std::size_t i = 0; i < triples; ++i) {
    const std::size_t vocab = 5 + rng.below(4);
    const std::size_t n = 2 + rng.below(7);  // 2..8 including BOS
    const ModelParams<float> model =
        random_tiny_model(tiny_config(vocab, 8, AttentionMode::full), rng.next_u64());
    const TokenSeq seq = random_sequence(rng, n, vocab);
    const double t = rng.uniform(NoiseSchedule{}.eps, 1.0);
    const double exact = exact_expected_loss(model, seq, t);
    const MonteCarloLoss mc = monte_carlo_loss(model, seq, t, draws, rng.next_u64());
    const double diff = std::abs(mc.mean - exact);
    const bool ok = mc.standard_error > 0.0 ? diff <= 3.0 * mc.standard_error : diff <= 1e-9;
    if (mc.standard_error > 0.0) worst_z = std::max(worst_z, diff / mc.standard_error);
    passed += ok ? 1 : 0;
  }
  std::ostringstream d;
  d << passed << "/" << triples << " triples within 3 SE (" << draws
    << " draws each); worst |z| = " << worst_z;
  return {"loss oracle", passed == triples, d.str(), since(start)};
}

namespace {

struct GradStats {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double worst = 0.0;
};

template <class F>
GradStats finite_difference(ModelParams<double> params, const ModelParams<double>& grads, F f,
                            std::size_t count, Rng& rng, double tolerance) {
  constexpr double h = 1e-3;
  constexpr double floor = 1e-6;
  GradStats st;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t ti = rng.below(params.tensors.size());
    const std::size_t ei = rng.below(params.tensors[ti].data.size());
    double& p = params.tensors[ti].data[ei];
    const double saved = p;
    p = saved + h;
    const double up = f(params);
    p = saved - h;
    const double down = f(params);
    p = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = grads.tensors[ti].data[ei];
    const double rel =
        std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    st.worst = std::max(st.worst, rel);
    ++st.checked;
    if (rel > tolerance) ++st.failed;
  }
  return st;
}

}  // namespace

CheckResult check_gradients(std::uint64_t seed, std::size_t params_per_objective,
                            double tolerance) {
  const auto start = Clock::now();
  Rng rng(seed);
  const std::size_t vocab = 9;
  const std::size_t n = 7;
  ModelConfig cfg = tiny_config(vocab, 8, AttentionMode::annealed);
  cfg.anneal_ratio = 0.5;
  const ModelParams<double> model =
      convert_params<double>(random_tiny_model(cfg, rng.next_u64(), 0.3));

  const NoiseSchedule sched;
  CorruptedBatch batch;
  std::vector<TokenSeq> clean;
  for (std::size_t b = 0; b < 2; ++b) {
    clean.push_back(random_sequence(rng, n, vocab));
    std::vector<bool> pattern(n, false);
    for (std::size_t i = 1; i < n; ++i) pattern[i] = rng.bernoulli(0.5);
    pattern[1 + b] = true;
    batch.push_back(corrupt_with_pattern(clean.back(), pattern, rng.uniform(0.2, 1.0)));
  }
  const AttentionMask mask = build_attention_mask(n, {0.5, rng.next_u64(), WidthDraw::uniform});
  DiffusionLossOptions opts;

  const LossAndGrad<double> dg = loss_and_grad_diffusion(model, batch, mask, opts);
  const GradStats sd = finite_difference(
      model, dg.grads,
      [&](const ModelParams<double>& p) { return diffusion_objective(p, batch, mask, opts); },
      params_per_objective, rng, tolerance);

  ModelParams<double> causal_model = model;
  causal_model.config.mode = AttentionMode::causal;
  const LossAndGrad<double> ag = loss_and_grad_ar(causal_model, clean);
  const GradStats sa = finite_difference(
      causal_model, ag.grads, [&](const ModelParams<double>& p) { return ar_objective(p, clean); },
      params_per_objective, rng, tolerance);

  std::ostringstream d;
  d << "diffusion " << sd.checked - sd.failed << "/" << sd.checked << " (worst rel " << sd.worst
    << "), ar " << sa.checked - sa.failed << "/" << sa.checked << " (worst rel " << sa.worst
    << ")";
  return {"gradient check", sd.failed == 0 && sa.failed == 0, d.str(), since(start)};
}

CheckResult check_ar_equivalence(std::uint64_t seed, std::size_t sequences) {
  const auto start = Clock::now();
  Rng rng(seed);
  const std::size_t vocab = 12;
  const ModelParams<float> model =
      random_tiny_model(tiny_config(vocab, 16, AttentionMode::causal), rng.next_u64());
  double worst = 0.0;
  for (std::size_t i = 0; i < sequences; ++i) {
    const TokenSeq seq = random_sequence(rng, 2 + rng.below(15), vocab);
    const auto [sequential, ar] = ar_equivalence_check(model, seq);
    worst = std::max(worst, std::abs(sequential - ar));
  }
  std::ostringstream d;
  d << sequences << " sequences; max |sequential - ar| = " << worst;
  return {"ar equivalence", worst <= 1e-6, d.str(), since(start)};
}

CheckResult check_sampler_contracts(std::uint64_t seed, std::size_t generations) {
  const auto start = Clock::now();
  Rng rng(seed);
  const std::size_t vocab = 10;
  const ModelParams<float> model =
      random_tiny_model(tiny_config(vocab, 16, AttentionMode::full), rng.next_u64(), 0.3);

  std::size_t leftover_mask = 0, non_monotone = 0, broken_constraint = 0, nondeterministic = 0,
              bad_count = 0;
  for (std::size_t g = 0; g < generations; ++g) {
    SamplerConfig cfg;
    cfg.length = 4 + rng.below(13);
    cfg.steps = 1 + rng.below(20);
    cfg.strategy = g % 2 == 0 ? SamplingStrategy::posterior : SamplingStrategy::confidence;
    if (rng.bernoulli(0.3)) cfg.top_k = 1 + rng.below(vocab);
    if (rng.bernoulli(0.3)) cfg.top_p = rng.uniform(0.2, 1.0);
    cfg.temperature = rng.uniform(0.5, 1.5);
    cfg.seed = rng.next_u64();

    GenerationConstraint c;
    if (g % 4 >= 2) {
      for (std::size_t p = 1; p < cfg.length; ++p) {
        if (rng.bernoulli(0.4)) {
          c.fixed_positions.emplace_back(
              p, kFirstContentId + static_cast<TokenId>(rng.below(vocab - kFirstContentId)));
        }
      }
    }
    const Generation a = generate(model, cfg, c);
    const Generation b = generate(model, cfg, c);
    if (a.tokens != b.tokens || a.trace.snapshots != b.trace.snapshots) ++nondeterministic;
    if (std::find(a.tokens.begin(), a.tokens.end(), kMaskId) != a.tokens.end()) ++leftover_mask;

    const auto& snaps = a.trace.snapshots;
    for (std::size_t i = 0; i + 1 < snaps.size(); ++i) {
      for (std::size_t p = 0; p < cfg.length; ++p) {
        if (snaps[i][p] != kMaskId && snaps[i + 1][p] != snaps[i][p]) {
          ++non_monotone;
          break;
        }
      }
    }
    for (const auto& [p, id] : c.fixed_positions) {
      if (a.tokens[p - 1] != id) ++broken_constraint;
      for (const auto& s : snaps) {
        if (s[p] != id) {
          ++broken_constraint;
          break;
        }
      }
    }
    std::size_t revealed = 0;
    for (const auto& st : a.trace.steps) revealed += st.newly_unmasked.size();
    const auto initial =
        static_cast<std::size_t>(std::count(snaps.front().begin(), snaps.front().end(), kMaskId));
    if (revealed != initial) ++bad_count;
  }
  std::ostringstream d;
  d << generations << " generations; leftover MASK " << leftover_mask << ", non-monotone steps "
    << non_monotone << ", constraint violations " << broken_constraint << ", seed mismatches "
    << nondeterministic << ", unmask-count mismatches " << bad_count;
  const bool ok = leftover_mask + non_monotone + broken_constraint + nondeterministic + bad_count == 0;
  return {"sampler contracts", ok, d.str(), since(start)};
}

CheckResult check_kernels(std::uint64_t seed) {
  const auto start = Clock::now();
  const kernels::KernelTable* simd = kernels::avx2_table();
  if (!simd) return {"kernel equivalence", true, "no SIMD variant on this CPU", since(start)};
  const kernels::KernelTable& ref = kernels::reference_table();
  Rng rng(seed);
  double worst_gemm = 0.0, worst_dot = 0.0, worst_axpy = 0.0, worst_gelu = 0.0;
  bool adamw_exact = true;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = 1 + rng.below(37), n = 1 + rng.below(41), k = 1 + rng.below(33);
    const auto ta = rng.bernoulli(0.5) ? kernels::Trans::yes : kernels::Trans::no;
    const auto tb = rng.bernoulli(0.5) ? kernels::Trans::yes : kernels::Trans::no;
    std::vector<float> a(m * k), b(k * n), c0(m * n);
    for (float& v : a) v = static_cast<float>(rng.normal());
    for (float& v : b) v = static_cast<float>(rng.normal());
    for (float& v : c0) v = static_cast<float>(rng.normal());
    const std::size_t lda = ta == kernels::Trans::no ? k : m;
    const std::size_t ldb = tb == kernels::Trans::no ? n : k;
    const float beta = trial % 3 == 0 ? 0.0f : 0.5f;
    std::vector<float> cr = c0, cs = c0;
    ref.sgemm(ta, tb, m, n, k, 1.25f, a.data(), lda, b.data(), ldb, beta, cr.data(), n);
    simd->sgemm(ta, tb, m, n, k, 1.25f, a.data(), lda, b.data(), ldb, beta, cs.data(), n);
    for (std::size_t i = 0; i < cr.size(); ++i) {
      worst_gemm = std::max(worst_gemm, static_cast<double>(std::abs(cr[i] - cs[i])) /
                                            (1.0 + std::abs(cr[i])));
    }
    const std::size_t len = 1 + rng.below(200);
    std::vector<float> x(len), y(len);
    for (float& v : x) v = static_cast<float>(rng.normal());
    for (float& v : y) v = static_cast<float>(rng.normal());
    const float dr = ref.sdot(x.data(), y.data(), len);
    const float ds = simd->sdot(x.data(), y.data(), len);
    worst_dot = std::max(worst_dot, static_cast<double>(std::abs(dr - ds)) / (1.0 + std::abs(dr)));
    std::vector<float> yr = y, ys = y;
    ref.saxpy(len, 0.75f, x.data(), yr.data());
    simd->saxpy(len, 0.75f, x.data(), ys.data());
    for (std::size_t i = 0; i < len; ++i) {
      worst_axpy = std::max(worst_axpy, static_cast<double>(std::abs(yr[i] - ys[i])) /
                                            (1.0 + std::abs(yr[i])));
    }

    kernels::AdamWStep step{1e-3f, 0.9f, 0.999f, 1e-8f, 0.01f, 0.1f, 0.001f};
    std::vector<float> pr = x, ps = x, mr(len, 0.1f), ms = mr, vr(len, 0.2f), vs = vr;
    ref.adamw(len, step, pr.data(), y.data(), mr.data(), vr.data());
    simd->adamw(len, step, ps.data(), y.data(), ms.data(), vs.data());
    adamw_exact = adamw_exact && std::memcmp(pr.data(), ps.data(), len * sizeof(float)) == 0 &&
                  std::memcmp(mr.data(), ms.data(), len * sizeof(float)) == 0 &&
                  std::memcmp(vr.data(), vs.data(), len * sizeof(float)) == 0;

    for (float& v : x) v = static_cast<float>(4.0 * rng.normal());
    std::vector<float> gr(len), gs(len);
    ref.gelu(len, x.data(), gr.data());
    simd->gelu(len, x.data(), gs.data());
    for (std::size_t i = 0; i < len; ++i) {
      worst_gelu = std::max(worst_gelu, static_cast<double>(std::abs(gr[i] - gs[i])) /
                                            (1.0 + std::abs(gr[i])));
    }
    ref.gelu_backward(len, x.data(), y.data(), gr.data());
    simd->gelu_backward(len, x.data(), y.data(), gs.data());
    for (std::size_t i = 0; i < len; ++i) {
      worst_gelu = std::max(worst_gelu, static_cast<double>(std::abs(gr[i] - gs[i])) /
                                            (1.0 + std::abs(gr[i])));
    }
  }
  std::ostringstream d;
  d << simd->name << " vs reference: gemm max rel " << worst_gemm << ", dot max rel " << worst_dot
    << ", axpy max rel " << worst_axpy << ", adamw "
    << (adamw_exact ? "bitwise equal" : "differs") << ", gelu max rel " << worst_gelu;
  const bool ok =
      worst_gemm <= 1e-5 && worst_dot <= 1e-5 && worst_axpy <= 1e-5 && worst_gelu <= 1e-5 &&
      adamw_exact;
  return {"kernel equivalence", ok, d.str(), since(start)};
}

std::vector<CheckResult> run_verify_suite(std::uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(check_process_identities(derive_seed(seed, 1)));
  out.push_back(check_loss_oracle(derive_seed(seed, 2)));
  out.push_back(check_gradients(derive_seed(seed, 3)));
  out.push_back(check_ar_equivalence(derive_seed(seed, 4)));
  out.push_back(check_sampler_contracts(derive_seed(seed, 6)));
  out.push_back(check_kernels(derive_seed(seed, 9)));
  return out;
}

}  // namespace dlm
