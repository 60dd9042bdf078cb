// Absorbing-process distributions, corruption and the weighted masked loss.

#include <cmath>
#include <limits>
#include <numbers>

#include "dlm/diffusion_core.hpp"
#include "dlm/errors.hpp"
#include "doctest.h"

using namespace dlm;

namespace {

const NoiseSchedule kLinear{};

// q(x_t = target | x_s = from) built only from forward_transition.
double transition_prob(TokenId from, TokenId target, double s, double t) {
  if (s == t) return from == target ? 1.0 : 0.0;
  return forward_transition(kLinear, from, s, t).prob(target);
}

double marginal_prob(TokenId x0, TokenId target, double t) {
  return forward_marginal(kLinear, x0, t).prob(target);
}

}  // namespace

TEST_CASE("linear schedule values") {
  CHECK(kLinear.alpha(0.0) == 1.0);
  CHECK(kLinear.alpha(1.0) == 0.0);
  CHECK(kLinear.alpha(0.3) == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(kLinear.loss_weight(1.0) == 1.0);
  CHECK(kLinear.loss_weight(0.25) == 4.0);
  CHECK(kLinear.loss_weight(0.5) == 2.0);
  CHECK_THROWS_AS(kLinear.alpha(-0.1), DomainError);
  CHECK_THROWS_AS(kLinear.alpha(1.5), DomainError);
  CHECK_THROWS_AS(kLinear.loss_weight(1e-4), DomainError);
  CHECK_THROWS_AS(kLinear.loss_weight(1.01), DomainError);
}

TEST_CASE("loss weight is -alpha'/(1-alpha)") {
  for (double t = 0.01; t <= 1.0; t += 0.07) {
    CHECK(kLinear.loss_weight(t) ==
          doctest::Approx(-kLinear.alpha_derivative(t) / (1.0 - kLinear.alpha(t))).epsilon(1e-14));
  }
}

TEST_CASE("forward marginal") {
  auto a = forward_marginal(kLinear, 5, 0.0);
  CHECK(a.token == 5);
  CHECK(a.stay_prob == 1.0);
  CHECK(a.mask_prob == 0.0);
  auto b = forward_marginal(kLinear, 5, 1.0);
  CHECK(b.stay_prob == 0.0);
  CHECK(b.mask_prob == 1.0);
  auto c = forward_marginal(kLinear, 5, 0.3);
  CHECK(c.stay_prob == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(c.mask_prob == doctest::Approx(0.3).epsilon(1e-15));
  CHECK_THROWS_AS(forward_marginal(kLinear, kMaskId, 0.5), InvalidInput);
}

TEST_CASE("forward transition") {
  auto m = forward_transition(kLinear, kMaskId, 0.2, 0.6);
  CHECK(m.mask_prob == 1.0);
  CHECK(m.prob(kMaskId) == 1.0);
  auto x = forward_transition(kLinear, 7, 0.5, 0.75);
  CHECK(x.stay_prob == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(x.mask_prob == doctest::Approx(0.5).epsilon(1e-15));
  auto near = forward_transition(kLinear, 7, 0.4, 0.4 + 1e-12);
  CHECK(near.stay_prob == doctest::Approx(1.0).epsilon(1e-10));
  CHECK_THROWS_AS(forward_transition(kLinear, 7, 0.6, 0.6), DomainError);
  CHECK_THROWS_AS(forward_transition(kLinear, 7, 0.7, 0.6), DomainError);
  CHECK_THROWS_AS(forward_transition(kLinear, 7, 1.0, 1.0), DomainError);
}

TEST_CASE("backward posterior") {
  auto a = backward_posterior(kLinear, 9, 9, 0.2, 0.8);
  CHECK(a.token == 9);
  CHECK(a.stay_prob == 1.0);
  CHECK(a.mask_prob == 0.0);
  auto b = backward_posterior(kLinear, kMaskId, 9, 0.0, 0.8);
  CHECK(b.stay_prob == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(b.mask_prob == doctest::Approx(0.0));
  auto c = backward_posterior(kLinear, kMaskId, 9, 0.5, 1.0);
  CHECK(c.stay_prob == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(c.mask_prob == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(backward_posterior(kLinear, kMaskId, 9, 0.0, 0.0), DomainError);
}

TEST_CASE("process identities over random draws") {
  Rng rng(101);
  for (int i = 0; i < 1000; ++i) {
    const TokenId x0 = static_cast<TokenId>(kFirstContentId + rng.below(20));
    double s = rng.uniform(), t = rng.uniform();
    if (s > t) std::swap(s, t);
    if (t - s < 1e-9 || t == 0.0) continue;
    const TokenId support[2] = {x0, kMaskId};

    // Chapman-Kolmogorov: sum_xs q(xt|xs) q(xs|x0) = q(xt|x0).
    for (TokenId xt : support) {
      double total = 0.0;
      for (TokenId xs : support) total += transition_prob(xs, xt, s, t) * marginal_prob(x0, xs, s);
      CHECK(std::abs(total - marginal_prob(x0, xt, t)) <= 1e-12);
    }

    // Bayes: q(xs|xt,x0) = q(xt|xs) q(xs|x0) / q(xt|x0).
    for (TokenId xt : support) {
      const double evidence = marginal_prob(x0, xt, t);
      if (evidence == 0.0) continue;
      const Categorical2 post = backward_posterior(kLinear, xt, x0, s, t);
      CHECK(std::abs(post.total() - 1.0) <= 1e-12);
      for (TokenId xs : support) {
        const double want = transition_prob(xs, xt, s, t) * marginal_prob(x0, xs, s) / evidence;
        CHECK(std::abs(post.prob(xs) - want) <= 1e-12);
      }
    }

    CHECK(std::abs(forward_marginal(kLinear, x0, t).total() - 1.0) <= 1e-12);
    CHECK(std::abs(forward_transition(kLinear, x0, s, t).total() - 1.0) <= 1e-12);
  }
}

TEST_CASE("kl step term") {
  CHECK(kl_step_term(kLinear, 5, 5, 0.3, 0.2, 0.6).nats == 0.0);
  CHECK(kl_step_term(kLinear, 5, kMaskId, 1.0, 0.2, 0.6).nats == 0.0);
  CHECK(kl_step_term(kLinear, 5, kMaskId, 0.5, 0.0, 1.0).nats ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  CHECK(kl_step_term(kLinear, 5, kMaskId, 0.0, 0.2, 0.6).infinite);

  // Direct KL between q(x_s|x_t,x_0) and p(x_s|x_t), where the model keeps
  // the MASK mass of the posterior and spreads the rest by its prediction.
  const double s = 0.3, t = 0.7, p = 0.4;
  const Categorical2 q = backward_posterior(kLinear, kMaskId, 5, s, t);
  const double p_x0 = q.stay_prob * p;
  const double direct = q.stay_prob * std::log(q.stay_prob / p_x0) +
                        q.mask_prob * std::log(q.mask_prob / q.mask_prob);
  CHECK(kl_step_term(kLinear, 5, kMaskId, p, s, t).nats == doctest::Approx(direct).epsilon(1e-13));
}

TEST_CASE("corrupt_sequence") {
  Rng rng(7);
  TokenSeq x0(50, 4);
  x0[0] = kBosId;
  SUBCASE("t = 1 masks everything after the kept prefix") {
    auto item = corrupt_sequence(kLinear, x0, 1.0, rng, 1);
    CHECK(item.noisy[0] == kBosId);
    CHECK_FALSE(item.mask_indicator[0]);
    CHECK(item.masked_count() == 49);
    validate(item);
  }
  SUBCASE("masked fraction concentrates at t") {
    TokenSeq big(10000, 3);
    auto item = corrupt_sequence(kLinear, big, 0.3, rng);
    const double frac = static_cast<double>(item.masked_count()) / 10000.0;
    CHECK(std::abs(frac - 0.3) <= 3.0 * std::sqrt(0.3 * 0.7 / 10000.0));
  }
  SUBCASE("t = eps masks about eps of the positions") {
    TokenSeq big(200000, 3);
    auto item = corrupt_sequence(kLinear, big, kLinear.eps, rng);
    const double frac = static_cast<double>(item.masked_count()) / 200000.0;
    CHECK(std::abs(frac - kLinear.eps) <= 3.0 * std::sqrt(kLinear.eps / 200000.0));
  }
  SUBCASE("deterministic given the generator state") {
    Rng a(99), b(99);
    CHECK(corrupt_sequence(kLinear, x0, 0.5, a).noisy == corrupt_sequence(kLinear, x0, 0.5, b).noisy);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(corrupt_sequence(kLinear, {}, 0.5, rng), InvalidInput);
    CHECK_THROWS_AS(corrupt_sequence(kLinear, {3, kMaskId}, 0.5, rng), InvalidInput);
    CHECK_THROWS_AS(corrupt_sequence(kLinear, x0, 0.0, rng), DomainError);
  }
}

TEST_CASE("validate rejects inconsistent items") {
  auto item = corrupt_with_pattern({0, 3, 4}, {false, true, false}, 0.5);
  validate(item);
  auto bad = item;
  bad.noisy[2] = 5;
  CHECK_THROWS_AS(validate(bad), InvalidInput);
  bad = item;
  bad.mask_indicator[2] = true;
  CHECK_THROWS_AS(validate(bad), InvalidInput);
  CHECK_THROWS_AS(corrupt_with_pattern({0, 3}, {true}, 0.5), DimensionError);
}

TEST_CASE("diffusion loss closed forms") {
  const std::size_t K = 4;
  SUBCASE("nothing masked gives exactly zero") {
    Matrix<double> logits(4, K, 0.3);
    auto item = corrupt_with_pattern({0, 3, 3, 3}, {false, false, false, false}, 0.5);
    CHECK(diffusion_loss(logits, item, kLinear) == 0.0);
  }
  SUBCASE("all masked at t = 1 with uniform logits") {
    Matrix<float> logits(4, K, 0.0f);
    for (std::size_t j = 0; j < K; ++j) logits(0, j) = std::numeric_limits<float>::quiet_NaN();
    auto item = corrupt_with_pattern({0, 3, 2, 3}, {false, true, true, true}, 1.0);
    CHECK(diffusion_loss(logits, item, kLinear) == doctest::Approx(3.0 * std::log(4.0)).epsilon(1e-12));
    CHECK(diffusion_loss(logits, item, kLinear) == doctest::Approx(4.1589).epsilon(1e-4));
  }
  SUBCASE("single masked position") {
    // Logits (ln 3, 0, 0, 0) put probability 1/2 on id 0.
    Matrix<double> logits(3, K, 0.0);
    logits(2, 0) = std::log(3.0);
    auto item = corrupt_with_pattern({0, 3, 0}, {false, false, true}, 0.25);
    CHECK(diffusion_loss(logits, item, kLinear) == doctest::Approx(4.0 * std::numbers::ln2).epsilon(1e-14));
  }
  SUBCASE("unmasked rows never contribute") {
    Matrix<double> logits(3, K, 0.0);
    auto item = corrupt_with_pattern({0, 3, 3}, {false, true, false}, 0.5);
    const double base = diffusion_loss(logits, item, kLinear);
    logits(2, 1) = 50.0;
    logits(0, 3) = -20.0;
    CHECK(diffusion_loss(logits, item, kLinear) == base);
  }
  SUBCASE("shape mismatch") {
    Matrix<double> logits(2, K, 0.0);
    auto item = corrupt_with_pattern({0, 3, 4}, {false, true, false}, 0.5);
    CHECK_THROWS_AS(diffusion_loss(logits, item, kLinear), DimensionError);
  }
}

TEST_CASE("diffusion loss backward matches finite differences") {
  Rng rng(5);
  const std::size_t n = 5, K = 6;
  Matrix<double> logits(n, K);
  for (double& v : logits.data) v = rng.normal();
  auto item = corrupt_with_pattern({0, 3, 4, 5, 3}, {false, true, false, true, true}, 0.4);
  Matrix<double> grad(n, K, 0.0);
  diffusion_loss_backward(logits, item, kLinear, 0.5, grad);
  for (std::size_t i = 0; i < logits.data.size(); ++i) {
    const double h = 1e-6, keep = logits.data[i];
    logits.data[i] = keep + h;
    const double up = diffusion_loss(logits, item, kLinear);
    logits.data[i] = keep - h;
    const double down = diffusion_loss(logits, item, kLinear);
    logits.data[i] = keep;
    CHECK(grad.data[i] == doctest::Approx(0.5 * (up - down) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("Monte-Carlo loss with input-independent logits is unbiased") {
  // With logits that ignore the noisy input, E[(1/t) sum_masked CE] equals
  // sum_n CE_n exactly because each position is masked with probability t.
  Rng rng(17);
  const std::size_t n = 8, K = 5;
  Matrix<double> logits(n, K);
  for (double& v : logits.data) v = rng.normal();
  TokenSeq x0{0, 3, 4, 3, 2, 4, 4, 3};
  double exact = 0.0;
  for (std::size_t i = 1; i < n; ++i) exact += cross_entropy(logits.row(i), K, x0[i]);
  for (double t : {0.05, 0.3, 0.9}) {
    const int draws = 10000;
    double sum = 0.0, sq = 0.0;
    for (int d = 0; d < draws; ++d) {
      const double l = diffusion_loss(logits, corrupt_sequence(kLinear, x0, t, rng, 1), kLinear);
      sum += l;
      sq += l * l;
    }
    const double mean = sum / draws;
    const double se = std::sqrt((sq / draws - mean * mean) / (draws - 1));
    CHECK(std::abs(mean - exact) <= 3.0 * se);
  }
}
