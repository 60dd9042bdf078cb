// Reference kernels against naive double-precision loops, and every SIMD
// variant against the reference kernels.

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "dlm/kernels.hpp"
#include "dlm/rng.hpp"
#include "doctest.h"

using namespace dlm;
using kernels::Trans;

namespace {

std::vector<float> random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(scale * rng.normal());
  return v;
}

// C = alpha op(A) op(B) + beta C in double.
std::vector<double> naive_gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
                               double alpha, const std::vector<float>& a, std::size_t lda,
                               const std::vector<float>& b, std::size_t ldb, double beta,
                               const std::vector<float>& c) {
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
        const double bv = tb == Trans::no ? b[p * ldb + j] : b[j * ldb + p];
        s += av * bv;
      }
      out[i * n + j] = alpha * s + (beta == 0.0 ? 0.0 : beta * c[i * n + j]);
    }
  }
  return out;
}

double gelu_exact(double x) {
  const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad_exact(double x) {
  const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = 0.7978845608028654 * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

struct GemmCase {
  std::size_t m, n, k;
  Trans ta, tb;
  float alpha, beta;
};

std::vector<GemmCase> gemm_cases(Rng& rng) {
  std::vector<GemmCase> cases;
  const std::size_t dims[] = {1, 2, 5, 6, 7, 15, 16, 17, 31, 33, 64, 97};
  for (int i = 0; i < 60; ++i) {
    GemmCase c;
    c.m = dims[rng.below(std::size(dims))];
    c.n = dims[rng.below(std::size(dims))];
    c.k = dims[rng.below(std::size(dims))];
    c.ta = rng.bernoulli(0.5) ? Trans::yes : Trans::no;
    c.tb = rng.bernoulli(0.5) ? Trans::yes : Trans::no;
    c.alpha = i % 4 == 0 ? 1.0f : static_cast<float>(rng.uniform(-2.0, 2.0));
    c.beta = i % 3 == 0 ? 0.0f : (i % 3 == 1 ? 1.0f : 0.5f);
    cases.push_back(c);
  }
  return cases;
}

}  // namespace

TEST_CASE("reference gemm matches a naive double loop") {
  Rng rng(11);
  for (const GemmCase& g : gemm_cases(rng)) {
    const std::size_t lda = g.ta == Trans::no ? g.k : g.m;
    const std::size_t ldb = g.tb == Trans::no ? g.n : g.k;
    auto a = random_vec(rng, g.m * g.k);
    auto b = random_vec(rng, g.k * g.n);
    auto c = random_vec(rng, g.m * g.n);
    const auto want = naive_gemm(g.ta, g.tb, g.m, g.n, g.k, g.alpha, a, lda, b, ldb, g.beta, c);
    std::vector<float> got = c;
    kernels::ref::sgemm(g.ta, g.tb, g.m, g.n, g.k, g.alpha, a.data(), lda, b.data(), ldb, g.beta,
                        got.data(), g.n);
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(std::abs(got[i] - want[i]) <= 1e-4 * (1.0 + std::abs(want[i])));
    }
  }
}

TEST_CASE("gemm with beta 0 ignores NaN in C") {
  std::vector<float> a{1, 2}, b{3, 4}, c(1, std::nanf(""));
  kernels::ref::sgemm(Trans::no, Trans::no, 1, 1, 2, 1.0f, a.data(), 2, b.data(), 1, 0.0f,
                      c.data(), 1);
  CHECK(c[0] == 11.0f);
  if (const auto* simd = kernels::avx2_table()) {
    std::vector<float> d(1, std::nanf(""));
    simd->sgemm(Trans::no, Trans::no, 1, 1, 2, 1.0f, a.data(), 2, b.data(), 1, 0.0f, d.data(), 1);
    CHECK(d[0] == 11.0f);
  }
}

TEST_CASE("gemm with k = 0 only scales C") {
  std::vector<float> c{1, 2, 3, 4};
  kernels::ref::sgemm(Trans::no, Trans::no, 2, 2, 0, 1.0f, nullptr, 1, nullptr, 2, 0.5f,
                      c.data(), 2);
  CHECK(c == std::vector<float>{0.5f, 1.0f, 1.5f, 2.0f});
}

TEST_CASE("double gemm matches the naive loop tightly") {
  Rng rng(12);
  const std::size_t m = 7, n = 5, k = 9;
  auto af = random_vec(rng, m * k), bf = random_vec(rng, k * n), cf = random_vec(rng, m * n);
  std::vector<double> a(af.begin(), af.end()), b(bf.begin(), bf.end()), c(cf.begin(), cf.end());
  const auto want = naive_gemm(Trans::no, Trans::yes, m, n, k, 1.5, af, k, bf, k, 0.25, cf);
  kernels::gemm(Trans::no, Trans::yes, m, n, k, 1.5, a.data(), k, b.data(), k, 0.25, c.data(), n);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-13));
}

TEST_CASE("reference gelu matches the closed form") {
  Rng rng(13);
  auto x = random_vec(rng, 257, 3.0);
  auto dy = random_vec(rng, 257);
  std::vector<float> y(x.size()), dx(x.size());
  kernels::ref::sgelu(x.size(), x.data(), y.data());
  kernels::ref::sgelu_backward(x.size(), x.data(), dy.data(), dx.data());
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(std::abs(y[i] - gelu_exact(x[i])) <= 1e-6 * (1.0 + std::abs(x[i])));
    CHECK(std::abs(dx[i] - dy[i] * gelu_grad_exact(x[i])) <= 1e-5 * (1.0 + std::abs(dy[i])));
  }
}

TEST_CASE("double gelu backward agrees with central differences") {
  for (double x = -6.0; x <= 6.0; x += 0.37) {
    const double h = 1e-5;
    double xs[3] = {x - h, x, x + h}, ys[3], one = 1.0, g = 0.0;
    kernels::gelu(3, xs, ys);
    kernels::gelu_backward(1, &x, &one, &g);
    CHECK(g == doctest::Approx((ys[2] - ys[0]) / (2 * h)).epsilon(1e-7));
  }
}

TEST_CASE("SIMD kernels agree with the reference kernels") {
  const kernels::KernelTable* simd = kernels::avx2_table();
  if (!simd) {
    MESSAGE("no SIMD variant on this CPU; skipping");
    return;
  }
  const kernels::KernelTable& ref = kernels::reference_table();
  Rng rng(21);

  SUBCASE("gemm on odd shapes and both transposes") {
    for (const GemmCase& g : gemm_cases(rng)) {
      const std::size_t lda = g.ta == Trans::no ? g.k : g.m;
      const std::size_t ldb = g.tb == Trans::no ? g.n : g.k;
      auto a = random_vec(rng, g.m * g.k);
      auto b = random_vec(rng, g.k * g.n);
      auto c = random_vec(rng, g.m * g.n);
      std::vector<float> cr = c, cs = c;
      ref.sgemm(g.ta, g.tb, g.m, g.n, g.k, g.alpha, a.data(), lda, b.data(), ldb, g.beta,
                cr.data(), g.n);
      simd->sgemm(g.ta, g.tb, g.m, g.n, g.k, g.alpha, a.data(), lda, b.data(), ldb, g.beta,
                  cs.data(), g.n);
      for (std::size_t i = 0; i < cr.size(); ++i) {
        CHECK(std::abs(cr[i] - cs[i]) <= 1e-5 * (1.0 + std::abs(cr[i])));
      }
    }
  }

  SUBCASE("gemm writes into a strided sub-block of C") {
    const std::size_t m = 9, n = 13, k = 11, ldc = 20;
    auto a = random_vec(rng, m * k), b = random_vec(rng, k * n);
    std::vector<float> cr(m * ldc, 7.0f), cs = cr;
    ref.sgemm(Trans::no, Trans::no, m, n, k, 1.0f, a.data(), k, b.data(), n, 0.0f, cr.data(), ldc);
    simd->sgemm(Trans::no, Trans::no, m, n, k, 1.0f, a.data(), k, b.data(), n, 0.0f, cs.data(),
                ldc);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = n; j < ldc; ++j) CHECK(cs[i * ldc + j] == 7.0f);
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(std::abs(cr[i * ldc + j] - cs[i * ldc + j]) <= 1e-5 * (1.0 + std::abs(cr[i * ldc + j])));
      }
    }
  }

  SUBCASE("dot and axpy on every tail length") {
    for (std::size_t n = 0; n <= 40; ++n) {
      auto x = random_vec(rng, n), y = random_vec(rng, n);
      const float dr = ref.sdot(x.data(), y.data(), n);
      const float ds = simd->sdot(x.data(), y.data(), n);
      CHECK(std::abs(dr - ds) <= 1e-5 * (1.0 + std::abs(dr)));
      std::vector<float> yr = y, ys = y;
      ref.saxpy(n, -0.3f, x.data(), yr.data());
      simd->saxpy(n, -0.3f, x.data(), ys.data());
      for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(yr[i] - ys[i]) <= 1e-6 * (1.0 + std::abs(yr[i])));
    }
  }

  SUBCASE("adamw is bitwise identical") {
    for (std::size_t n : {1u, 7u, 8u, 9u, 31u, 1000u}) {
      auto p = random_vec(rng, n), g = random_vec(rng, n);
      auto m0 = random_vec(rng, n, 0.1);
      std::vector<float> v0(n);
      for (float& x : v0) x = static_cast<float>(rng.uniform(0.0, 0.5));
      kernels::AdamWStep s{3e-3f, 0.9f, 0.999f, 1e-8f, 0.01f, 0.271f, 0.00299f};
      std::vector<float> pr = p, ps = p, mr = m0, ms = m0, vr = v0, vs = v0;
      ref.adamw(n, s, pr.data(), g.data(), mr.data(), vr.data());
      simd->adamw(n, s, ps.data(), g.data(), ms.data(), vs.data());
      CHECK(std::memcmp(pr.data(), ps.data(), n * sizeof(float)) == 0);
      CHECK(std::memcmp(mr.data(), ms.data(), n * sizeof(float)) == 0);
      CHECK(std::memcmp(vr.data(), vs.data(), n * sizeof(float)) == 0);
    }
  }

  SUBCASE("gelu forward and backward, including saturated inputs") {
    for (std::size_t n : {1u, 7u, 8u, 9u, 100u, 1025u}) {
      auto x = random_vec(rng, n, 5.0), dy = random_vec(rng, n);
      if (n > 3) {
        x[0] = 80.0f;
        x[1] = -80.0f;
        x[2] = 0.0f;
      }
      std::vector<float> yr(n), ys(n), gr(n), gs(n);
      ref.gelu(n, x.data(), yr.data());
      simd->gelu(n, x.data(), ys.data());
      ref.gelu_backward(n, x.data(), dy.data(), gr.data());
      simd->gelu_backward(n, x.data(), dy.data(), gs.data());
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(std::isfinite(ys[i]));
        CHECK(std::isfinite(gs[i]));
        CHECK(std::abs(yr[i] - ys[i]) <= 1e-5 * (1.0 + std::abs(yr[i])));
        CHECK(std::abs(gr[i] - gs[i]) <= 1e-5 * (1.0 + std::abs(gr[i])));
      }
    }
  }
}

TEST_CASE("kernel selection") {
  const kernels::KernelTable& before = kernels::active();
  kernels::select("reference");
  CHECK(kernels::active().isa == kernels::Isa::reference);
  CHECK_THROWS_AS(kernels::select("neon"), std::runtime_error);
  if (kernels::avx2_table()) {
    kernels::select(kernels::Isa::avx2);
    CHECK(kernels::active().isa == kernels::Isa::avx2);
  } else {
    CHECK_THROWS_AS(kernels::select(kernels::Isa::avx2), std::runtime_error);
  }
  kernels::select(before.isa);
}
