// SPDX-License-Identifier: Apache-2.0
//
// Scalar reference kernels. Straight loops, no intrinsics; these define the
// semantics the SIMD variants are tested against.

#include <cmath>
#include <vector>

#include "dlm/kernels.hpp"

namespace dlm::kernels::ref {
namespace {

template <class Real>
void gemm_impl(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, Real alpha,
               const Real* a, std::size_t lda, const Real* b, std::size_t ldb, Real beta, Real* c,
               std::size_t ldc) {
  std::vector<Real> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), Real(0));
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = ta == Trans::no ? a[i * lda + p] : a[p * lda + i];
      if (tb == Trans::no) {
        const Real* brow = b + p * ldb;
        for (std::size_t j = 0; j < n; ++j) acc[j] += aip * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) acc[j] += aip * b[j * ldb + p];
      }
    }
    Real* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      crow[j] = beta == Real(0) ? alpha * acc[j] : alpha * acc[j] + beta * crow[j];
    }
  }
}

}  // namespace

void sgemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
           const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
           std::size_t ldc) {
  gemm_impl(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void dgemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
           const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
           double* c, std::size_t ldc) {
  gemm_impl(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

float sdot(const float* x, const float* y, std::size_t n) {
  float s = 0.0f;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

double ddot(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

void saxpy(std::size_t n, float alpha, const float* x, float* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void daxpy(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void adamw(std::size_t n, const AdamWStep& s, float* param, const float* grad, float* m,
           float* v) {
  for (std::size_t i = 0; i < n; ++i) {
    const float g = grad[i];
    m[i] = s.beta1 * m[i] + (1.0f - s.beta1) * g;
    v[i] = s.beta2 * v[i] + (1.0f - s.beta2) * g * g;
    const float mhat = m[i] / s.bias_correction1;
    const float vhat = v[i] / s.bias_correction2;
    param[i] -= s.lr * (mhat / (std::sqrt(vhat) + s.eps) + s.weight_decay * param[i]);
  }
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <class Real>
void gelu_impl(std::size_t n, const Real* x, Real* y) {
  for (std::size_t i = 0; i < n; ++i) {
    const Real v = x[i];
    const Real u = static_cast<Real>(kGeluC) * (v + static_cast<Real>(kGeluA) * v * v * v);
    y[i] = Real(0.5) * v * (Real(1) + std::tanh(u));
  }
}

template <class Real>
void gelu_backward_impl(std::size_t n, const Real* x, const Real* dy, Real* dx) {
  for (std::size_t i = 0; i < n; ++i) {
    const Real v = x[i];
    const Real u = static_cast<Real>(kGeluC) * (v + static_cast<Real>(kGeluA) * v * v * v);
    const Real th = std::tanh(u);
    const Real du =
        static_cast<Real>(kGeluC) * (Real(1) + Real(3) * static_cast<Real>(kGeluA) * v * v);
    dx[i] = dy[i] * (Real(0.5) * (Real(1) + th) + Real(0.5) * v * (Real(1) - th * th) * du);
  }
}

}  // namespace

void sgelu(std::size_t n, const float* x, float* y) { gelu_impl(n, x, y); }
void dgelu(std::size_t n, const double* x, double* y) { gelu_impl(n, x, y); }
void sgelu_backward(std::size_t n, const float* x, const float* dy, float* dx) {
  gelu_backward_impl(n, x, dy, dx);
}
void dgelu_backward(std::size_t n, const double* x, const double* dy, double* dx) {
  gelu_backward_impl(n, x, dy, dx);
}

}  // namespace dlm::kernels::ref
