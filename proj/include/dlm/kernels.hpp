// SPDX-License-Identifier: Apache-2.0
//
// Dense arithmetic kernels behind the transformer and the optimizer.
//
// Every kernel has a portable scalar reference implementation. Where the
// target supports it, an AVX2+FMA variant is compiled in a separate
// translation unit and picked at runtime after a CPU feature probe. The
// variants are interchangeable up to floating-point reassociation; the
// equivalence tests in tests/unit/test_kernels.cpp pin the tolerance.
//
// Selection order: DLM_KERNELS environment variable ("reference", "avx2",
// "auto"), then CPU detection. select() overrides both at runtime.

#pragma once

#include <cstddef>
#include <string_view>

namespace dlm::kernels {

enum class Trans : bool { no = false, yes = true };

enum class Isa { reference, avx2 };

/// Scalars for one decoupled-weight-decay Adam update.
struct AdamWStep {
  float lr = 0.0f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
  /// 1 - beta1^step and 1 - beta2^step.
  float bias_correction1 = 1.0f;
  float bias_correction2 = 1.0f;
};

struct KernelTable {
  Isa isa;
  const char* name;
  /// C = alpha * op(A) * op(B) + beta * C, row-major. beta == 0 ignores C's
  /// previous contents (NaNs included).
  void (*sgemm)(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
                const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta,
                float* c, std::size_t ldc);
  float (*sdot)(const float* x, const float* y, std::size_t n);
  /// y += alpha * x
  void (*saxpy)(std::size_t n, float alpha, const float* x, float* y);
  void (*adamw)(std::size_t n, const AdamWStep& step, float* param, const float* grad,
                float* m, float* v);
  /// Tanh-approximation GELU, y[i] = gelu(x[i]).
  void (*gelu)(std::size_t n, const float* x, float* y);
  /// dx[i] = dy[i] * gelu'(x[i]).
  void (*gelu_backward)(std::size_t n, const float* x, const float* dy, float* dx);
};

const KernelTable& reference_table();

/// nullptr when the variant was not compiled in or the CPU lacks AVX2/FMA.
const KernelTable* avx2_table();

const KernelTable& active();

/// Force a variant. Throws std::runtime_error if it is unavailable.
void select(Isa isa);

/// Parses "reference" | "avx2" | "auto"; "auto" picks the best available.
void select(std::string_view name);

bool cpu_supports_avx2();

// Typed front-ends. float routes through the active table; double always
// uses the reference path (double is only used for verification).

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
          std::size_t ldc);
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc);

float dot(const float* x, const float* y, std::size_t n);
double dot(const double* x, const double* y, std::size_t n);

void axpy(std::size_t n, float alpha, const float* x, float* y);
void axpy(std::size_t n, double alpha, const double* x, double* y);

void adamw(std::size_t n, const AdamWStep& step, float* param, const float* grad, float* m,
           float* v);

void gelu(std::size_t n, const float* x, float* y);
void gelu(std::size_t n, const double* x, double* y);
void gelu_backward(std::size_t n, const float* x, const float* dy, float* dx);
void gelu_backward(std::size_t n, const double* x, const double* dy, double* dx);

namespace ref {
void sgemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
           const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
           std::size_t ldc);
void dgemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
           const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
           double* c, std::size_t ldc);
float sdot(const float* x, const float* y, std::size_t n);
double ddot(const double* x, const double* y, std::size_t n);
void saxpy(std::size_t n, float alpha, const float* x, float* y);
void daxpy(std::size_t n, double alpha, const double* x, double* y);
void adamw(std::size_t n, const AdamWStep& step, float* param, const float* grad, float* m,
           float* v);
void sgelu(std::size_t n, const float* x, float* y);
void dgelu(std::size_t n, const double* x, double* y);
void sgelu_backward(std::size_t n, const float* x, const float* dy, float* dx);
void dgelu_backward(std::size_t n, const double* x, const double* dy, double* dx);
}  // namespace ref

}  // namespace dlm::kernels
