// SPDX-License-Identifier: Apache-2.0

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "dlm/kernels.hpp"

namespace dlm::kernels {

#if defined(DLM_HAVE_AVX2)
namespace avx2 {
void sgemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
           const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
           std::size_t ldc);
float sdot(const float* x, const float* y, std::size_t n);
void saxpy(std::size_t n, float alpha, const float* x, float* y);
void adamw(std::size_t n, const AdamWStep& step, float* param, const float* grad, float* m,
           float* v);
void gelu(std::size_t n, const float* x, float* y);
void gelu_backward(std::size_t n, const float* x, const float* dy, float* dx);
}  // namespace avx2
#endif

namespace {

const KernelTable kReference{Isa::reference, "reference", &ref::sgemm, &ref::sdot, &ref::saxpy,
                             &ref::adamw,        &ref::sgelu, &ref::sgelu_backward};

#if defined(DLM_HAVE_AVX2)
const KernelTable kAvx2{Isa::avx2, "avx2", &avx2::sgemm, &avx2::sdot, &avx2::saxpy,
                        &avx2::adamw,        &avx2::gelu, &avx2::gelu_backward};
#endif

const KernelTable* initial_table() {
  const char* env = std::getenv("DLM_KERNELS");
  const std::string choice = env ? env : "auto";
  if (choice == "reference") return &kReference;
  const KernelTable* best = avx2_table();
  if (choice == "avx2" && best == nullptr) {
    throw std::runtime_error("DLM_KERNELS=avx2 requested but AVX2/FMA is unavailable");
  }
  return best ? best : &kReference;
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{initial_table()};
  return slot;
}

}  // namespace

bool cpu_supports_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable& reference_table() { return kReference; }

const KernelTable* avx2_table() {
#if defined(DLM_HAVE_AVX2)
  return cpu_supports_avx2() ? &kAvx2 : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() { return *active_slot().load(std::memory_order_acquire); }

void select(Isa isa) {
  const KernelTable* table = isa == Isa::reference ? &kReference : avx2_table();
  if (table == nullptr) throw std::runtime_error("requested kernel variant is unavailable");
  active_slot().store(table, std::memory_order_release);
}

void select(std::string_view name) {
  if (name == "reference") {
    select(Isa::reference);
  } else if (name == "avx2") {
    select(Isa::avx2);
  } else if (name == "auto") {
    const KernelTable* best = avx2_table();
    active_slot().store(best ? best : &kReference, std::memory_order_release);
  } else {
    throw std::runtime_error("unknown kernel variant: " + std::string(name));
  }
}

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
          std::size_t ldc) {
  active().sgemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc) {
  ref::dgemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

float dot(const float* x, const float* y, std::size_t n) { return active().sdot(x, y, n); }
double dot(const double* x, const double* y, std::size_t n) { return ref::ddot(x, y, n); }

void axpy(std::size_t n, float alpha, const float* x, float* y) { active().saxpy(n, alpha, x, y); }
void axpy(std::size_t n, double alpha, const double* x, double* y) { ref::daxpy(n, alpha, x, y); }

void adamw(std::size_t n, const AdamWStep& step, float* param, const float* grad, float* m,
           float* v) {
  active().adamw(n, step, param, grad, m, v);
}

void gelu(std::size_t n, const float* x, float* y) { active().gelu(n, x, y); }
void gelu(std::size_t n, const double* x, double* y) { ref::dgelu(n, x, y); }
void gelu_backward(std::size_t n, const float* x, const float* dy, float* dx) {
  active().gelu_backward(n, x, dy, dx);
}
void gelu_backward(std::size_t n, const double* x, const double* dy, double* dx) {
  ref::dgelu_backward(n, x, dy, dx);
}

}  // namespace dlm::kernels
