// SPDX-License-Identifier: Apache-2.0
//
// AVX2 + FMA kernel variants. Compiled with -mavx2 -mfma; only reached after
// kernels_dispatch.cpp has confirmed CPU support.
//
// sgemm packs op(B) into 16-column strips (zero padded) and runs a
// register-blocked 6x16 micro-kernel over rows of op(A). Sizes in this project are
// small (a few hundred per dimension), so there is no K or M cache blocking.

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "dlm/kernels.hpp"

namespace dlm::kernels::avx2 {
namespace {

constexpr std::size_t kStrip = 16;

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

void pack_b(Trans tb, std::size_t n, std::size_t k, const float* b, std::size_t ldb,
            std::vector<float>& packed) {
  const std::size_t strips = (n + kStrip - 1) / kStrip;
  packed.assign(strips * k * kStrip, 0.0f);
  for (std::size_t s = 0; s < strips; ++s) {
    float* dst = packed.data() + s * k * kStrip;
    const std::size_t j0 = s * kStrip;
    const std::size_t width = std::min(kStrip, n - j0);
    if (tb == Trans::no) {
      for (std::size_t p = 0; p < k; ++p) {
        std::memcpy(dst + p * kStrip, b + p * ldb + j0, width * sizeof(float));
      }
    } else {
      for (std::size_t jj = 0; jj < width; ++jj) {
        const float* col = b + (j0 + jj) * ldb;
        for (std::size_t p = 0; p < k; ++p) dst[p * kStrip + jj] = col[p];
      }
    }
  }
}

template <int MR>
inline void micro_kernel(std::size_t k, const float* a, std::size_t rs, std::size_t cs,
                         const float* bp, float alpha, float* c, std::size_t ldc,
                         std::size_t width) {
  __m256 acc[MR][2];
  for (int r = 0; r < MR; ++r) {
    acc[r][0] = _mm256_setzero_ps();
    acc[r][1] = _mm256_setzero_ps();
  }
  for (std::size_t p = 0; p < k; ++p) {
    const __m256 b0 = _mm256_loadu_ps(bp + p * kStrip);
    const __m256 b1 = _mm256_loadu_ps(bp + p * kStrip + 8);
    const float* ap = a + p * cs;
    for (int r = 0; r < MR; ++r) {
      const __m256 av = _mm256_broadcast_ss(ap + r * rs);
      acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
    }
  }
  const __m256 va = _mm256_set1_ps(alpha);
  for (int r = 0; r < MR; ++r) {
    float* crow = c + r * ldc;
    if (width == kStrip) {
      _mm256_storeu_ps(crow, _mm256_fmadd_ps(va, acc[r][0], _mm256_loadu_ps(crow)));
      _mm256_storeu_ps(crow + 8, _mm256_fmadd_ps(va, acc[r][1], _mm256_loadu_ps(crow + 8)));
    } else {
      alignas(32) float tmp[kStrip];
      _mm256_store_ps(tmp, _mm256_mul_ps(va, acc[r][0]));
      _mm256_store_ps(tmp + 8, _mm256_mul_ps(va, acc[r][1]));
      for (std::size_t j = 0; j < width; ++j) crow[j] += tmp[j];
    }
  }
}

}  // namespace

void sgemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
           const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
           std::size_t ldc) {
  if (m == 0 || n == 0) return;
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * ldc;
    if (beta == 0.0f) {
      std::fill(crow, crow + n, 0.0f);
    } else if (beta != 1.0f) {
      for (std::size_t j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
  if (k == 0 || alpha == 0.0f) return;

  thread_local std::vector<float> packed;
  pack_b(tb, n, k, b, ldb, packed);

  const std::size_t rs = ta == Trans::no ? lda : 1;
  const std::size_t cs = ta == Trans::no ? 1 : lda;
  const std::size_t strips = (n + kStrip - 1) / kStrip;
  for (std::size_t s = 0; s < strips; ++s) {
    const float* bp = packed.data() + s * k * kStrip;
    const std::size_t j0 = s * kStrip;
    const std::size_t width = std::min(kStrip, n - j0);
    std::size_t i = 0;
    for (; i + 6 <= m; i += 6) {
      micro_kernel<6>(k, a + i * rs, rs, cs, bp, alpha, c + i * ldc + j0, ldc, width);
    }
    const float* ai = a + i * rs;
    float* ci = c + i * ldc + j0;
    switch (m - i) {
      case 5: micro_kernel<5>(k, ai, rs, cs, bp, alpha, ci, ldc, width); break;
      case 4: micro_kernel<4>(k, ai, rs, cs, bp, alpha, ci, ldc, width); break;
      case 3: micro_kernel<3>(k, ai, rs, cs, bp, alpha, ci, ldc, width); break;
      case 2: micro_kernel<2>(k, ai, rs, cs, bp, alpha, ci, ldc, width); break;
      case 1: micro_kernel<1>(k, ai, rs, cs, bp, alpha, ci, ldc, width); break;
      default: break;
    }
  }
}

float sdot(const float* x, const float* y, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
  }
  float s = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void saxpy(std::size_t n, float alpha, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void adamw(std::size_t n, const AdamWStep& s, float* param, const float* grad, float* m,
           float* v) {
  const __m256 b1 = _mm256_set1_ps(s.beta1);
  const __m256 b2 = _mm256_set1_ps(s.beta2);
  const __m256 omb1 = _mm256_set1_ps(1.0f - s.beta1);
  const __m256 omb2 = _mm256_set1_ps(1.0f - s.beta2);
  const __m256 bc1 = _mm256_set1_ps(s.bias_correction1);
  const __m256 bc2 = _mm256_set1_ps(s.bias_correction2);
  const __m256 eps = _mm256_set1_ps(s.eps);
  const __m256 lr = _mm256_set1_ps(s.lr);
  const __m256 wd = _mm256_set1_ps(s.weight_decay);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 g = _mm256_loadu_ps(grad + i);
    __m256 mi = _mm256_add_ps(_mm256_mul_ps(b1, _mm256_loadu_ps(m + i)), _mm256_mul_ps(omb1, g));
    __m256 vi = _mm256_add_ps(_mm256_mul_ps(b2, _mm256_loadu_ps(v + i)),
                              _mm256_mul_ps(_mm256_mul_ps(omb2, g), g));
    _mm256_storeu_ps(m + i, mi);
    _mm256_storeu_ps(v + i, vi);
    const __m256 mhat = _mm256_div_ps(mi, bc1);
    const __m256 vhat = _mm256_div_ps(vi, bc2);
    const __m256 p = _mm256_loadu_ps(param + i);
    const __m256 upd = _mm256_add_ps(_mm256_div_ps(mhat, _mm256_add_ps(_mm256_sqrt_ps(vhat), eps)),
                                     _mm256_mul_ps(wd, p));
    _mm256_storeu_ps(param + i, _mm256_sub_ps(p, _mm256_mul_ps(lr, upd)));
  }
  if (i < n) ref::adamw(n - i, s, param + i, grad + i, m + i, v + i);
}

namespace {

// exp(x) by range reduction to [-ln2/2, ln2/2] and a degree-6 polynomial.
inline __m256 exp256(__m256 x) {
  x = _mm256_min_ps(_mm256_max_ps(x, _mm256_set1_ps(-87.3f)), _mm256_set1_ps(88.3f));
  const __m256 fx = _mm256_round_ps(_mm256_mul_ps(x, _mm256_set1_ps(1.44269504088896341f)),
                                    _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), x);
  __m256 y = _mm256_set1_ps(1.9875691500e-4f);
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
  y = _mm256_fmadd_ps(y, _mm256_mul_ps(x, x), _mm256_add_ps(x, _mm256_set1_ps(1.0f)));
  const __m256i pow2 = _mm256_slli_epi32(
      _mm256_add_epi32(_mm256_cvtps_epi32(fx), _mm256_set1_epi32(127)), 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(pow2));
}

// tanh(u) = 1 - 2 / (exp(2u) + 1)
inline __m256 tanh256(__m256 u) {
  const __m256 e = exp256(_mm256_add_ps(u, u));
  const __m256 one = _mm256_set1_ps(1.0f);
  return _mm256_sub_ps(one, _mm256_div_ps(_mm256_set1_ps(2.0f), _mm256_add_ps(e, one)));
}

constexpr float kGeluC = 0.7978845608028654f;
constexpr float kGeluA = 0.044715f;

}  // namespace

void gelu(std::size_t n, const float* x, float* y) {
  const __m256 c = _mm256_set1_ps(kGeluC);
  const __m256 a = _mm256_set1_ps(kGeluA);
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 v3 = _mm256_mul_ps(_mm256_mul_ps(v, v), v);
    const __m256 th = tanh256(_mm256_mul_ps(c, _mm256_fmadd_ps(a, v3, v)));
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_mul_ps(half, v), _mm256_add_ps(one, th)));
  }
  if (i < n) ref::sgelu(n - i, x + i, y + i);
}

void gelu_backward(std::size_t n, const float* x, const float* dy, float* dx) {
  const __m256 c = _mm256_set1_ps(kGeluC);
  const __m256 a = _mm256_set1_ps(kGeluA);
  const __m256 a3 = _mm256_set1_ps(3.0f * kGeluA);
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 v2 = _mm256_mul_ps(v, v);
    const __m256 u = _mm256_mul_ps(c, _mm256_fmadd_ps(a, _mm256_mul_ps(v2, v), v));
    // With e = exp(2u): tanh = 1 - 2/(e+1), sech^2 = 4e/(e+1)^2. Clamping 2u
    // keeps e*r*r finite; tanh is already +-1 in float well before 40.
    const __m256 lim = _mm256_set1_ps(40.0f);
    const __m256 e = exp256(_mm256_max_ps(_mm256_min_ps(_mm256_add_ps(u, u), lim),
                                          _mm256_sub_ps(_mm256_setzero_ps(), lim)));
    const __m256 r = _mm256_div_ps(one, _mm256_add_ps(e, one));
    const __m256 th = _mm256_fnmadd_ps(_mm256_set1_ps(2.0f), r, one);
    const __m256 sech2 = _mm256_mul_ps(_mm256_mul_ps(_mm256_set1_ps(4.0f), e), _mm256_mul_ps(r, r));
    const __m256 du = _mm256_mul_ps(c, _mm256_fmadd_ps(a3, v2, one));
    const __m256 g = _mm256_fmadd_ps(_mm256_mul_ps(_mm256_mul_ps(half, v), sech2), du,
                                     _mm256_mul_ps(half, _mm256_add_ps(one, th)));
    _mm256_storeu_ps(dx + i, _mm256_mul_ps(_mm256_loadu_ps(dy + i), g));
  }
  if (i < n) ref::sgelu_backward(n - i, x + i, dy + i, dx + i);
}

}  // namespace dlm::kernels::avx2
