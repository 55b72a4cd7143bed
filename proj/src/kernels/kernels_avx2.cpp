// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// AVX2 + FMA kernels. Compiled with -mavx2 -mfma; only reached through the
// dispatcher after a CPUID check.

#include <immintrin.h>

#include <cstdint>

#include "moelab/kernels.hpp"

namespace moelab::kernels::avx2 {

namespace {

struct F32 {
  using T = float;
  using V = __m256;
  using Mask = __m256i;
  static constexpr std::size_t W = 8;
  static V zero() { return _mm256_setzero_ps(); }
  static V set1(T x) { return _mm256_set1_ps(x); }
  static V load(const T* p) { return _mm256_loadu_ps(p); }
  static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  static V add(V a, V b) { return _mm256_add_ps(a, b); }
  static Mask mask(std::size_t count) {
    alignas(32) std::int32_t lanes[W];
    for (std::size_t i = 0; i < W; ++i) lanes[i] = i < count ? -1 : 0;
    return _mm256_load_si256(reinterpret_cast<const __m256i*>(lanes));
  }
  static V maskload(const T* p, Mask m) { return _mm256_maskload_ps(p, m); }
  static void maskstore(T* p, Mask m, V v) { _mm256_maskstore_ps(p, m, v); }
  static T hsum(V v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    sums = _mm_add_ss(sums, shuf);
    return _mm_cvtss_f32(sums);
  }
};

struct F64 {
  using T = double;
  using V = __m256d;
  using Mask = __m256i;
  static constexpr std::size_t W = 4;
  static V zero() { return _mm256_setzero_pd(); }
  static V set1(T x) { return _mm256_set1_pd(x); }
  static V load(const T* p) { return _mm256_loadu_pd(p); }
  static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static V add(V a, V b) { return _mm256_add_pd(a, b); }
  static Mask mask(std::size_t count) {
    alignas(32) std::int64_t lanes[W];
    for (std::size_t i = 0; i < W; ++i) lanes[i] = i < count ? -1 : 0;
    return _mm256_load_si256(reinterpret_cast<const __m256i*>(lanes));
  }
  static V maskload(const T* p, Mask m) { return _mm256_maskload_pd(p, m); }
  static void maskstore(T* p, Mask m, V v) { _mm256_maskstore_pd(p, m, v); }
  static T hsum(V v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d high64 = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
  }
};

// R rows of C, two full vectors of columns.
template <typename Tr, int R>
inline void tile_2v(std::size_t k, const typename Tr::T* a, std::size_t lda, const typename Tr::T* b,
                    std::size_t ldb, typename Tr::T* c, std::size_t ldc, bool accumulate) {
  using V = typename Tr::V;
  V acc0[R];
  V acc1[R];
  for (int r = 0; r < R; ++r) acc0[r] = acc1[r] = Tr::zero();
  for (std::size_t kk = 0; kk < k; ++kk) {
    const V b0 = Tr::load(b + kk * ldb);
    const V b1 = Tr::load(b + kk * ldb + Tr::W);
    for (int r = 0; r < R; ++r) {
      const V av = Tr::set1(a[r * lda + kk]);
      acc0[r] = Tr::fma(av, b0, acc0[r]);
      acc1[r] = Tr::fma(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    auto* crow = c + r * ldc;
    if (accumulate) {
      acc0[r] = Tr::add(Tr::load(crow), acc0[r]);
      acc1[r] = Tr::add(Tr::load(crow + Tr::W), acc1[r]);
    }
    Tr::store(crow, acc0[r]);
    Tr::store(crow + Tr::W, acc1[r]);
  }
}

// R rows of C, `cols` ≤ W columns through a lane mask.
template <typename Tr, int R>
inline void tile_mask(std::size_t k, std::size_t cols, const typename Tr::T* a, std::size_t lda,
                      const typename Tr::T* b, std::size_t ldb, typename Tr::T* c, std::size_t ldc,
                      bool accumulate) {
  using V = typename Tr::V;
  const auto m = Tr::mask(cols);
  const bool full = cols == Tr::W;
  V acc[R];
  for (int r = 0; r < R; ++r) acc[r] = Tr::zero();
  for (std::size_t kk = 0; kk < k; ++kk) {
    const V bv = full ? Tr::load(b + kk * ldb) : Tr::maskload(b + kk * ldb, m);
    for (int r = 0; r < R; ++r) acc[r] = Tr::fma(Tr::set1(a[r * lda + kk]), bv, acc[r]);
  }
  for (int r = 0; r < R; ++r) {
    auto* crow = c + r * ldc;
    if (full) {
      if (accumulate) acc[r] = Tr::add(Tr::load(crow), acc[r]);
      Tr::store(crow, acc[r]);
    } else {
      if (accumulate) acc[r] = Tr::add(Tr::maskload(crow, m), acc[r]);
      Tr::maskstore(crow, m, acc[r]);
    }
  }
}

template <typename Tr, int R>
inline void rows_2v(std::size_t m, std::size_t k, const typename Tr::T* a, std::size_t lda, const typename Tr::T* b,
                    std::size_t ldb, typename Tr::T* c, std::size_t ldc, bool accumulate, std::size_t& i) {
  for (; i + R <= m; i += R) tile_2v<Tr, R>(k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
}

template <typename Tr, int R>
inline void rows_mask(std::size_t m, std::size_t k, std::size_t cols, const typename Tr::T* a, std::size_t lda,
                      const typename Tr::T* b, std::size_t ldb, typename Tr::T* c, std::size_t ldc, bool accumulate,
                      std::size_t& i) {
  for (; i + R <= m; i += R) tile_mask<Tr, R>(k, cols, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
}

// Column panels outermost so a k × 2W slice of B stays cache-resident while
// every row block streams past it.
template <typename Tr>
void gemm_impl(std::size_t m, std::size_t n, std::size_t k, const typename Tr::T* a, std::size_t lda,
               const typename Tr::T* b, std::size_t ldb, typename Tr::T* c, std::size_t ldc, bool accumulate) {
  std::size_t j = 0;
  for (; j + 2 * Tr::W <= n; j += 2 * Tr::W) {
    std::size_t i = 0;
    rows_2v<Tr, 6>(m, k, a, lda, b + j, ldb, c + j, ldc, accumulate, i);
    rows_2v<Tr, 2>(m, k, a, lda, b + j, ldb, c + j, ldc, accumulate, i);
    rows_2v<Tr, 1>(m, k, a, lda, b + j, ldb, c + j, ldc, accumulate, i);
  }
  for (; j < n; j += Tr::W) {
    const std::size_t cols = n - j < Tr::W ? n - j : Tr::W;
    std::size_t i = 0;
    rows_mask<Tr, 8>(m, k, cols, a, lda, b + j, ldb, c + j, ldc, accumulate, i);
    rows_mask<Tr, 1>(m, k, cols, a, lda, b + j, ldb, c + j, ldc, accumulate, i);
  }
}

template <typename Tr>
void axpy_impl(std::size_t n, typename Tr::T alpha, const typename Tr::T* x, typename Tr::T* y) {
  const auto av = Tr::set1(alpha);
  std::size_t i = 0;
  for (; i + Tr::W <= n; i += Tr::W) Tr::store(y + i, Tr::fma(av, Tr::load(x + i), Tr::load(y + i)));
  for (; i < n; ++i) y[i] = __builtin_fma(alpha, x[i], y[i]);
}

template <typename Tr>
typename Tr::T dot_impl(std::size_t n, const typename Tr::T* x, const typename Tr::T* y) {
  auto acc0 = Tr::zero();
  auto acc1 = Tr::zero();
  std::size_t i = 0;
  for (; i + 2 * Tr::W <= n; i += 2 * Tr::W) {
    acc0 = Tr::fma(Tr::load(x + i), Tr::load(y + i), acc0);
    acc1 = Tr::fma(Tr::load(x + i + Tr::W), Tr::load(y + i + Tr::W), acc1);
  }
  for (; i + Tr::W <= n; i += Tr::W) acc0 = Tr::fma(Tr::load(x + i), Tr::load(y + i), acc0);
  typename Tr::T tail = 0;
  for (; i < n; ++i) tail += x[i] * y[i];
  return Tr::hsum(Tr::add(acc0, acc1)) + tail;
}

// Cephes-style expf: range reduction by ln 2, degree-6 polynomial, exponent
// reassembly. Max relative error ~2 ulp on the clamped domain.
inline __m256 exp_ps(__m256 x) {
  x = _mm256_min_ps(_mm256_max_ps(x, _mm256_set1_ps(-87.0f)), _mm256_set1_ps(87.0f));
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
  const __m256i e = _mm256_slli_epi32(_mm256_add_epi32(_mm256_cvtps_epi32(fx), _mm256_set1_epi32(127)), 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(e));
}

// tanh(u) = (e^{2u} - 1) / (e^{2u} + 1); absolute error ~1e-7.
inline __m256 tanh_ps(__m256 u) {
  u = _mm256_min_ps(_mm256_max_ps(u, _mm256_set1_ps(-9.0f)), _mm256_set1_ps(9.0f));
  const __m256 e = exp_ps(_mm256_add_ps(u, u));
  const __m256 one = _mm256_set1_ps(1.0f);
  return _mm256_div_ps(_mm256_sub_ps(e, one), _mm256_add_ps(e, one));
}

constexpr float kGeluC = 0.7978845608028654f;
constexpr float kGeluA = 0.044715f;

inline __m256 gelu_inner(__m256 x) {
  const __m256 x2 = _mm256_mul_ps(x, x);
  return _mm256_mul_ps(_mm256_set1_ps(kGeluC), _mm256_fmadd_ps(_mm256_mul_ps(_mm256_set1_ps(kGeluA), x2), x, x));
}

}  // namespace

void gelu_forward_f32(std::size_t n, const float* x, float* y) {
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 t = tanh_ps(gelu_inner(v));
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_mul_ps(half, v), _mm256_add_ps(one, t)));
  }
  if (i < n) {
    const __m256i m = F32::mask(n - i);
    const __m256 v = _mm256_maskload_ps(x + i, m);
    const __m256 t = tanh_ps(gelu_inner(v));
    _mm256_maskstore_ps(y + i, m, _mm256_mul_ps(_mm256_mul_ps(half, v), _mm256_add_ps(one, t)));
  }
}

void gelu_backward_f32(std::size_t n, const float* x, float* g) {
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 c = _mm256_set1_ps(kGeluC);
  const __m256 a3 = _mm256_set1_ps(3.0f * kGeluA);
  auto grad = [&](__m256 v) {
    const __m256 t = tanh_ps(gelu_inner(v));
    const __m256 sech2 = _mm256_fnmadd_ps(t, t, one);
    const __m256 dinner = _mm256_mul_ps(c, _mm256_fmadd_ps(a3, _mm256_mul_ps(v, v), one));
    const __m256 left = _mm256_mul_ps(half, _mm256_add_ps(one, t));
    return _mm256_fmadd_ps(_mm256_mul_ps(_mm256_mul_ps(half, v), sech2), dinner, left);
  };
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(g + i, _mm256_mul_ps(_mm256_loadu_ps(g + i), grad(_mm256_loadu_ps(x + i))));
  }
  if (i < n) {
    const __m256i m = F32::mask(n - i);
    const __m256 v = _mm256_maskload_ps(x + i, m);
    _mm256_maskstore_ps(g + i, m, _mm256_mul_ps(_mm256_maskload_ps(g + i, m), grad(v)));
  }
}

// Double precision keeps libm tanh: the f64 path exists for exact tests.
void gelu_forward_f64(std::size_t n, const double* x, double* y) { scalar::gelu_forward_f64(n, x, y); }
void gelu_backward_f64(std::size_t n, const double* x, double* g) { scalar::gelu_backward_f64(n, x, g); }

void gemm_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b,
              std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
  gemm_impl<F32>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
void gemm_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
              std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm_impl<F64>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
void axpy_f32(std::size_t n, float alpha, const float* x, float* y) { axpy_impl<F32>(n, alpha, x, y); }
void axpy_f64(std::size_t n, double alpha, const double* x, double* y) { axpy_impl<F64>(n, alpha, x, y); }
float dot_f32(std::size_t n, const float* x, const float* y) { return dot_impl<F32>(n, x, y); }
double dot_f64(std::size_t n, const double* x, const double* y) { return dot_impl<F64>(n, x, y); }

}  // namespace moelab::kernels::avx2
