// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "moelab/kernels.hpp"

namespace moelab::kernels {

namespace {

bool cpu_has_avx2() {
#if defined(MOELAB_HAVE_AVX2_TU) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa initial_isa() {
  if (const char* env = std::getenv("MOELAB_ISA")) {
    const std::string v = env;
    if (v == "scalar") return Isa::scalar;
    if (v == "avx2" && cpu_has_avx2()) return Isa::avx2;
  }
  return best_isa();
}

std::atomic<Isa>& active() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

}  // namespace

std::string_view to_string(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

bool isa_supported(Isa isa) { return isa == Isa::scalar || cpu_has_avx2(); }

Isa best_isa() { return cpu_has_avx2() ? Isa::avx2 : Isa::scalar; }

Isa active_isa() { return active().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) throw std::invalid_argument("ISA " + std::string(to_string(isa)) + " not supported");
  active().store(isa, std::memory_order_relaxed);
}

template <>
void gemm<float>(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b,
                 std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
  if (active_isa() == Isa::avx2) return avx2::gemm_f32(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  scalar::gemm_f32(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

template <>
void gemm<double>(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  if (active_isa() == Isa::avx2) return avx2::gemm_f64(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  scalar::gemm_f64(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

template <>
void axpy<float>(std::size_t n, float alpha, const float* x, float* y) {
  if (active_isa() == Isa::avx2) return avx2::axpy_f32(n, alpha, x, y);
  scalar::axpy_f32(n, alpha, x, y);
}

template <>
void axpy<double>(std::size_t n, double alpha, const double* x, double* y) {
  if (active_isa() == Isa::avx2) return avx2::axpy_f64(n, alpha, x, y);
  scalar::axpy_f64(n, alpha, x, y);
}

template <>
float dot<float>(std::size_t n, const float* x, const float* y) {
  return active_isa() == Isa::avx2 ? avx2::dot_f32(n, x, y) : scalar::dot_f32(n, x, y);
}

template <>
double dot<double>(std::size_t n, const double* x, const double* y) {
  return active_isa() == Isa::avx2 ? avx2::dot_f64(n, x, y) : scalar::dot_f64(n, x, y);
}

template <>
void gelu_forward<float>(std::size_t n, const float* x, float* y) {
  if (active_isa() == Isa::avx2) return avx2::gelu_forward_f32(n, x, y);
  scalar::gelu_forward_f32(n, x, y);
}

template <>
void gelu_forward<double>(std::size_t n, const double* x, double* y) {
  if (active_isa() == Isa::avx2) return avx2::gelu_forward_f64(n, x, y);
  scalar::gelu_forward_f64(n, x, y);
}

template <>
void gelu_backward<float>(std::size_t n, const float* x, float* g) {
  if (active_isa() == Isa::avx2) return avx2::gelu_backward_f32(n, x, g);
  scalar::gelu_backward_f32(n, x, g);
}

template <>
void gelu_backward<double>(std::size_t n, const double* x, double* g) {
  if (active_isa() == Isa::avx2) return avx2::gelu_backward_f64(n, x, g);
  scalar::gelu_backward_f64(n, x, g);
}

template <typename T>
void transpose(std::size_t m, std::size_t n, const T* src, std::size_t ld_src, T* dst, std::size_t ld_dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += kBlock) {
    const std::size_t i1 = i0 + kBlock < m ? i0 + kBlock : m;
    for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
      const std::size_t j1 = j0 + kBlock < n ? j0 + kBlock : n;
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) dst[j * ld_dst + i] = src[i * ld_src + j];
      }
    }
  }
}

template void transpose<float>(std::size_t, std::size_t, const float*, std::size_t, float*, std::size_t);
template void transpose<double>(std::size_t, std::size_t, const double*, std::size_t, double*, std::size_t);

}  // namespace moelab::kernels

#if !defined(MOELAB_HAVE_AVX2_TU)
// Non-x86 builds: the avx2 symbols forward to the scalar reference so the
// declarations link; the dispatcher never selects them.
namespace moelab::kernels::avx2 {
void gemm_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b,
              std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
  scalar::gemm_f32(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
void gemm_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
              std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  scalar::gemm_f64(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
void axpy_f32(std::size_t n, float alpha, const float* x, float* y) { scalar::axpy_f32(n, alpha, x, y); }
void axpy_f64(std::size_t n, double alpha, const double* x, double* y) { scalar::axpy_f64(n, alpha, x, y); }
float dot_f32(std::size_t n, const float* x, const float* y) { return scalar::dot_f32(n, x, y); }
double dot_f64(std::size_t n, const double* x, const double* y) { return scalar::dot_f64(n, x, y); }
void gelu_forward_f32(std::size_t n, const float* x, float* y) { scalar::gelu_forward_f32(n, x, y); }
void gelu_forward_f64(std::size_t n, const double* x, double* y) { scalar::gelu_forward_f64(n, x, y); }
void gelu_backward_f32(std::size_t n, const float* x, float* g) { scalar::gelu_backward_f32(n, x, g); }
void gelu_backward_f64(std::size_t n, const double* x, double* g) { scalar::gelu_backward_f64(n, x, g); }
}  // namespace moelab::kernels::avx2
#endif
