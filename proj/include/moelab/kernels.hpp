// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// Dense arithmetic kernels with a scalar reference implementation and SIMD
// variants chosen at runtime.
//
// Every gemm variant computes each output element with the same sequence of
// operations regardless of where it sits in the matrix:
//
//   acc = 0; for k in [0, K): acc += a[i][k] * b[k][j];  c[i][j] = (accumulate ? c[i][j] : 0) + acc
//
// so results depend only on the row of A and the column of B, never on the
// blocking. The SIMD variants fuse the multiply-add; they therefore differ from
// the scalar reference by rounding only.

#pragma once

#include <cstddef>
#include <string_view>

namespace moelab::kernels {

enum class Isa { scalar, avx2 };

std::string_view to_string(Isa isa);
bool isa_supported(Isa isa);
/// Widest ISA supported by both the build and the running CPU.
Isa best_isa();
/// ISA used by the dispatching entry points. Initialised from `MOELAB_ISA`
/// (scalar|avx2) when set, otherwise best_isa().
Isa active_isa();
/// Throws std::invalid_argument if the ISA is unavailable on this machine.
void set_active_isa(Isa isa);

/// Restores the previously active ISA on destruction.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : previous_(active_isa()) { set_active_isa(isa); }
  ~ScopedIsa() { set_active_isa(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

/// C[m×n] (+)= A[m×k] · B[k×n], row-major with explicit leading dimensions.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
          std::size_t ldb, T* c, std::size_t ldc, bool accumulate);

/// y += alpha · x
template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y);

template <typename T>
T dot(std::size_t n, const T* x, const T* y);

/// y = gelu(x), tanh form.
template <typename T>
void gelu_forward(std::size_t n, const T* x, T* y);

/// g *= gelu'(x)
template <typename T>
void gelu_backward(std::size_t n, const T* x, T* g);

/// dst[n×m] = transpose(src[m×n]).
template <typename T>
void transpose(std::size_t m, std::size_t n, const T* src, std::size_t ld_src, T* dst, std::size_t ld_dst);

#define MOELAB_KERNEL_DECLS(ns)                                                                           \
  namespace ns {                                                                                          \
  void gemm_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,            \
                const float* b, std::size_t ldb, float* c, std::size_t ldc, bool accumulate);             \
  void gemm_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,           \
                const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);           \
  void axpy_f32(std::size_t n, float alpha, const float* x, float* y);                                    \
  void axpy_f64(std::size_t n, double alpha, const double* x, double* y);                                 \
  float dot_f32(std::size_t n, const float* x, const float* y);                                           \
  double dot_f64(std::size_t n, const double* x, const double* y);                                        \
  void gelu_forward_f32(std::size_t n, const float* x, float* y);                                         \
  void gelu_forward_f64(std::size_t n, const double* x, double* y);                                       \
  void gelu_backward_f32(std::size_t n, const float* x, float* g);                                        \
  void gelu_backward_f64(std::size_t n, const double* x, double* g);                                      \
  }

MOELAB_KERNEL_DECLS(scalar)
MOELAB_KERNEL_DECLS(avx2)

#undef MOELAB_KERNEL_DECLS

}  // namespace moelab::kernels
