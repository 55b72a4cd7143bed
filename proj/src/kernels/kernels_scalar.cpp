// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/kernels.hpp"
#include "moelab/ops.hpp"

namespace moelab::kernels::scalar {

namespace {

template <typename T>
void gemm_ref(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda, const T* b,
              std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * lda;
    T* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * b[kk * ldb + j];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

template <typename T>
void axpy_ref(std::size_t n, T alpha, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
T dot_ref(std::size_t n, const T* x, const T* y) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <typename T>
void gelu_forward_ref(std::size_t n, const T* x, T* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = ops::gelu(x[i]);
}

template <typename T>
void gelu_backward_ref(std::size_t n, const T* x, T* g) {
  for (std::size_t i = 0; i < n; ++i) g[i] *= ops::gelu_grad(x[i]);
}

}  // namespace

void gemm_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda, const float* b,
              std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
  gemm_ref(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
void gemm_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
              std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm_ref(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}
void axpy_f32(std::size_t n, float alpha, const float* x, float* y) { axpy_ref(n, alpha, x, y); }
void axpy_f64(std::size_t n, double alpha, const double* x, double* y) { axpy_ref(n, alpha, x, y); }
float dot_f32(std::size_t n, const float* x, const float* y) { return dot_ref(n, x, y); }
double dot_f64(std::size_t n, const double* x, const double* y) { return dot_ref(n, x, y); }
void gelu_forward_f32(std::size_t n, const float* x, float* y) { gelu_forward_ref(n, x, y); }
void gelu_forward_f64(std::size_t n, const double* x, double* y) { gelu_forward_ref(n, x, y); }
void gelu_backward_f32(std::size_t n, const float* x, float* g) { gelu_backward_ref(n, x, g); }
void gelu_backward_f64(std::size_t n, const double* x, double* g) { gelu_backward_ref(n, x, g); }

}  // namespace moelab::kernels::scalar
