// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// Matrix products on top of the dispatching gemm kernel.

#pragma once

#include <vector>

#include "moelab/kernels.hpp"
#include "moelab/tensor.hpp"

namespace moelab::linalg {

/// c (+)= a · b
template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false) {
  assert(a.cols == b.rows);
  if (!accumulate) c.resize(a.rows, b.cols);
  assert(c.rows == a.rows && c.cols == b.cols);
  if (a.rows == 0 || b.cols == 0) return;
  if (a.cols == 0) {
    if (!accumulate) c.fill(T{});
    return;
  }
  kernels::gemm<T>(a.rows, b.cols, a.cols, a.ptr(), a.cols, b.ptr(), b.cols, c.ptr(), c.cols, accumulate);
}

template <typename T>
Matrix<T> transposed(const Matrix<T>& a) {
  Matrix<T> t(a.cols, a.rows);
  if (!a.empty()) kernels::transpose<T>(a.rows, a.cols, a.ptr(), a.cols, t.ptr(), t.cols);
  return t;
}

/// c (+)= a · bᵀ
template <typename T>
void matmul_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false) {
  matmul(a, transposed(b), c, accumulate);
}

/// c (+)= aᵀ · b
template <typename T>
void matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c, bool accumulate = false) {
  matmul(transposed(a), b, c, accumulate);
}

/// Adds the 1×n row vector `bias` to every row of `x`. No-op for an empty bias.
template <typename T>
void add_row_vector(Matrix<T>& x, const Matrix<T>& bias) {
  if (bias.empty()) return;
  for (std::size_t r = 0; r < x.rows; ++r) {
    T* row = x.ptr() + r * x.cols;
    for (std::size_t c = 0; c < x.cols; ++c) row[c] += bias.data[c];
  }
}

/// grad (1×n) += column sums of x. No-op for an empty gradient.
template <typename T>
void accumulate_column_sums(const Matrix<T>& x, Matrix<T>& grad) {
  if (grad.empty()) return;
  for (std::size_t r = 0; r < x.rows; ++r) {
    const T* row = x.ptr() + r * x.cols;
    for (std::size_t c = 0; c < x.cols; ++c) grad.data[c] += row[c];
  }
}

}  // namespace moelab::linalg
