// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace moelab {

/// Dense row-major matrix. A vector is stored as a 1×n matrix; an absent
/// optional parameter (for example a disabled bias) is the empty 0×0 matrix.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  T& operator()(std::size_t r, std::size_t c) {
    assert(r < rows && c < cols);
    return data[r * cols + c];
  }
  const T& operator()(std::size_t r, std::size_t c) const {
    assert(r < rows && c < cols);
    return data[r * cols + c];
  }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  void resize(std::size_t r, std::size_t c) {
    rows = r;
    cols = c;
    data.assign(r * c, T{});
  }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool operator==(const Matrix&) const = default;
};

}  // namespace moelab
