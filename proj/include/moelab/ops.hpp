// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

// Elementwise building blocks shared by routers, experts and attention.

#pragma once

#include <cmath>

namespace moelab::ops {

// tanh approximation used by GPT-2.
template <typename T>
inline T gelu(T x) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = static_cast<T>(0.044715);
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::tanh(kC * (x + kA * x * x * x)));
}

template <typename T>
inline T gelu_grad(T x) {
  constexpr T kC = static_cast<T>(0.7978845608028654);
  constexpr T kA = static_cast<T>(0.044715);
  const T inner = kC * (x + kA * x * x * x);
  const T t = std::tanh(inner);
  const T sech2 = static_cast<T>(1) - t * t;
  return static_cast<T>(0.5) * (static_cast<T>(1) + t) +
         static_cast<T>(0.5) * x * sech2 * kC * (static_cast<T>(1) + static_cast<T>(3) * kA * x * x);
}

}  // namespace moelab::ops
