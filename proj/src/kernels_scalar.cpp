/*
 * Copyright 2026 The parmuon Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Scalar reference kernels. Compiled with -ffp-contract=off so these are plain
// IEEE mul/add sequences; the SIMD variants are equivalence-tested against them.

#include "parmuon/kernels.hpp"

namespace parmuon::kernels::detail {
namespace {

template <typename T>
void axpby(std::size_t n, T a, const T* x, T b, T* y) {
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = a * x[i] + b * y[i];
  }
}

template <typename T>
void scale_c(std::size_t mn, T beta, T* c) {
  if (beta == T(1)) return;
  if (beta == T(0)) {
    for (std::size_t i = 0; i < mn; ++i) c[i] = T(0);
  } else {
    for (std::size_t i = 0; i < mn; ++i) c[i] *= beta;
  }
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
             const T* b, T beta, T* c) {
  scale_c(m * n, beta, c);
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = alpha * arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
             const T* b, T beta, T* c) {
  scale_c(m * n, beta, c);
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) {
        acc += arow[p] * brow[p];
      }
      crow[j] += alpha * acc;
    }
  }
}

template <typename T>
double sum_squares(std::size_t n, const T* x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    acc += v * v;
  }
  return acc;
}

template <typename T>
void power_sums(std::size_t n, const T* x, double out[3]) {
  double s2 = 0.0, s4 = 0.0, s6 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    const double v2 = v * v;
    const double v4 = v2 * v2;
    s2 += v2;
    s4 += v4;
    s6 += v4 * v2;
  }
  out[0] = s2;
  out[1] = s4;
  out[2] = s6;
}

template <typename T>
void poly_backward_sums(std::size_t n, const T* x, const T* g, double out[7]) {
  double s2 = 0.0, s4 = 0.0, s6 = 0.0;
  double d0 = 0.0, d1 = 0.0, d2 = 0.0, d3 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    const double gv = static_cast<double>(g[i]);
    const double v2 = v * v;
    const double v4 = v2 * v2;
    s2 += v2;
    s4 += v4;
    s6 += v4 * v2;
    d0 += gv;
    double t = gv * v;
    d1 += t;
    t *= v;
    d2 += t;
    t *= v;
    d3 += t;
  }
  out[0] = s2;
  out[1] = s4;
  out[2] = s6;
  out[3] = d0;
  out[4] = d1;
  out[5] = d2;
  out[6] = d3;
}

// Elementwise polynorm math runs in double regardless of the element type and
// rounds once on store; large odd powers would otherwise lose the tails at
// float precision.
template <typename T>
void poly_combine(std::size_t n, const T* x, const T* gate,
                  const double coeff[3], double bias, T* out) {
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    double r = v * (coeff[0] + v * (coeff[1] + v * coeff[2])) + bias;
    if (gate != nullptr) r *= static_cast<double>(gate[i]);
    out[i] = static_cast<T>(r);
  }
}

template <typename T>
void poly_dx(std::size_t n, const T* x, const T* g, const double a[3],
             const double b[3], T* dx) {
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    const double v2 = v * v;
    const double lhs = static_cast<double>(g[i]) * (a[0] + v * (a[1] + v * a[2]));
    const double rhs = v * (b[0] + v2 * (b[1] + v2 * b[2]));
    dx[i] = static_cast<T>(lhs - rhs);
  }
}

template <typename T>
Kernels<T> make_table() {
  Kernels<T> t;
  t.axpby = &axpby<T>;
  t.gemm_nn = &gemm_nn<T>;
  t.gemm_nt = &gemm_nt<T>;
  t.sum_squares = &sum_squares<T>;
  t.power_sums = &power_sums<T>;
  t.poly_backward_sums = &poly_backward_sums<T>;
  t.poly_combine = &poly_combine<T>;
  t.poly_dx = &poly_dx<T>;
  return t;
}

}  // namespace

const Kernels<float>& scalar_f32() {
  static const Kernels<float> t = make_table<float>();
  return t;
}

const Kernels<double>& scalar_f64() {
  static const Kernels<double> t = make_table<double>();
  return t;
}

}  // namespace parmuon::kernels::detail
