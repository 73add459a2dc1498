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

// AVX2+FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma and must only be reached through the dispatch table after a
// runtime cpuid check. Reductions keep lane accumulators and fold them in a
// fixed lane order, so results are deterministic (though not bit-equal to the
// scalar reference; the equivalence tests bound the difference).

#include "parmuon/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>

namespace parmuon::kernels::detail {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d pair = _mm_add_pd(lo, hi);  // {v0+v2, v1+v3}
  return _mm_cvtsd_f64(pair) + _mm_cvtsd_f64(_mm_unpackhi_pd(pair, pair));
}

// ---------------------------------------------------------------------------
// axpby
// ---------------------------------------------------------------------------

void axpby_f64(std::size_t n, double a, const double* x, double b, double* y) {
  const __m256d av = _mm256_set1_pd(a);
  const __m256d bv = _mm256_set1_pd(b);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d xv = _mm256_loadu_pd(x + i);
    const __m256d yv = _mm256_loadu_pd(y + i);
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, xv, _mm256_mul_pd(bv, yv)));
  }
  for (; i < n; ++i) {
    y[i] = std::fma(a, x[i], b * y[i]);
  }
}

void axpby_f32(std::size_t n, float a, const float* x, float b, float* y) {
  const __m256 av = _mm256_set1_ps(a);
  const __m256 bv = _mm256_set1_ps(b);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 xv = _mm256_loadu_ps(x + i);
    const __m256 yv = _mm256_loadu_ps(y + i);
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, xv, _mm256_mul_ps(bv, yv)));
  }
  for (; i < n; ++i) {
    y[i] = std::fma(a, x[i], b * y[i]);
  }
}

// ---------------------------------------------------------------------------
// gemm
// ---------------------------------------------------------------------------

template <typename T>
void scale_c(std::size_t mn, T beta, T* c) {
  if (beta == T(1)) return;
  if (beta == T(0)) {
    for (std::size_t i = 0; i < mn; ++i) c[i] = T(0);
  } else {
    for (std::size_t i = 0; i < mn; ++i) c[i] *= beta;
  }
}

void gemm_nn_f64(std::size_t m, std::size_t n, std::size_t k, double alpha,
                 const double* a, const double* b, double beta, double* c) {
  scale_c(m * n, beta, c);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = alpha * arow[p];
      const __m256d avv = _mm256_set1_pd(av);
      const double* brow = b + p * n;
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) {
        const __m256d c0 = _mm256_loadu_pd(crow + j);
        const __m256d c1 = _mm256_loadu_pd(crow + j + 4);
        _mm256_storeu_pd(crow + j,
                         _mm256_fmadd_pd(avv, _mm256_loadu_pd(brow + j), c0));
        _mm256_storeu_pd(
            crow + j + 4,
            _mm256_fmadd_pd(avv, _mm256_loadu_pd(brow + j + 4), c1));
      }
      for (; j + 4 <= n; j += 4) {
        const __m256d c0 = _mm256_loadu_pd(crow + j);
        _mm256_storeu_pd(crow + j,
                         _mm256_fmadd_pd(avv, _mm256_loadu_pd(brow + j), c0));
      }
      for (; j < n; ++j) {
        crow[j] = std::fma(av, brow[j], crow[j]);
      }
    }
  }
}

void gemm_nn_f32(std::size_t m, std::size_t n, std::size_t k, float alpha,
                 const float* a, const float* b, float beta, float* c) {
  scale_c(m * n, beta, c);
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = alpha * arow[p];
      const __m256 avv = _mm256_set1_ps(av);
      const float* brow = b + p * n;
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) {
        const __m256 c0 = _mm256_loadu_ps(crow + j);
        _mm256_storeu_ps(crow + j,
                         _mm256_fmadd_ps(avv, _mm256_loadu_ps(brow + j), c0));
      }
      for (; j < n; ++j) {
        crow[j] = std::fma(av, brow[j], crow[j]);
      }
    }
  }
}

void gemm_nt_f64(std::size_t m, std::size_t n, std::size_t k, double alpha,
                 const double* a, const double* b, double beta, double* c) {
  scale_c(m * n, beta, c);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      __m256d acc = _mm256_setzero_pd();
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(arow + p),
                              _mm256_loadu_pd(brow + p), acc);
      }
      double dot = hsum(acc);
      for (; p < k; ++p) {
        dot = std::fma(arow[p], brow[p], dot);
      }
      crow[j] = std::fma(alpha, dot, crow[j]);
    }
  }
}

void gemm_nt_f32(std::size_t m, std::size_t n, std::size_t k, float alpha,
                 const float* a, const float* b, float beta, float* c) {
  scale_c(m * n, beta, c);
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b + j * k;
      __m256 acc = _mm256_setzero_ps();
      std::size_t p = 0;
      for (; p + 8 <= k; p += 8) {
        acc = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p),
                              _mm256_loadu_ps(brow + p), acc);
      }
      const __m128 lo = _mm256_castps256_ps128(acc);
      const __m128 hi = _mm256_extractf128_ps(acc, 1);
      __m128 pair = _mm_add_ps(lo, hi);
      pair = _mm_add_ps(pair, _mm_movehl_ps(pair, pair));
      float dot = _mm_cvtss_f32(pair) +
                  _mm_cvtss_f32(_mm_shuffle_ps(pair, pair, 0x1));
      for (; p < k; ++p) {
        dot = std::fma(arow[p], brow[p], dot);
      }
      crow[j] = std::fma(alpha, dot, crow[j]);
    }
  }
}

// ---------------------------------------------------------------------------
// reductions (double accumulators for both element types)
// ---------------------------------------------------------------------------

double sum_squares_f64(std::size_t n, const double* x) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    acc = _mm256_fmadd_pd(v, v, acc);
  }
  double s = hsum(acc);
  for (; i < n; ++i) {
    s = std::fma(x[i], x[i], s);
  }
  return s;
}

double sum_squares_f32(std::size_t n, const float* x) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
    acc = _mm256_fmadd_pd(v, v, acc);
  }
  double s = hsum(acc);
  for (; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    s = std::fma(v, v, s);
  }
  return s;
}

template <typename T>
inline __m256d load4_as_pd(const T* x);

template <>
inline __m256d load4_as_pd<double>(const double* x) {
  return _mm256_loadu_pd(x);
}

template <>
inline __m256d load4_as_pd<float>(const float* x) {
  return _mm256_cvtps_pd(_mm_loadu_ps(x));
}

template <typename T>
void power_sums_t(std::size_t n, const T* x, double out[3]) {
  __m256d s2 = _mm256_setzero_pd();
  __m256d s4 = _mm256_setzero_pd();
  __m256d s6 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = load4_as_pd(x + i);
    const __m256d v2 = _mm256_mul_pd(v, v);
    const __m256d v4 = _mm256_mul_pd(v2, v2);
    s2 = _mm256_add_pd(s2, v2);
    s4 = _mm256_add_pd(s4, v4);
    s6 = _mm256_fmadd_pd(v4, v2, s6);
  }
  double r2 = hsum(s2), r4 = hsum(s4), r6 = hsum(s6);
  for (; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    const double v2 = v * v;
    const double v4 = v2 * v2;
    r2 += v2;
    r4 += v4;
    r6 = std::fma(v4, v2, r6);
  }
  out[0] = r2;
  out[1] = r4;
  out[2] = r6;
}

template <typename T>
void poly_backward_sums_t(std::size_t n, const T* x, const T* g, double out[7]) {
  __m256d s2 = _mm256_setzero_pd();
  __m256d s4 = _mm256_setzero_pd();
  __m256d s6 = _mm256_setzero_pd();
  __m256d d0 = _mm256_setzero_pd();
  __m256d d1 = _mm256_setzero_pd();
  __m256d d2 = _mm256_setzero_pd();
  __m256d d3 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = load4_as_pd(x + i);
    const __m256d gv = load4_as_pd(g + i);
    const __m256d v2 = _mm256_mul_pd(v, v);
    const __m256d v4 = _mm256_mul_pd(v2, v2);
    s2 = _mm256_add_pd(s2, v2);
    s4 = _mm256_add_pd(s4, v4);
    s6 = _mm256_fmadd_pd(v4, v2, s6);
    d0 = _mm256_add_pd(d0, gv);
    __m256d t = _mm256_mul_pd(gv, v);
    d1 = _mm256_add_pd(d1, t);
    t = _mm256_mul_pd(t, v);
    d2 = _mm256_add_pd(d2, t);
    t = _mm256_mul_pd(t, v);
    d3 = _mm256_add_pd(d3, t);
  }
  double r[7] = {hsum(s2), hsum(s4), hsum(s6), hsum(d0), hsum(d1), hsum(d2), hsum(d3)};
  for (; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    const double gv = static_cast<double>(g[i]);
    const double v2 = v * v;
    const double v4 = v2 * v2;
    r[0] += v2;
    r[1] += v4;
    r[2] = std::fma(v4, v2, r[2]);
    r[3] += gv;
    double t = gv * v;
    r[4] += t;
    t *= v;
    r[5] += t;
    t *= v;
    r[6] += t;
  }
  for (int j = 0; j < 7; ++j) out[j] = r[j];
}

// ---------------------------------------------------------------------------
// polynorm elementwise
// ---------------------------------------------------------------------------

void poly_combine_f64(std::size_t n, const double* x, const double* gate,
                      const double coeff[3], double bias, double* out) {
  const __m256d c1 = _mm256_set1_pd(coeff[0]);
  const __m256d c2 = _mm256_set1_pd(coeff[1]);
  const __m256d c3 = _mm256_set1_pd(coeff[2]);
  const __m256d bv = _mm256_set1_pd(bias);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    __m256d r = _mm256_fmadd_pd(v, c3, c2);
    r = _mm256_fmadd_pd(v, r, c1);
    r = _mm256_fmadd_pd(v, r, bv);
    if (gate != nullptr) r = _mm256_mul_pd(r, _mm256_loadu_pd(gate + i));
    _mm256_storeu_pd(out + i, r);
  }
  for (; i < n; ++i) {
    const double v = x[i];
    double r = std::fma(v, std::fma(v, std::fma(v, coeff[2], coeff[1]), coeff[0]), bias);
    if (gate != nullptr) r *= gate[i];
    out[i] = r;
  }
}

// The f32 elementwise variants compute in double lanes and round on store,
// matching the scalar reference's widened arithmetic.
void poly_combine_f32(std::size_t n, const float* x, const float* gate,
                      const double coeff[3], double bias, float* out) {
  const __m256d c1 = _mm256_set1_pd(coeff[0]);
  const __m256d c2 = _mm256_set1_pd(coeff[1]);
  const __m256d c3 = _mm256_set1_pd(coeff[2]);
  const __m256d bv = _mm256_set1_pd(bias);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
    __m256d r = _mm256_fmadd_pd(v, c3, c2);
    r = _mm256_fmadd_pd(v, r, c1);
    r = _mm256_fmadd_pd(v, r, bv);
    if (gate != nullptr) {
      r = _mm256_mul_pd(r, _mm256_cvtps_pd(_mm_loadu_ps(gate + i)));
    }
    _mm_storeu_ps(out + i, _mm256_cvtpd_ps(r));
  }
  for (; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    double r = std::fma(v, std::fma(v, std::fma(v, coeff[2], coeff[1]), coeff[0]), bias);
    if (gate != nullptr) r *= static_cast<double>(gate[i]);
    out[i] = static_cast<float>(r);
  }
}

void poly_dx_f64(std::size_t n, const double* x, const double* g,
                 const double a[3], const double b[3], double* dx) {
  const __m256d a1 = _mm256_set1_pd(a[0]);
  const __m256d a2 = _mm256_set1_pd(a[1]);
  const __m256d a3 = _mm256_set1_pd(a[2]);
  const __m256d b1 = _mm256_set1_pd(b[0]);
  const __m256d b2 = _mm256_set1_pd(b[1]);
  const __m256d b3 = _mm256_set1_pd(b[2]);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    const __m256d v2 = _mm256_mul_pd(v, v);
    __m256d lhs = _mm256_fmadd_pd(v, a3, a2);
    lhs = _mm256_fmadd_pd(v, lhs, a1);
    lhs = _mm256_mul_pd(_mm256_loadu_pd(g + i), lhs);
    __m256d rhs = _mm256_fmadd_pd(v2, b3, b2);
    rhs = _mm256_fmadd_pd(v2, rhs, b1);
    rhs = _mm256_mul_pd(v, rhs);
    _mm256_storeu_pd(dx + i, _mm256_sub_pd(lhs, rhs));
  }
  for (; i < n; ++i) {
    const double v = x[i];
    const double v2 = v * v;
    const double lhs = g[i] * std::fma(v, std::fma(v, a[2], a[1]), a[0]);
    const double rhs = v * std::fma(v2, std::fma(v2, b[2], b[1]), b[0]);
    dx[i] = lhs - rhs;
  }
}

void poly_dx_f32(std::size_t n, const float* x, const float* g,
                 const double a[3], const double b[3], float* dx) {
  const __m256d a1 = _mm256_set1_pd(a[0]);
  const __m256d a2 = _mm256_set1_pd(a[1]);
  const __m256d a3 = _mm256_set1_pd(a[2]);
  const __m256d b1 = _mm256_set1_pd(b[0]);
  const __m256d b2 = _mm256_set1_pd(b[1]);
  const __m256d b3 = _mm256_set1_pd(b[2]);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
    const __m256d v2 = _mm256_mul_pd(v, v);
    __m256d lhs = _mm256_fmadd_pd(v, a3, a2);
    lhs = _mm256_fmadd_pd(v, lhs, a1);
    lhs = _mm256_mul_pd(_mm256_cvtps_pd(_mm_loadu_ps(g + i)), lhs);
    __m256d rhs = _mm256_fmadd_pd(v2, b3, b2);
    rhs = _mm256_fmadd_pd(v2, rhs, b1);
    rhs = _mm256_mul_pd(v, rhs);
    _mm_storeu_ps(dx + i, _mm256_cvtpd_ps(_mm256_sub_pd(lhs, rhs)));
  }
  for (; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    const double v2 = v * v;
    const double lhs = static_cast<double>(g[i]) * std::fma(v, std::fma(v, a[2], a[1]), a[0]);
    const double rhs = v * std::fma(v2, std::fma(v2, b[2], b[1]), b[0]);
    dx[i] = static_cast<float>(lhs - rhs);
  }
}

}  // namespace

const Kernels<float>& avx2_f32() {
  static const Kernels<float> t = [] {
    Kernels<float> k;
    k.axpby = &axpby_f32;
    k.gemm_nn = &gemm_nn_f32;
    k.gemm_nt = &gemm_nt_f32;
    k.sum_squares = &sum_squares_f32;
    k.power_sums = &power_sums_t<float>;
    k.poly_backward_sums = &poly_backward_sums_t<float>;
    k.poly_combine = &poly_combine_f32;
    k.poly_dx = &poly_dx_f32;
    return k;
  }();
  return t;
}

const Kernels<double>& avx2_f64() {
  static const Kernels<double> t = [] {
    Kernels<double> k;
    k.axpby = &axpby_f64;
    k.gemm_nn = &gemm_nn_f64;
    k.gemm_nt = &gemm_nt_f64;
    k.sum_squares = &sum_squares_f64;
    k.power_sums = &power_sums_t<double>;
    k.poly_backward_sums = &poly_backward_sums_t<double>;
    k.poly_combine = &poly_combine_f64;
    k.poly_dx = &poly_dx_f64;
    return k;
  }();
  return t;
}

}  // namespace parmuon::kernels::detail

#endif  // x86-64
