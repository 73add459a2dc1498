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

#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace parmuon::kernels {

/// Arithmetic inner loops used by the matrix/activation modules.
///
/// Each entry has a scalar reference implementation and, on x86-64, an AVX2+FMA
/// variant. The active table is chosen once at startup (cpuid, overridable via
/// set_backend or PARMUON_KERNELS=scalar|avx2) and stays fixed for the process,
/// so repeated runs on one machine are bit-identical. All reductions accumulate
/// in double regardless of element type and combine partial sums in a fixed
/// order, so each backend is deterministic on its own.
template <typename T>
struct Kernels {
  // y[i] = a*x[i] + b*y[i]
  void (*axpby)(std::size_t n, T a, const T* x, T b, T* y);

  // Row-major C(m x n) = alpha * A(m x k) * B(k x n) + beta * C
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, T alpha,
                  const T* a, const T* b, T beta, T* c);

  // Row-major C(m x n) = alpha * A(m x k) * B(n x k)^T + beta * C
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, T alpha,
                  const T* a, const T* b, T beta, T* c);

  // sum over i of x[i]^2
  double (*sum_squares)(std::size_t n, const T* x);

  // out = { sum x^2, sum x^4, sum x^6 }
  void (*power_sums)(std::size_t n, const T* x, double out[3]);

  // One sweep over (x, g):
  // out = { sum x^2, sum x^4, sum x^6, sum g, sum g*x, sum g*x^2, sum g*x^3 }
  void (*poly_backward_sums)(std::size_t n, const T* x, const T* g, double out[7]);

  // out[i] = (c1*x + c2*x^2 + c3*x^3 + bias) * (gate ? gate[i] : 1)
  void (*poly_combine)(std::size_t n, const T* x, const T* gate,
                       const double coeff[3], double bias, T* out);

  // dx[i] = g[i]*(a1 + a2*x + a3*x^2) - (b1*x + b2*x^3 + b3*x^5)
  void (*poly_dx)(std::size_t n, const T* x, const T* g, const double a[3],
                  const double b[3], T* dx);
};

enum class Backend { kScalar, kAvx2 };

std::string_view backend_name(Backend b);

/// Best backend this CPU supports.
Backend detect_backend();

/// Table currently in effect (initialized lazily from PARMUON_KERNELS or cpuid).
Backend active_backend();

/// Force a backend; throws std::runtime_error if unsupported on this machine.
void set_backend(Backend b);

const Kernels<float>& f32();
const Kernels<double>& f64();

template <typename T>
const Kernels<T>& table() {
  if constexpr (sizeof(T) == sizeof(float)) {
    return f32();
  } else {
    return f64();
  }
}

namespace detail {
const Kernels<float>& scalar_f32();
const Kernels<double>& scalar_f64();
#if defined(__x86_64__) || defined(_M_X64)
const Kernels<float>& avx2_f32();
const Kernels<double>& avx2_f64();
#endif
}  // namespace detail

}  // namespace parmuon::kernels
