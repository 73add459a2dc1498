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

#include <array>
#include <cstdint>

#include "parmuon/matrix.hpp"

namespace parmuon::polynorm {

/// PolyNorm: out = sum_{i=1..3} w_i * rmsnorm(x^i) + bias, applied per row,
/// with rmsnorm(u) = u / sqrt(mean(u^2) + eps).
struct PolyNormParams {
  std::array<double, 3> weights = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  double bias = 0.0;
  double eps = 1e-6;

  void validate() const;
};

/// Logical element traffic of one forward/backward call. The counts measure
/// sweeps over buffers (the proxy for memory-bound behavior), not cache
/// behavior; both fields only ever grow within a call.
struct TrafficCounter {
  std::uint64_t elements_read = 0;
  std::uint64_t elements_written = 0;
};

/// Multi-pass composition: per power, materialize x^i, reduce it, normalize
/// it, then combine the three normalized buffers. At least three full read
/// sweeps over x.
template <typename T>
MatrixT<T> polynorm_naive(const MatrixT<T>& x, const PolyNormParams& params,
                          TrafficCounter* counter = nullptr);

/// Single-pass power sums followed by one combining sweep; at most two read
/// sweeps over x. Same result as polynorm_naive up to summation-order
/// rounding.
template <typename T>
MatrixT<T> polynorm_fused(const MatrixT<T>& x, const PolyNormParams& params,
                          TrafficCounter* counter = nullptr);

/// polynorm(x) * gate without materializing the intermediate activation in a
/// separate full pass.
template <typename T>
MatrixT<T> polynorm_mul_fused(const MatrixT<T>& x, const MatrixT<T>& gate,
                              const PolyNormParams& params,
                              TrafficCounter* counter = nullptr);

template <typename T>
struct PolyNormGrads {
  MatrixT<T> dx;
  std::array<double, 3> dweights = {0.0, 0.0, 0.0};
  double dbias = 0.0;
};

/// Exact analytic gradients; two read sweeps over (x, upstream).
template <typename T>
PolyNormGrads<T> polynorm_backward(const MatrixT<T>& x, const MatrixT<T>& upstream,
                                   const PolyNormParams& params,
                                   TrafficCounter* counter = nullptr);

/// Same gradients computed from materialized per-power intermediates; the
/// traffic baseline for the fused backward.
template <typename T>
PolyNormGrads<T> polynorm_backward_naive(const MatrixT<T>& x, const MatrixT<T>& upstream,
                                         const PolyNormParams& params,
                                         TrafficCounter* counter = nullptr);

}  // namespace parmuon::polynorm
