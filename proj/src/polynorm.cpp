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

#include "parmuon/polynorm.hpp"

#include <cmath>
#include <stdexcept>

#include "parmuon/kernels.hpp"

namespace parmuon::polynorm {

void PolyNormParams::validate() const {
  require(eps > 0.0, "polynorm eps must be positive");
}

namespace {

void count_read(TrafficCounter* c, std::uint64_t n) {
  if (c != nullptr) c->elements_read += n;
}

void count_write(TrafficCounter* c, std::uint64_t n) {
  if (c != nullptr) c->elements_written += n;
}

template <typename T>
void check_input(const MatrixT<T>& x, const PolyNormParams& params, const char* op) {
  params.validate();
  if (!x.all_finite()) {
    throw std::invalid_argument(std::string(op) + ": non-finite input");
  }
}

double rms_of(double sum_sq, index_t dim, double eps) {
  return std::sqrt(sum_sq / static_cast<double>(dim) + eps);
}

}  // namespace

// The naive paths materialize per-power intermediates and accumulate in
// double (compute precision), rounding to the element type once at the end,
// the same storage/compute split the fused kernels use.
template <typename T>
MatrixT<T> polynorm_naive(const MatrixT<T>& x, const PolyNormParams& params,
                          TrafficCounter* counter) {
  check_input(x, params, "polynorm_naive");
  const index_t d = x.cols;
  MatrixT<T> out(x.rows, x.cols);
  std::vector<double> power(static_cast<std::size_t>(d));
  std::vector<double> acc(static_cast<std::size_t>(d));

  for (index_t r = 0; r < x.rows; ++r) {
    const T* row = x.data.data() + r * d;
    T* out_row = out.data.data() + r * d;

    // acc = bias
    for (index_t j = 0; j < d; ++j) acc[static_cast<std::size_t>(j)] = params.bias;
    count_write(counter, d);

    for (int p = 1; p <= 3; ++p) {
      // pass 1: materialize x^p
      for (index_t j = 0; j < d; ++j) {
        double v = static_cast<double>(row[j]);
        if (p >= 2) v *= static_cast<double>(row[j]);
        if (p == 3) v *= static_cast<double>(row[j]);
        power[static_cast<std::size_t>(j)] = v;
      }
      count_read(counter, d);
      count_write(counter, d);

      // pass 2: mean of squares
      double sum_sq = 0.0;
      for (index_t j = 0; j < d; ++j) {
        const double v = power[static_cast<std::size_t>(j)];
        sum_sq += v * v;
      }
      count_read(counter, d);

      // pass 3: acc += w_p * power / rms
      const double coeff = params.weights[p - 1] / rms_of(sum_sq, d, params.eps);
      for (index_t j = 0; j < d; ++j) {
        acc[static_cast<std::size_t>(j)] += coeff * power[static_cast<std::size_t>(j)];
      }
      count_read(counter, 2 * static_cast<std::uint64_t>(d));
      count_write(counter, d);
    }

    // store pass
    for (index_t j = 0; j < d; ++j) {
      out_row[j] = static_cast<T>(acc[static_cast<std::size_t>(j)]);
    }
    count_read(counter, d);
    count_write(counter, d);
  }
  return out;
}

namespace {

// Shared fused forward: one power-sum sweep, one combining sweep, optional gate.
template <typename T>
MatrixT<T> fused_forward(const MatrixT<T>& x, const MatrixT<T>* gate,
                         const PolyNormParams& params, TrafficCounter* counter) {
  const auto& k = kernels::table<T>();
  const index_t d = x.cols;
  MatrixT<T> out(x.rows, x.cols);

  for (index_t r = 0; r < x.rows; ++r) {
    const T* row = x.data.data() + r * d;
    const T* gate_row = gate != nullptr ? gate->data.data() + r * d : nullptr;
    T* out_row = out.data.data() + r * d;

    double sums[3];
    k.power_sums(static_cast<std::size_t>(d), row, sums);
    count_read(counter, d);

    double coeff[3];
    for (int p = 0; p < 3; ++p) {
      coeff[p] = params.weights[static_cast<std::size_t>(p)] / rms_of(sums[p], d, params.eps);
    }
    k.poly_combine(static_cast<std::size_t>(d), row, gate_row, coeff, params.bias, out_row);
    count_read(counter, d + (gate_row != nullptr ? d : 0));
    count_write(counter, d);
  }
  return out;
}

}  // namespace

template <typename T>
MatrixT<T> polynorm_fused(const MatrixT<T>& x, const PolyNormParams& params,
                          TrafficCounter* counter) {
  check_input(x, params, "polynorm_fused");
  return fused_forward<T>(x, nullptr, params, counter);
}

template <typename T>
MatrixT<T> polynorm_mul_fused(const MatrixT<T>& x, const MatrixT<T>& gate,
                              const PolyNormParams& params, TrafficCounter* counter) {
  check_input(x, params, "polynorm_mul_fused");
  require(x.same_shape(gate), "polynorm_mul_fused: gate shape mismatch");
  return fused_forward<T>(x, &gate, params, counter);
}

template <typename T>
PolyNormGrads<T> polynorm_backward(const MatrixT<T>& x, const MatrixT<T>& upstream,
                                   const PolyNormParams& params, TrafficCounter* counter) {
  check_input(x, params, "polynorm_backward");
  require(x.same_shape(upstream), "polynorm_backward: upstream shape mismatch");
  if (!upstream.all_finite()) {
    throw std::invalid_argument("polynorm_backward: non-finite upstream gradient");
  }

  const auto& k = kernels::table<T>();
  const index_t d = x.cols;
  PolyNormGrads<T> grads;
  grads.dx = MatrixT<T>(x.rows, x.cols);

  for (index_t r = 0; r < x.rows; ++r) {
    const T* row = x.data.data() + r * d;
    const T* g_row = upstream.data.data() + r * d;
    T* dx_row = grads.dx.data.data() + r * d;

    // sweep 1: power sums + gradient dots
    double s[7];
    k.poly_backward_sums(static_cast<std::size_t>(d), row, g_row, s);
    count_read(counter, 2 * static_cast<std::uint64_t>(d));

    grads.dbias += s[3];
    double a[3], b[3];
    for (int p = 0; p < 3; ++p) {
      const double rms = rms_of(s[p], d, params.eps);
      const double dot = s[4 + p];
      const double w = params.weights[static_cast<std::size_t>(p)];
      grads.dweights[static_cast<std::size_t>(p)] += dot / rms;
      a[p] = (p + 1) * w / rms;
      b[p] = (p + 1) * w * dot / (static_cast<double>(d) * rms * rms * rms);
    }

    // sweep 2: elementwise dx
    k.poly_dx(static_cast<std::size_t>(d), row, g_row, a, b, dx_row);
    count_read(counter, 2 * static_cast<std::uint64_t>(d));
    count_write(counter, d);
  }
  return grads;
}

template <typename T>
PolyNormGrads<T> polynorm_backward_naive(const MatrixT<T>& x, const MatrixT<T>& upstream,
                                         const PolyNormParams& params,
                                         TrafficCounter* counter) {
  check_input(x, params, "polynorm_backward_naive");
  require(x.same_shape(upstream), "polynorm_backward_naive: upstream shape mismatch");
  if (!upstream.all_finite()) {
    throw std::invalid_argument("polynorm_backward_naive: non-finite upstream gradient");
  }

  const index_t d = x.cols;
  PolyNormGrads<T> grads;
  grads.dx = MatrixT<T>(x.rows, x.cols);
  std::vector<double> power(static_cast<std::size_t>(d));
  std::vector<double> dt(static_cast<std::size_t>(d));
  std::vector<double> dx_acc(static_cast<std::size_t>(d));

  for (index_t r = 0; r < x.rows; ++r) {
    const T* row = x.data.data() + r * d;
    const T* g_row = upstream.data.data() + r * d;
    T* dx_row = grads.dx.data.data() + r * d;

    for (index_t j = 0; j < d; ++j) dx_acc[static_cast<std::size_t>(j)] = 0.0;
    count_write(counter, d);

    double dbias_row = 0.0;
    for (index_t j = 0; j < d; ++j) dbias_row += static_cast<double>(g_row[j]);
    count_read(counter, d);
    grads.dbias += dbias_row;

    for (int p = 1; p <= 3; ++p) {
      for (index_t j = 0; j < d; ++j) {
        double v = static_cast<double>(row[j]);
        if (p >= 2) v *= static_cast<double>(row[j]);
        if (p == 3) v *= static_cast<double>(row[j]);
        power[static_cast<std::size_t>(j)] = v;
      }
      count_read(counter, d);
      count_write(counter, d);

      double sum_sq = 0.0;
      for (index_t j = 0; j < d; ++j) {
        const double v = power[static_cast<std::size_t>(j)];
        sum_sq += v * v;
      }
      count_read(counter, d);

      double dot = 0.0;
      for (index_t j = 0; j < d; ++j) {
        dot += static_cast<double>(g_row[j]) * power[static_cast<std::size_t>(j)];
      }
      count_read(counter, 2 * static_cast<std::uint64_t>(d));

      const double rms = rms_of(sum_sq, d, params.eps);
      const double w = params.weights[static_cast<std::size_t>(p - 1)];
      grads.dweights[static_cast<std::size_t>(p - 1)] += dot / rms;

      // dt = g*w/rms - t*(w*dot/(d*rms^3))
      const double ca = w / rms;
      const double cb = w * dot / (static_cast<double>(d) * rms * rms * rms);
      for (index_t j = 0; j < d; ++j) {
        dt[static_cast<std::size_t>(j)] =
            ca * static_cast<double>(g_row[j]) - cb * power[static_cast<std::size_t>(j)];
      }
      count_read(counter, 2 * static_cast<std::uint64_t>(d));
      count_write(counter, d);

      // dx += dt * p * x^(p-1)
      for (index_t j = 0; j < d; ++j) {
        double chain = static_cast<double>(p);
        if (p >= 2) chain *= static_cast<double>(row[j]);
        if (p == 3) chain *= static_cast<double>(row[j]);
        dx_acc[static_cast<std::size_t>(j)] += dt[static_cast<std::size_t>(j)] * chain;
      }
      count_read(counter, 3 * static_cast<std::uint64_t>(d));
      count_write(counter, d);
    }

    for (index_t j = 0; j < d; ++j) {
      dx_row[j] = static_cast<T>(dx_acc[static_cast<std::size_t>(j)]);
    }
    count_read(counter, d);
    count_write(counter, d);
  }
  return grads;
}

template MatrixT<float> polynorm_naive(const MatrixT<float>&, const PolyNormParams&, TrafficCounter*);
template MatrixT<double> polynorm_naive(const MatrixT<double>&, const PolyNormParams&, TrafficCounter*);
template MatrixT<float> polynorm_fused(const MatrixT<float>&, const PolyNormParams&, TrafficCounter*);
template MatrixT<double> polynorm_fused(const MatrixT<double>&, const PolyNormParams&, TrafficCounter*);
template MatrixT<float> polynorm_mul_fused(const MatrixT<float>&, const MatrixT<float>&,
                                           const PolyNormParams&, TrafficCounter*);
template MatrixT<double> polynorm_mul_fused(const MatrixT<double>&, const MatrixT<double>&,
                                            const PolyNormParams&, TrafficCounter*);
template PolyNormGrads<float> polynorm_backward(const MatrixT<float>&, const MatrixT<float>&,
                                                const PolyNormParams&, TrafficCounter*);
template PolyNormGrads<double> polynorm_backward(const MatrixT<double>&, const MatrixT<double>&,
                                                 const PolyNormParams&, TrafficCounter*);
template PolyNormGrads<float> polynorm_backward_naive(const MatrixT<float>&, const MatrixT<float>&,
                                                      const PolyNormParams&, TrafficCounter*);
template PolyNormGrads<double> polynorm_backward_naive(const MatrixT<double>&,
                                                       const MatrixT<double>&,
                                                       const PolyNormParams&, TrafficCounter*);

}  // namespace parmuon::polynorm
