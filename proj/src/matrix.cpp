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

#include "parmuon/matrix.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "parmuon/kernels.hpp"

namespace parmuon {

void require(bool cond, const std::string& message) {
  if (!cond) throw std::invalid_argument(message);
}

template <typename T>
MatrixT<T>::MatrixT(index_t r, index_t c) : rows(r), cols(c) {
  require(r >= 1 && c >= 1, "matrix dimensions must be positive, got " +
                                std::to_string(r) + "x" + std::to_string(c));
  data.assign(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), T(0));
}

template <typename T>
MatrixT<T>::MatrixT(index_t r, index_t c, std::vector<T> values)
    : rows(r), cols(c), data(std::move(values)) {
  require(r >= 1 && c >= 1, "matrix dimensions must be positive, got " +
                                std::to_string(r) + "x" + std::to_string(c));
  require(data.size() == static_cast<std::size_t>(r) * static_cast<std::size_t>(c),
          "matrix data length does not match dimensions");
}

template <typename T>
bool MatrixT<T>::all_finite() const {
  for (const T v : data) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

template <typename T>
MatrixT<T> transpose(const MatrixT<T>& m) {
  MatrixT<T> out(m.cols, m.rows);
  for (index_t r = 0; r < m.rows; ++r) {
    for (index_t c = 0; c < m.cols; ++c) {
      out(c, r) = m(r, c);
    }
  }
  return out;
}

template <typename T>
MatrixT<T> copy_slice(const MatrixT<T>& m, index_t row_off, index_t row_ext,
                      index_t col_off, index_t col_ext) {
  require(row_off >= 0 && col_off >= 0 && row_ext >= 1 && col_ext >= 1 &&
              row_off + row_ext <= m.rows && col_off + col_ext <= m.cols,
          "slice out of bounds");
  MatrixT<T> out(row_ext, col_ext);
  for (index_t r = 0; r < row_ext; ++r) {
    const T* src = m.data.data() + (row_off + r) * m.cols + col_off;
    T* dst = out.data.data() + r * col_ext;
    std::copy(src, src + col_ext, dst);
  }
  return out;
}

template <typename T>
void paste_slice(MatrixT<T>& dst, const MatrixT<T>& src, index_t row_off, index_t col_off) {
  require(row_off >= 0 && col_off >= 0 && row_off + src.rows <= dst.rows &&
              col_off + src.cols <= dst.cols,
          "paste out of bounds");
  for (index_t r = 0; r < src.rows; ++r) {
    const T* s = src.data.data() + r * src.cols;
    T* d = dst.data.data() + (row_off + r) * dst.cols + col_off;
    std::copy(s, s + src.cols, d);
  }
}

template <typename T>
double frobenius_norm(const MatrixT<T>& m) {
  return std::sqrt(kernels::table<T>().sum_squares(m.data.size(), m.data.data()));
}

template <typename T>
double max_abs_diff(const MatrixT<T>& a, const MatrixT<T>& b) {
  require(a.same_shape(b), "max_abs_diff: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
    if (d > worst) worst = d;
  }
  return worst;
}

namespace {

inline double unit_open(std::uint64_t bits) {
  // (0,1): 53 significant bits shifted into the mantissa range, offset by half an ulp.
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace

template <typename T>
void fill_normal(MatrixT<T>& m, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  const std::size_t n = m.data.size();
  const double two_pi = 6.283185307179586476925286766559;
  std::size_t i = 0;
  while (i < n) {
    const double u1 = unit_open(eng());
    const double u2 = unit_open(eng());
    const double r = std::sqrt(-2.0 * std::log(u1));
    m.data[i++] = static_cast<T>(r * std::cos(two_pi * u2));
    if (i < n) {
      m.data[i++] = static_cast<T>(r * std::sin(two_pi * u2));
    }
  }
}

template struct MatrixT<float>;
template struct MatrixT<double>;
template MatrixT<float> transpose(const MatrixT<float>&);
template MatrixT<double> transpose(const MatrixT<double>&);
template MatrixT<float> copy_slice(const MatrixT<float>&, index_t, index_t, index_t, index_t);
template MatrixT<double> copy_slice(const MatrixT<double>&, index_t, index_t, index_t, index_t);
template void paste_slice(MatrixT<float>&, const MatrixT<float>&, index_t, index_t);
template void paste_slice(MatrixT<double>&, const MatrixT<double>&, index_t, index_t);
template double frobenius_norm(const MatrixT<float>&);
template double frobenius_norm(const MatrixT<double>&);
template double max_abs_diff(const MatrixT<float>&, const MatrixT<float>&);
template double max_abs_diff(const MatrixT<double>&, const MatrixT<double>&);
template void fill_normal(MatrixT<float>&, std::uint64_t);
template void fill_normal(MatrixT<double>&, std::uint64_t);

}  // namespace parmuon
