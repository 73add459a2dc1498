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

#include <cstdint>
#include <string>
#include <vector>

namespace parmuon {

using index_t = std::int64_t;

/// Dense row-major 2-D array. Dimensions are strictly positive and
/// data.size() == rows*cols at all times.
template <typename T>
struct MatrixT {
  using value_type = T;

  index_t rows = 0;
  index_t cols = 0;
  std::vector<T> data;

  MatrixT() = default;
  MatrixT(index_t r, index_t c);
  MatrixT(index_t r, index_t c, std::vector<T> values);

  static MatrixT zeros(index_t r, index_t c) { return MatrixT(r, c); }

  index_t size() const { return rows * cols; }
  bool same_shape(const MatrixT& o) const { return rows == o.rows && cols == o.cols; }

  T& operator()(index_t r, index_t c) { return data[static_cast<std::size_t>(r * cols + c)]; }
  const T& operator()(index_t r, index_t c) const {
    return data[static_cast<std::size_t>(r * cols + c)];
  }

  bool all_finite() const;
};

using MatrixF32 = MatrixT<float>;
using MatrixF64 = MatrixT<double>;

template <typename T>
MatrixT<T> transpose(const MatrixT<T>& m);

template <typename T>
MatrixT<T> copy_slice(const MatrixT<T>& m, index_t row_off, index_t row_ext,
                      index_t col_off, index_t col_ext);

template <typename T>
void paste_slice(MatrixT<T>& dst, const MatrixT<T>& src, index_t row_off, index_t col_off);

template <typename T>
double frobenius_norm(const MatrixT<T>& m);

template <typename T>
double max_abs_diff(const MatrixT<T>& a, const MatrixT<T>& b);

/// Deterministic standard-normal fill: mt19937_64 + Box-Muller on explicit
/// 53-bit uniforms, so the stream does not depend on the standard library's
/// distribution implementation.
template <typename T>
void fill_normal(MatrixT<T>& m, std::uint64_t seed);

void require(bool cond, const std::string& message);

}  // namespace parmuon
