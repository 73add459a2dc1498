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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "parmuon/polynorm.hpp"

using namespace parmuon;
using namespace parmuon::polynorm;

namespace {

PolyNormParams test_params() {
  PolyNormParams p;
  p.weights = {0.7, -0.3, 0.5};
  p.bias = 0.25;
  p.eps = 1e-6;
  return p;
}

// Independent two-loop reference: per row, per power, straight from the
// definition without any shared code with the library paths.
MatrixF64 reference(const MatrixF64& x, const PolyNormParams& p) {
  MatrixF64 out(x.rows, x.cols);
  for (index_t r = 0; r < x.rows; ++r) {
    for (index_t c = 0; c < x.cols; ++c) {
      out(r, c) = p.bias;
    }
    for (int power = 1; power <= 3; ++power) {
      double mean_sq = 0.0;
      for (index_t c = 0; c < x.cols; ++c) {
        const double t = std::pow(x(r, c), power);
        mean_sq += t * t;
      }
      mean_sq /= static_cast<double>(x.cols);
      const double rms = std::sqrt(mean_sq + p.eps);
      for (index_t c = 0; c < x.cols; ++c) {
        out(r, c) += p.weights[static_cast<std::size_t>(power - 1)] *
                     std::pow(x(r, c), power) / rms;
      }
    }
  }
  return out;
}

MatrixF64 random_matrix(index_t rows, index_t cols, std::uint64_t seed) {
  MatrixF64 m(rows, cols);
  fill_normal(m, seed);
  return m;
}

}  // namespace

TEST_CASE("constant positive row approaches the weight sum") {
  PolyNormParams p = test_params();
  p.eps = 1e-15;
  MatrixF64 x(1, 64);
  for (double& v : x.data) v = 3.5;
  const MatrixF64 out = polynorm_naive(x, p);
  const double expected = p.weights[0] + p.weights[1] + p.weights[2] + p.bias;
  for (const double v : out.data) CHECK(v == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("zero row produces the bias") {
  const PolyNormParams p = test_params();
  const MatrixF64 x(3, 16);
  for (const auto fn : {&polynorm_naive<double>, &polynorm_fused<double>}) {
    const MatrixF64 out = (*fn)(x, p, nullptr);
    for (const double v : out.data) CHECK(v == doctest::Approx(p.bias).epsilon(1e-15));
  }
}

TEST_CASE("naive path matches the independent reference") {
  const PolyNormParams p = test_params();
  const MatrixF64 x = random_matrix(4, 8, 21);
  const MatrixF64 out = polynorm_naive(x, p);
  const MatrixF64 ref = reference(x, p);
  CHECK(max_abs_diff(out, ref) < 1e-12);
}

TEST_CASE("fused equals naive across shapes") {
  const PolyNormParams p = test_params();
  for (const index_t rows : {1, 2, 5, 64}) {
    for (const index_t cols : {1, 2, 3, 17, 64, 257, 1024, 4096}) {
      const MatrixF64 x = random_matrix(rows, cols, static_cast<std::uint64_t>(rows * 10007 + cols));
      const MatrixF64 a = polynorm_naive(x, p);
      const MatrixF64 b = polynorm_fused(x, p);
      CHECK(max_abs_diff(a, b) < 1e-12);
    }
  }
  // 32-bit tolerance
  MatrixF32 x32(8, 1024);
  fill_normal(x32, 77);
  const MatrixF32 a32 = polynorm_naive(x32, p);
  const MatrixF32 b32 = polynorm_fused(x32, p);
  CHECK(max_abs_diff(a32, b32) < 1e-6);
}

TEST_CASE("traffic counters separate the two forward paths") {
  const PolyNormParams p = test_params();
  const index_t d = 1024;
  const MatrixF64 x = random_matrix(1, d, 3);

  TrafficCounter naive_c;
  polynorm_naive(x, p, &naive_c);
  CHECK(naive_c.elements_read >= 3 * static_cast<std::uint64_t>(d));

  TrafficCounter fused_c;
  polynorm_fused(x, p, &fused_c);
  CHECK(fused_c.elements_read <= 2 * static_cast<std::uint64_t>(d) + 16);

  // reduction factor for realistic feature sizes
  for (const index_t dim : {64, 256, 4096}) {
    const MatrixF64 batch = random_matrix(4, dim, static_cast<std::uint64_t>(dim));
    TrafficCounter nc, fc;
    polynorm_naive(batch, p, &nc);
    polynorm_fused(batch, p, &fc);
    CHECK(3 * fc.elements_read <= 2 * nc.elements_read);
  }
}

TEST_CASE("polynorm_mul_fused") {
  const PolyNormParams p = test_params();
  const MatrixF64 x = random_matrix(4, 96, 5);

  SUBCASE("all-ones gate reduces to polynorm_fused") {
    MatrixF64 gate(4, 96);
    for (double& v : gate.data) v = 1.0;
    const MatrixF64 a = polynorm_mul_fused(x, gate, p);
    const MatrixF64 b = polynorm_fused(x, p);
    CHECK(max_abs_diff(a, b) == 0.0);
  }

  SUBCASE("zero gate zeroes the output") {
    const MatrixF64 gate(4, 96);
    const MatrixF64 out = polynorm_mul_fused(x, gate, p);
    for (const double v : out.data) CHECK(v == 0.0);
  }

  SUBCASE("random gate matches the composed naive path") {
    const MatrixF64 gate = random_matrix(4, 96, 6);
    MatrixF64 composed = polynorm_naive(x, p);
    for (std::size_t i = 0; i < composed.data.size(); ++i) composed.data[i] *= gate.data[i];
    const MatrixF64 fused = polynorm_mul_fused(x, gate, p);
    CHECK(max_abs_diff(composed, fused) < 1e-12);
  }

  SUBCASE("shape mismatch is an error") {
    const MatrixF64 gate(4, 95);
    CHECK_THROWS_AS(polynorm_mul_fused(x, gate, p), std::invalid_argument);
  }
}

TEST_CASE("backward basics") {
  const PolyNormParams p = test_params();
  const MatrixF64 x = random_matrix(2, 24, 30);

  SUBCASE("zero upstream gives zero gradients") {
    const MatrixF64 upstream(2, 24);
    const auto grads = polynorm_backward(x, upstream, p);
    for (const double v : grads.dx.data) CHECK(v == 0.0);
    for (const double v : grads.dweights) CHECK(v == 0.0);
    CHECK(grads.dbias == 0.0);
  }

  SUBCASE("dbias sums the upstream gradient") {
    const MatrixF64 upstream = random_matrix(2, 24, 31);
    const auto grads = polynorm_backward(x, upstream, p);
    double total = 0.0;
    for (const double v : upstream.data) total += v;
    CHECK(grads.dbias == doctest::Approx(total).epsilon(1e-12));
  }

  SUBCASE("fused and naive backward agree") {
    const MatrixF64 upstream = random_matrix(2, 24, 32);
    const auto a = polynorm_backward(x, upstream, p);
    const auto b = polynorm_backward_naive(x, upstream, p);
    CHECK(max_abs_diff(a.dx, b.dx) < 1e-12);
    for (int i = 0; i < 3; ++i) {
      CHECK(a.dweights[static_cast<std::size_t>(i)] ==
            doctest::Approx(b.dweights[static_cast<std::size_t>(i)]).epsilon(1e-12));
    }
    CHECK(a.dbias == doctest::Approx(b.dbias).epsilon(1e-12));
  }

  SUBCASE("backward uses fewer reads than the naive composition") {
    const MatrixF64 upstream = random_matrix(2, 24, 33);
    TrafficCounter fused_c, naive_c;
    polynorm_backward(x, upstream, p, &fused_c);
    polynorm_backward_naive(x, upstream, p, &naive_c);
    CHECK(3 * fused_c.elements_read <= 2 * naive_c.elements_read);
  }
}

TEST_CASE("backward matches central finite differences") {
  const PolyNormParams p = test_params();
  const double h = 1e-5;
  std::mt19937_64 eng(55);

  for (int instance = 0; instance < 50; ++instance) {
    const MatrixF64 x = random_matrix(2, 8, eng());
    const MatrixF64 upstream = random_matrix(2, 8, eng());
    const auto grads = polynorm_backward(x, upstream, p);

    const auto loss = [&](const MatrixF64& input) {
      const MatrixF64 out = polynorm_naive(input, p);
      double total = 0.0;
      for (std::size_t i = 0; i < out.data.size(); ++i) total += out.data[i] * upstream.data[i];
      return total;
    };

    double num = 0.0, denom = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      MatrixF64 plus = x;
      MatrixF64 minus = x;
      plus.data[i] += h;
      minus.data[i] -= h;
      const double fd = (loss(plus) - loss(minus)) / (2.0 * h);
      num += (fd - grads.dx.data[i]) * (fd - grads.dx.data[i]);
      denom += fd * fd;
    }
    CHECK(std::sqrt(num) <= 1e-4 * std::max(1.0, std::sqrt(denom)));
  }
}

TEST_CASE("degree-zero homogeneity in the small-eps limit") {
  PolyNormParams p = test_params();
  p.eps = 1e-12;
  const MatrixF64 x = random_matrix(3, 128, 62);
  const MatrixF64 base = polynorm_fused(x, p);
  for (const double c : {3.0, 0.25}) {
    MatrixF64 scaled = x;
    for (double& v : scaled.data) v *= c;
    const MatrixF64 out = polynorm_fused(scaled, p);
    CHECK(max_abs_diff(out, base) < 1e-6);
  }
}

TEST_CASE("non-finite input is rejected") {
  const PolyNormParams p = test_params();
  MatrixF64 x(1, 4);
  x(0, 2) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(polynorm_naive(x, p), std::invalid_argument);
  CHECK_THROWS_AS(polynorm_fused(x, p), std::invalid_argument);
  const MatrixF64 ok(1, 4);
  CHECK_THROWS_AS(polynorm_backward(x, ok, p), std::invalid_argument);
}
