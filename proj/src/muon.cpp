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

#include "parmuon/muon.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "parmuon/kernels.hpp"

namespace parmuon {

void MuonHyper::validate() const {
  require(momentum_beta >= 0.0 && momentum_beta < 1.0, "momentum_beta must be in [0,1)");
  require(lr > 0.0, "lr must be positive");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(ns_iterations >= 1, "ns_iterations must be >= 1");
  require(epsilon > 0.0, "epsilon must be positive");
}

double update_scale(index_t full_rows, index_t full_cols) {
  const double ratio = static_cast<double>(full_rows) / static_cast<double>(full_cols);
  return std::sqrt(ratio > 1.0 ? ratio : 1.0);
}

namespace {

[[noreturn]] void throw_nonfinite(std::string_view what, std::string_view name) {
  std::string msg = "non-finite values in ";
  msg += what;
  if (!name.empty()) {
    msg += " for parameter \"";
    msg += name;
    msg += "\"";
  }
  throw std::invalid_argument(msg);
}

}  // namespace

template <typename T>
MatrixT<T> newton_schulz(const MatrixT<T>& g, const MuonHyper& hyper,
                         std::string_view name) {
  hyper.validate();
  require(g.rows >= 1 && g.cols >= 1, "newton_schulz: degenerate shape");
  if (!g.all_finite()) throw_nonfinite("gradient", name);

  const auto& k = kernels::table<T>();
  const bool tall = g.rows > g.cols;

  const double norm = frobenius_norm(g) + hyper.epsilon;
  const T inv_norm = static_cast<T>(1.0 / norm);

  MatrixT<T> x = tall ? transpose(g) : g;
  for (T& v : x.data) v *= inv_norm;

  const index_t n = x.rows;  // n <= m
  const index_t m = x.cols;
  const T a = static_cast<T>(hyper.ns_coefficients[0]);
  const T b = static_cast<T>(hyper.ns_coefficients[1]);
  const T c = static_cast<T>(hyper.ns_coefficients[2]);

  MatrixT<T> gram(n, n);
  MatrixT<T> poly(n, n);
  MatrixT<T> next(n, m);
  for (int it = 0; it < hyper.ns_iterations; ++it) {
    // A = X * X^T
    k.gemm_nt(n, n, m, T(1), x.data.data(), x.data.data(), T(0), gram.data.data());
    // P = b*A + c*A*A
    k.gemm_nn(n, n, n, c, gram.data.data(), gram.data.data(), T(0), poly.data.data());
    k.axpby(gram.data.size(), b, gram.data.data(), T(1), poly.data.data());
    // X <- a*X + P*X
    next.data = x.data;
    k.gemm_nn(n, m, n, T(1), poly.data.data(), x.data.data(), a, next.data.data());
    std::swap(x, next);
  }

  MatrixT<T> out = tall ? transpose(x) : std::move(x);
  if (!out.all_finite()) throw_nonfinite("newton_schulz result", name);
  return out;
}

template <typename T>
std::pair<MatrixT<T>, MatrixT<T>> momentum_update(const MatrixT<T>& m,
                                                  const MatrixT<T>& g,
                                                  const MuonHyper& hyper) {
  require(m.same_shape(g), "momentum_update: shape mismatch between momentum " +
                               std::to_string(m.rows) + "x" + std::to_string(m.cols) +
                               " and gradient " + std::to_string(g.rows) + "x" +
                               std::to_string(g.cols));
  const auto& k = kernels::table<T>();
  const T beta = static_cast<T>(hyper.momentum_beta);

  MatrixT<T> momentum = g;  // m' = 1*g + beta*m
  k.axpby(momentum.data.size(), beta, m.data.data(), T(1), momentum.data.data());

  if (!hyper.nesterov) {
    MatrixT<T> eff = momentum;
    return {std::move(momentum), std::move(eff)};
  }
  MatrixT<T> eff = g;  // g_eff = g + beta*m'
  k.axpby(eff.data.size(), beta, momentum.data.data(), T(1), eff.data.data());
  return {std::move(momentum), std::move(eff)};
}

template <typename T>
MatrixT<T> apply_update(const MatrixT<T>& p, const MatrixT<T>& u,
                        const MuonHyper& hyper, index_t full_rows,
                        index_t full_cols) {
  require(p.same_shape(u), "apply_update: shape mismatch between parameter " +
                               std::to_string(p.rows) + "x" + std::to_string(p.cols) +
                               " and update " + std::to_string(u.rows) + "x" +
                               std::to_string(u.cols));
  require(full_rows >= 1 && full_cols >= 1, "apply_update: full shape must be positive");
  const auto& k = kernels::table<T>();
  const T decay = static_cast<T>(1.0 - hyper.lr * hyper.weight_decay);
  const T step = static_cast<T>(-hyper.lr * update_scale(full_rows, full_cols));

  MatrixT<T> out = p;  // p' = decay*p + step*u
  k.axpby(out.data.size(), step, u.data.data(), decay, out.data.data());
  return out;
}

template MatrixT<float> newton_schulz(const MatrixT<float>&, const MuonHyper&, std::string_view);
template MatrixT<double> newton_schulz(const MatrixT<double>&, const MuonHyper&, std::string_view);
template std::pair<MatrixT<float>, MatrixT<float>> momentum_update(const MatrixT<float>&,
                                                                   const MatrixT<float>&,
                                                                   const MuonHyper&);
template std::pair<MatrixT<double>, MatrixT<double>> momentum_update(const MatrixT<double>&,
                                                                     const MatrixT<double>&,
                                                                     const MuonHyper&);
template MatrixT<float> apply_update(const MatrixT<float>&, const MatrixT<float>&,
                                     const MuonHyper&, index_t, index_t);
template MatrixT<double> apply_update(const MatrixT<double>&, const MatrixT<double>&,
                                      const MuonHyper&, index_t, index_t);

}  // namespace parmuon
