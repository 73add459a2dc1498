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
#include <string_view>
#include <utility>

#include "parmuon/matrix.hpp"

namespace parmuon {

/// Muon hyperparameters. Defaults follow common Muon practice: quintic
/// Newton-Schulz coefficients, 5 iterations, nesterov momentum 0.95.
struct MuonHyper {
  double momentum_beta = 0.95;
  bool nesterov = true;
  double lr = 0.02;
  double weight_decay = 0.0;
  int ns_iterations = 5;
  std::array<double, 3> ns_coefficients = {3.4445, -4.7750, 2.0315};
  double epsilon = 1e-7;  // Frobenius-norm guard

  void validate() const;
};

/// Orthogonalizes g toward the polar factor U*V^T of its SVD.
///
/// Normalizes by (frobenius + epsilon), transposes tall inputs so the iterate
/// is wide (the Gram matrix X*X^T stays min(r,c) x min(r,c)), then runs
/// ns_iterations of X <- a*X + (b*A + c*A^2)*X with A = X*X^T. A zero input is
/// a fixed point and returns zero. `name` is only used in error messages.
template <typename T>
MatrixT<T> newton_schulz(const MatrixT<T>& g, const MuonHyper& hyper,
                         std::string_view name = {});

/// m' = beta*m + g; g_eff = g + beta*m' when nesterov, else m'.
template <typename T>
std::pair<MatrixT<T>, MatrixT<T>> momentum_update(const MatrixT<T>& m,
                                                  const MatrixT<T>& g,
                                                  const MuonHyper& hyper);

/// p' = p*(1 - lr*weight_decay) - lr*scale*u with scale = sqrt(max(1, R/C))
/// where R x C are the dimensions of the *full* parameter (p and u may be a
/// shard slice of it).
template <typename T>
MatrixT<T> apply_update(const MatrixT<T>& p, const MatrixT<T>& u,
                        const MuonHyper& hyper, index_t full_rows,
                        index_t full_cols);

/// RMS-matching scale used by apply_update.
double update_scale(index_t full_rows, index_t full_cols);

}  // namespace parmuon
