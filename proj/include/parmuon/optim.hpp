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

#include <vector>

#include "parmuon/fabric.hpp"
#include "parmuon/matrix.hpp"
#include "parmuon/muon.hpp"
#include "parmuon/sharding.hpp"

namespace parmuon::optim {

/// Payload carried through the simulated step. Real payloads hold matrix data
/// and are oracle-checkable; shape payloads carry dimensions only, for
/// configurations whose numerics are not feasible at desk scale. Both modes
/// drive the identical schedule, so traces do not depend on the mode.
template <typename T>
struct RealPayload {
  using Elem = T;
  using Mat = MatrixT<T>;
  static constexpr bool materialized = true;
};

struct ShapeMat {
  index_t rows = 0;
  index_t cols = 0;
};

struct ShapePayload {
  using Mat = ShapeMat;
  static constexpr bool materialized = false;
};

struct PipelineConfig {
  bool enabled = false;
  index_t chunk_size = 32;
  int warmup_depth = 2;
};

template <class P>
using ShardGrid = std::vector<std::vector<typename P::Mat>>;  // [world rank][param pos]

/// Sharded optimizer state. Parameters are ordered by ascending id; the
/// assignment covers exactly the non-elementwise parameters and is expressed
/// in group-local ranks (each replica group runs the same schedule).
template <class P>
struct OptimizerState {
  std::vector<sharding::ParamSpec> specs;
  sharding::Mesh mesh;
  MuonHyper hyper;
  PipelineConfig pipeline;
  bool sort_by_flops = false;

  std::vector<sharding::ShardLayout> layouts;  // per param position
  sharding::Assignment assignment;
  std::vector<sharding::Chunk> chunks;

  ShardGrid<P> params;
  ShardGrid<P> momenta;

  int param_pos(int param_id) const;
  const sharding::ParamSpec& spec_at(int pos) const { return specs[static_cast<std::size_t>(pos)]; }
};

template <class P>
OptimizerState<P> make_state(std::vector<sharding::ParamSpec> specs, const sharding::Mesh& mesh,
                             const MuonHyper& hyper, const PipelineConfig& pipeline,
                             bool sort_by_flops);

/// Slice full per-parameter matrices into the state's shard grid (params or
/// synthetic gradients). Replica groups receive identical copies.
template <typename T>
ShardGrid<RealPayload<T>> shard_full(const OptimizerState<RealPayload<T>>& st,
                                     const std::vector<MatrixT<T>>& full);

template <typename T>
void set_params_from_full(OptimizerState<RealPayload<T>>& st,
                          const std::vector<MatrixT<T>>& full);

/// Reassemble full matrices from one replica group's shards of `grid`.
template <typename T>
std::vector<MatrixT<T>> gather_full(const OptimizerState<RealPayload<T>>& st,
                                    const ShardGrid<RealPayload<T>>& grid, int replica = 0);

/// Reassemble full parameters from one replica group's shards.
template <typename T>
std::vector<MatrixT<T>> gather_full_params(const OptimizerState<RealPayload<T>>& st,
                                           int replica = 0);

ShardGrid<ShapePayload> make_shape_grads(const OptimizerState<ShapePayload>& st);

/// Single-rank dense reference: per parameter in ascending id order,
/// momentum_update -> newton_schulz -> apply_update (elementwise parameters
/// skip the orthogonalization and apply the momentum step directly).
template <typename T>
void oracle_step(std::vector<MatrixT<T>>& params, std::vector<MatrixT<T>>& momenta,
                 const std::vector<MatrixT<T>>& grads,
                 const std::vector<sharding::ParamSpec>& specs, const MuonHyper& hyper);

/// Baseline: per parameter, all-gather the effective gradient, run
/// Newton-Schulz redundantly on every rank, keep only the local update shard.
template <class P>
void distributed_muon_step(OptimizerState<P>& st, const ShardGrid<P>& grads,
                           fabric::Fabric& fab);

/// One all-to-all redistributes shards so each full gradient lands on exactly
/// one owner, Newton-Schulz runs once per parameter, a second all-to-all
/// scatters update shards back.
template <class P>
void parallel_muon_step(OptimizerState<P>& st, const ShardGrid<P>& grads, fabric::Fabric& fab);

/// Chunked gather/compute/scatter pipeline with warm-up and early release of
/// completed full matrices. Numerically identical to parallel_muon_step.
template <class P>
void parallel_muon_step_pipelined(OptimizerState<P>& st, const ShardGrid<P>& grads,
                                  fabric::Fabric& fab);

/// p' = p*(1 - lr*weight_decay) - lr*g, the non-orthogonalized update used for
/// elementwise parameters.
template <typename T>
MatrixT<T> apply_sgd(const MatrixT<T>& p, const MatrixT<T>& g_eff, const MuonHyper& hyper);

std::uint64_t momentum_flops(std::uint64_t elems, const MuonHyper& hyper);
std::uint64_t apply_flops(std::uint64_t elems);

}  // namespace parmuon::optim
