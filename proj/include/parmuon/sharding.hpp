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
#include <map>
#include <string>
#include <vector>

#include "parmuon/matrix.hpp"

namespace parmuon::sharding {

/// One named 2-D parameter. `tp_dim` selects which dimension tensor
/// parallelism splits for this parameter; `elementwise` marks parameters that
/// take the plain momentum-SGD path instead of orthogonalization (biases,
/// norms flattened to 2-D).
struct ParamSpec {
  int id = 0;
  std::string name;
  index_t rows = 1;
  index_t cols = 1;
  int elem_bytes = 8;
  int tp_dim = 1;
  bool elementwise = false;

  std::uint64_t elems() const {
    return static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(cols);
  }
  std::uint64_t bytes() const { return elems() * static_cast<std::uint64_t>(elem_bytes); }

  void validate() const;
};

/// Device mesh axes: replication x FSDP sharding x tensor parallelism.
/// Global rank layout: rank = (replica*dp_shard + shard)*tp + tp_index.
struct Mesh {
  int dp_replicate = 1;
  int dp_shard = 1;
  int tp = 1;

  int world_size() const { return dp_replicate * dp_shard * tp; }
  int shard_group_size() const { return dp_shard * tp; }
  int replica_of(int rank) const { return rank / shard_group_size(); }
  int group_base(int replica) const { return replica * shard_group_size(); }

  void validate() const;
};

struct Slice {
  int rank = 0;  // global rank
  index_t row_off = 0;
  index_t row_ext = 0;
  index_t col_off = 0;
  index_t col_ext = 0;

  std::uint64_t elems() const {
    return static_cast<std::uint64_t>(row_ext) * static_cast<std::uint64_t>(col_ext);
  }
};

/// Rank -> slice mapping for one parameter. Slices are listed for every rank
/// in the world; within one replica group they tile the parameter exactly,
/// and replica groups repeat the same coordinates.
struct ShardLayout {
  int param_id = 0;
  int fsdp_dim = 0;
  int tp_dim = 1;
  std::vector<Slice> slices;  // indexed by global rank

  const Slice& slice_for_rank(int rank) const { return slices.at(static_cast<std::size_t>(rank)); }
};

/// FSDP shards dim 0 in contiguous near-equal blocks (remainder to the lowest
/// ranks); TP shards the parameter's tp_dim; hybrid composes TP first, then
/// FSDP over each TP piece; dp_replicate ranks hold identical copies.
ShardLayout shard_mapping(const ParamSpec& param, const Mesh& mesh);

/// Newton-Schulz cost for one parameter: per iteration two n x m style
/// products plus one n x n square, multiply-add counted as 2 flops, with
/// n = min(rows, cols), m = max(rows, cols):
///   iterations * (4*n^2*m + 2*n^3)
std::uint64_t ns_flops(const ParamSpec& param, int ns_iterations);

struct Assignment {
  std::map<int, int> owner;            // param id -> group-local rank
  std::vector<std::uint64_t> rank_flops;  // indexed by group-local rank
  std::vector<int> order;              // param ids in assignment order
};

/// Round-robin ownership over the (optionally FLOPs-sorted) parameter list.
/// Sorting is descending by ns_flops, ties broken by ascending id.
Assignment assign_params(const std::vector<ParamSpec>& params, int n_ranks,
                         int ns_iterations, bool sort_by_flops);

struct Chunk {
  int index = 0;
  std::vector<int> param_ids;
};

/// Order-preserving partition into chunks of chunk_size (last may be short).
std::vector<Chunk> chunk_params(const std::vector<int>& assignment_order,
                                index_t chunk_size);

}  // namespace parmuon::sharding
