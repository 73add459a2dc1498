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

#include "parmuon/sharding.hpp"

#include <algorithm>
#include <stdexcept>

namespace parmuon::sharding {

void ParamSpec::validate() const {
  require(rows >= 1 && cols >= 1,
          "parameter \"" + name + "\": dimensions must be positive");
  require(elem_bytes >= 1, "parameter \"" + name + "\": elem_bytes must be positive");
  require(tp_dim == 0 || tp_dim == 1, "parameter \"" + name + "\": tp_dim must be 0 or 1");
}

void Mesh::validate() const {
  require(dp_replicate >= 1 && dp_shard >= 1 && tp >= 1,
          "mesh axes must all be >= 1");
}

namespace {

// Contiguous near-equal split of `extent` into `parts`; remainder goes to the
// lowest parts. Returns (offset, extent) per part.
std::vector<std::pair<index_t, index_t>> split_extent(index_t extent, int parts) {
  const index_t base = extent / parts;
  const index_t rem = extent % parts;
  std::vector<std::pair<index_t, index_t>> out;
  out.reserve(static_cast<std::size_t>(parts));
  index_t off = 0;
  for (int p = 0; p < parts; ++p) {
    const index_t ext = base + (p < rem ? 1 : 0);
    out.emplace_back(off, ext);
    off += ext;
  }
  return out;
}

}  // namespace

ShardLayout shard_mapping(const ParamSpec& param, const Mesh& mesh) {
  param.validate();
  mesh.validate();

  const index_t tp_extent = param.tp_dim == 0 ? param.rows : param.cols;
  if (tp_extent < mesh.tp) {
    throw std::invalid_argument("parameter \"" + param.name + "\": dimension " +
                                std::to_string(param.tp_dim) + " extent " +
                                std::to_string(tp_extent) + " is smaller than tp=" +
                                std::to_string(mesh.tp));
  }
  const auto tp_splits = split_extent(tp_extent, mesh.tp);

  ShardLayout layout;
  layout.param_id = param.id;
  layout.fsdp_dim = 0;
  layout.tp_dim = param.tp_dim;
  layout.slices.resize(static_cast<std::size_t>(mesh.world_size()));

  for (int tpi = 0; tpi < mesh.tp; ++tpi) {
    const auto [tp_off, tp_ext] = tp_splits[static_cast<std::size_t>(tpi)];
    // FSDP shards dim 0 of the TP piece.
    const index_t fsdp_extent = param.tp_dim == 0 ? tp_ext : param.rows;
    if (fsdp_extent < mesh.dp_shard) {
      throw std::invalid_argument("parameter \"" + param.name + "\": dimension 0 extent " +
                                  std::to_string(fsdp_extent) +
                                  " is smaller than dp_shard=" +
                                  std::to_string(mesh.dp_shard));
    }
    const auto fsdp_splits = split_extent(fsdp_extent, mesh.dp_shard);
    for (int sh = 0; sh < mesh.dp_shard; ++sh) {
      const auto [f_off, f_ext] = fsdp_splits[static_cast<std::size_t>(sh)];
      Slice s;
      if (param.tp_dim == 0) {
        s.row_off = tp_off + f_off;
        s.row_ext = f_ext;
        s.col_off = 0;
        s.col_ext = param.cols;
      } else {
        s.row_off = f_off;
        s.row_ext = f_ext;
        s.col_off = tp_off;
        s.col_ext = tp_ext;
      }
      for (int rep = 0; rep < mesh.dp_replicate; ++rep) {
        const int rank = (rep * mesh.dp_shard + sh) * mesh.tp + tpi;
        s.rank = rank;
        layout.slices[static_cast<std::size_t>(rank)] = s;
      }
    }
  }
  return layout;
}

std::uint64_t ns_flops(const ParamSpec& param, int ns_iterations) {
  const std::uint64_t n = static_cast<std::uint64_t>(std::min(param.rows, param.cols));
  const std::uint64_t m = static_cast<std::uint64_t>(std::max(param.rows, param.cols));
  return static_cast<std::uint64_t>(ns_iterations) * (4 * n * n * m + 2 * n * n * n);
}

Assignment assign_params(const std::vector<ParamSpec>& params, int n_ranks,
                         int ns_iterations, bool sort_by_flops) {
  require(!params.empty(), "assign_params: empty parameter list");
  require(n_ranks >= 1, "assign_params: n_ranks must be >= 1");

  struct Entry {
    int id;
    std::uint64_t flops;
  };
  std::vector<Entry> entries;
  entries.reserve(params.size());
  for (const auto& p : params) {
    entries.push_back({p.id, ns_flops(p, ns_iterations)});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return a.id < b.id;
  });
  if (sort_by_flops) {
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      return a.flops > b.flops;
    });
  }

  Assignment out;
  out.rank_flops.assign(static_cast<std::size_t>(n_ranks), 0);
  out.order.reserve(entries.size());
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const int rank = static_cast<int>(k % static_cast<std::size_t>(n_ranks));
    out.owner[entries[k].id] = rank;
    out.rank_flops[static_cast<std::size_t>(rank)] += entries[k].flops;
    out.order.push_back(entries[k].id);
  }
  return out;
}

std::vector<Chunk> chunk_params(const std::vector<int>& assignment_order,
                                index_t chunk_size) {
  require(chunk_size >= 1, "chunk_params: chunk_size must be >= 1");
  std::vector<Chunk> chunks;
  Chunk cur;
  cur.index = 0;
  for (const int id : assignment_order) {
    cur.param_ids.push_back(id);
    if (static_cast<index_t>(cur.param_ids.size()) == chunk_size) {
      chunks.push_back(std::move(cur));
      cur = Chunk{};
      cur.index = static_cast<int>(chunks.size());
    }
  }
  if (!cur.param_ids.empty()) {
    chunks.push_back(std::move(cur));
  }
  return chunks;
}

}  // namespace parmuon::sharding
