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

#include "parmuon/optim.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

#include "parmuon/kernels.hpp"

namespace parmuon::optim {

using sharding::Chunk;
using sharding::ParamSpec;
using sharding::Slice;

std::uint64_t momentum_flops(std::uint64_t elems, const MuonHyper& hyper) {
  return elems * (hyper.nesterov ? 4 : 2);
}

std::uint64_t apply_flops(std::uint64_t elems) { return elems * 3; }

template <typename T>
MatrixT<T> apply_sgd(const MatrixT<T>& p, const MatrixT<T>& g_eff, const MuonHyper& hyper) {
  require(p.same_shape(g_eff), "apply_sgd: shape mismatch");
  const auto& k = kernels::table<T>();
  MatrixT<T> out = p;
  k.axpby(out.data.size(), static_cast<T>(-hyper.lr), g_eff.data.data(),
          static_cast<T>(1.0 - hyper.lr * hyper.weight_decay), out.data.data());
  return out;
}

template <class P>
int OptimizerState<P>::param_pos(int param_id) const {
  const auto it = std::lower_bound(
      specs.begin(), specs.end(), param_id,
      [](const ParamSpec& s, int id) { return s.id < id; });
  if (it == specs.end() || it->id != param_id) {
    throw std::invalid_argument("unknown param id " + std::to_string(param_id));
  }
  return static_cast<int>(it - specs.begin());
}

namespace {

template <class P>
typename P::Mat make_mat(index_t rows, index_t cols) {
  if constexpr (P::materialized) {
    return typename P::Mat(rows, cols);
  } else {
    return ShapeMat{rows, cols};
  }
}

template <class P>
void check_shape(const typename P::Mat& m, index_t rows, index_t cols, const std::string& what) {
  if (m.rows != rows || m.cols != cols) {
    throw std::invalid_argument(what + ": expected " + std::to_string(rows) + "x" +
                                std::to_string(cols) + ", got " + std::to_string(m.rows) + "x" +
                                std::to_string(m.cols));
  }
}

std::uint64_t slice_bytes(const ParamSpec& spec, const Slice& s) {
  return s.elems() * static_cast<std::uint64_t>(spec.elem_bytes);
}

}  // namespace

template <class P>
OptimizerState<P> make_state(std::vector<ParamSpec> specs, const sharding::Mesh& mesh,
                             const MuonHyper& hyper, const PipelineConfig& pipeline,
                             bool sort_by_flops) {
  require(!specs.empty(), "make_state: empty parameter list");
  mesh.validate();
  hyper.validate();
  std::sort(specs.begin(), specs.end(),
            [](const ParamSpec& a, const ParamSpec& b) { return a.id < b.id; });
  for (std::size_t i = 0; i + 1 < specs.size(); ++i) {
    require(specs[i].id != specs[i + 1].id,
            "duplicate param id " + std::to_string(specs[i].id));
  }

  OptimizerState<P> st;
  st.mesh = mesh;
  st.hyper = hyper;
  st.pipeline = pipeline;
  st.sort_by_flops = sort_by_flops;

  std::vector<ParamSpec> muon_specs;
  for (const auto& s : specs) {
    st.layouts.push_back(sharding::shard_mapping(s, mesh));
    if (!s.elementwise) muon_specs.push_back(s);
  }
  require(!muon_specs.empty(), "make_state: no 2-D parameters to orthogonalize");
  st.assignment = sharding::assign_params(muon_specs, mesh.shard_group_size(),
                                          hyper.ns_iterations, sort_by_flops);
  const index_t n = static_cast<index_t>(st.assignment.order.size());
  const index_t chunk = pipeline.enabled ? std::min<index_t>(pipeline.chunk_size, n) : n;
  st.chunks = sharding::chunk_params(st.assignment.order, chunk);
  st.specs = std::move(specs);

  const int world = mesh.world_size();
  st.params.resize(static_cast<std::size_t>(world));
  st.momenta.resize(static_cast<std::size_t>(world));
  for (int r = 0; r < world; ++r) {
    for (std::size_t p = 0; p < st.specs.size(); ++p) {
      const Slice& s = st.layouts[p].slice_for_rank(r);
      st.params[static_cast<std::size_t>(r)].push_back(make_mat<P>(s.row_ext, s.col_ext));
      st.momenta[static_cast<std::size_t>(r)].push_back(make_mat<P>(s.row_ext, s.col_ext));
    }
  }
  return st;
}

template <typename T>
ShardGrid<RealPayload<T>> shard_full(const OptimizerState<RealPayload<T>>& st,
                                     const std::vector<MatrixT<T>>& full) {
  require(full.size() == st.specs.size(), "shard_full: wrong number of matrices");
  ShardGrid<RealPayload<T>> grid(static_cast<std::size_t>(st.mesh.world_size()));
  for (std::size_t p = 0; p < st.specs.size(); ++p) {
    const auto& spec = st.specs[p];
    check_shape<RealPayload<T>>(full[p], spec.rows, spec.cols,
                                "shard_full: parameter \"" + spec.name + "\"");
    for (int r = 0; r < st.mesh.world_size(); ++r) {
      const Slice& s = st.layouts[p].slice_for_rank(r);
      grid[static_cast<std::size_t>(r)].push_back(
          copy_slice(full[p], s.row_off, s.row_ext, s.col_off, s.col_ext));
    }
  }
  return grid;
}

template <typename T>
void set_params_from_full(OptimizerState<RealPayload<T>>& st,
                          const std::vector<MatrixT<T>>& full) {
  st.params = shard_full(st, full);
  for (auto& per_rank : st.momenta) {
    for (auto& m : per_rank) {
      m.data.assign(m.data.size(), T(0));
    }
  }
}

template <typename T>
std::vector<MatrixT<T>> gather_full(const OptimizerState<RealPayload<T>>& st,
                                    const ShardGrid<RealPayload<T>>& grid, int replica) {
  std::vector<MatrixT<T>> out;
  const int base = st.mesh.group_base(replica);
  for (std::size_t p = 0; p < st.specs.size(); ++p) {
    MatrixT<T> full(st.specs[p].rows, st.specs[p].cols);
    for (int lr = 0; lr < st.mesh.shard_group_size(); ++lr) {
      const int rank = base + lr;
      const Slice& s = st.layouts[p].slice_for_rank(rank);
      paste_slice(full, grid[static_cast<std::size_t>(rank)][p], s.row_off, s.col_off);
    }
    out.push_back(std::move(full));
  }
  return out;
}

template <typename T>
std::vector<MatrixT<T>> gather_full_params(const OptimizerState<RealPayload<T>>& st,
                                           int replica) {
  return gather_full(st, st.params, replica);
}

ShardGrid<ShapePayload> make_shape_grads(const OptimizerState<ShapePayload>& st) {
  ShardGrid<ShapePayload> grid(static_cast<std::size_t>(st.mesh.world_size()));
  for (int r = 0; r < st.mesh.world_size(); ++r) {
    for (std::size_t p = 0; p < st.specs.size(); ++p) {
      const Slice& s = st.layouts[p].slice_for_rank(r);
      grid[static_cast<std::size_t>(r)].push_back(ShapeMat{s.row_ext, s.col_ext});
    }
  }
  return grid;
}

template <typename T>
void oracle_step(std::vector<MatrixT<T>>& params, std::vector<MatrixT<T>>& momenta,
                 const std::vector<MatrixT<T>>& grads,
                 const std::vector<ParamSpec>& specs, const MuonHyper& hyper) {
  require(params.size() == specs.size() && momenta.size() == specs.size() &&
              grads.size() == specs.size(),
          "oracle_step: list size mismatch");
  std::vector<std::size_t> order(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return specs[a].id < specs[b].id; });

  for (const std::size_t p : order) {
    auto [m, eff] = momentum_update(momenta[p], grads[p], hyper);
    momenta[p] = std::move(m);
    if (specs[p].elementwise) {
      params[p] = apply_sgd(params[p], eff, hyper);
    } else {
      const MatrixT<T> u = newton_schulz(eff, hyper, specs[p].name);
      params[p] = apply_update(params[p], u, hyper, specs[p].rows, specs[p].cols);
    }
  }
}

namespace {

/// One simulated optimizer step. Holds the step-local buffers (effective
/// gradients, gathered fulls, scattered update shards) and the per-event
/// completion times the schedule is built from.
template <class P>
class StepRun {
 public:
  StepRun(OptimizerState<P>& st, const ShardGrid<P>& grads, fabric::Fabric& fab)
      : st_(st), grads_(grads), fab_(fab) {
    const int world = st.mesh.world_size();
    require(fab.world_size() == world, "fabric world size does not match mesh");
    require(static_cast<int>(grads.size()) == world, "gradient grid does not match world");
    for (int r = 0; r < world; ++r) {
      const auto& per_rank = grads[static_cast<std::size_t>(r)];
      require(per_rank.size() == st.specs.size(), "gradient grid does not match params");
      for (std::size_t p = 0; p < st.specs.size(); ++p) {
        const Slice& s = st.layouts[p].slice_for_rank(r);
        check_shape<P>(per_rank[p], s.row_ext, s.col_ext,
                       "gradient shard for \"" + st.specs[p].name + "\" on rank " +
                           std::to_string(r));
        check_shape<P>(st.momenta[static_cast<std::size_t>(r)][p], s.row_ext, s.col_ext,
                       "momentum shard for \"" + st.specs[p].name + "\" on rank " +
                           std::to_string(r));
      }
    }
    eff_.resize(static_cast<std::size_t>(world));
    mom_done_.assign(static_cast<std::size_t>(world),
                     std::vector<double>(st.specs.size(), 0.0));
    for (auto& row : eff_) row.resize(st.specs.size());
  }

  /// Local shard momentum for every parameter, then the plain-SGD applies for
  /// elementwise parameters (they never touch the fabric).
  void momentum_phase() {
    for (int r = 0; r < st_.mesh.world_size(); ++r) {
      for (std::size_t p = 0; p < st_.specs.size(); ++p) {
        const auto& spec = st_.specs[p];
        const Slice& s = st_.layouts[p].slice_for_rank(r);
        const auto iv = fab_.compute(r, momentum_flops(s.elems(), st_.hyper), 0.0,
                                     "mom:" + spec.name);
        mom_done_[static_cast<std::size_t>(r)][p] = iv.end_us;
        if constexpr (P::materialized) {
          auto& momenta = st_.momenta[static_cast<std::size_t>(r)][p];
          auto [m, eff] =
              momentum_update(momenta, grads_[static_cast<std::size_t>(r)][p], st_.hyper);
          momenta = std::move(m);
          eff_[static_cast<std::size_t>(r)][p] = std::move(eff);
        }
      }
    }
    for (std::size_t p = 0; p < st_.specs.size(); ++p) {
      if (!st_.specs[p].elementwise) continue;
      for (int r = 0; r < st_.mesh.world_size(); ++r) {
        const Slice& s = st_.layouts[p].slice_for_rank(r);
        fab_.compute(r, apply_flops(s.elems()), mom_done_[static_cast<std::size_t>(r)][p],
                     "apply:" + st_.specs[p].name);
        if constexpr (P::materialized) {
          auto& param = st_.params[static_cast<std::size_t>(r)][p];
          param = apply_sgd(param, eff_[static_cast<std::size_t>(r)][p], st_.hyper);
        }
      }
    }
  }

  /// Chunked gather -> compute -> scatter over every replica group, applies at
  /// the step tail. warmup_depth gates how many chunks may be in flight.
  void parallel_phase(const std::vector<Chunk>& chunks, int warmup_depth) {
    for (int rep = 0; rep < st_.mesh.dp_replicate; ++rep) {
      run_group_parallel(rep, chunks, std::max(1, warmup_depth));
    }
  }

  void distributed_phase() {
    for (int rep = 0; rep < st_.mesh.dp_replicate; ++rep) {
      run_group_distributed(rep);
    }
  }

 private:
  struct Piece {
    int param_id = -1;
    typename P::Mat tensor;
  };
  using Buffer = std::vector<Piece>;

  /// Paste the group's pieces for one parameter into a full matrix.
  typename P::Mat assemble_full(int pos, int base, const std::vector<Buffer>& from_each_rank) {
    const auto& spec = st_.specs[static_cast<std::size_t>(pos)];
    auto full = make_mat<P>(spec.rows, spec.cols);
    if constexpr (P::materialized) {
      for (int lr = 0; lr < st_.mesh.shard_group_size(); ++lr) {
        const Slice& s = st_.layouts[static_cast<std::size_t>(pos)].slice_for_rank(base + lr);
        bool found = false;
        for (const Piece& piece : from_each_rank[static_cast<std::size_t>(lr)]) {
          if (piece.param_id == spec.id) {
            paste_slice(full, piece.tensor, s.row_off, s.col_off);
            found = true;
            break;
          }
        }
        require(found, "missing shard of \"" + spec.name + "\" from rank " +
                           std::to_string(base + lr));
      }
    }
    return full;
  }

  typename P::Mat slice_of(const typename P::Mat& full, const Slice& s) {
    if constexpr (P::materialized) {
      return copy_slice(full, s.row_off, s.row_ext, s.col_off, s.col_ext);
    } else {
      return ShapeMat{s.row_ext, s.col_ext};
    }
  }

  struct GatherInFlight {
    fabric::Fabric::ExchangeResult<Buffer> result;
  };

  struct ScatterInFlight {
    int chunk = -1;
    fabric::Fabric::ExchangeResult<Buffer> result;
    std::vector<std::uint64_t> recv_bytes;  // per group-local rank
  };

  /// The per-chunk all-to-all acts as a rank rendezvous, so the reference
  /// scheduler runs the pipeline as lockstep iterations: iteration k overlaps
  /// the scatter of chunk k-1, the gather of chunk k+warmup, and the compute
  /// of chunk k, and the next iteration starts once all of them (and the
  /// applies of chunk k-1) have retired. Uneven chunks therefore cost the
  /// slowest rank's compute per chunk, which is exactly what FLOPs sorting
  /// removes.
  void run_group_parallel(int rep, const std::vector<Chunk>& chunks, int warmup_depth) {
    const int base = st_.mesh.group_base(rep);
    const int gsize = st_.mesh.shard_group_size();
    const auto group = fabric::RankGroup::contiguous(base, gsize);
    const int nchunks = static_cast<int>(chunks.size());
    const int warmup = std::min(std::max(1, warmup_depth), nchunks);

    std::vector<GatherInFlight> gathers(static_cast<std::size_t>(nchunks));
    std::vector<bool> gather_posted(static_cast<std::size_t>(nchunks), false);
    std::map<int, typename P::Mat> full_updates;  // pos -> U while unscattered

    const auto post_gather = [&](int k, double entry_us) {
      const Chunk& chunk = chunks[static_cast<std::size_t>(k)];
      std::vector<double> ready(static_cast<std::size_t>(gsize), 0.0);
      for (int lr = 0; lr < gsize; ++lr) {
        double t = entry_us;
        for (const int id : chunk.param_ids) {
          const int pos = st_.param_pos(id);
          t = std::max(t, mom_done_[static_cast<std::size_t>(base + lr)]
                                   [static_cast<std::size_t>(pos)]);
        }
        ready[static_cast<std::size_t>(lr)] = t;
      }

      // Every rank sends its shard of each chunk parameter to that
      // parameter's owner.
      std::vector<std::vector<Buffer>> send(
          static_cast<std::size_t>(gsize), std::vector<Buffer>(static_cast<std::size_t>(gsize)));
      std::vector<std::vector<std::uint64_t>> bytes(
          static_cast<std::size_t>(gsize),
          std::vector<std::uint64_t>(static_cast<std::size_t>(gsize), 0));
      for (const int id : chunk.param_ids) {
        const int pos = st_.param_pos(id);
        const auto& spec = st_.specs[static_cast<std::size_t>(pos)];
        const int owner = st_.assignment.owner.at(id);
        for (int lr = 0; lr < gsize; ++lr) {
          const Slice& s = st_.layouts[static_cast<std::size_t>(pos)].slice_for_rank(base + lr);
          Piece piece;
          piece.param_id = id;
          if constexpr (P::materialized) {
            piece.tensor =
                eff_[static_cast<std::size_t>(base + lr)][static_cast<std::size_t>(pos)];
          } else {
            piece.tensor = ShapeMat{s.row_ext, s.col_ext};
          }
          send[static_cast<std::size_t>(lr)][static_cast<std::size_t>(owner)].push_back(
              std::move(piece));
          bytes[static_cast<std::size_t>(lr)][static_cast<std::size_t>(owner)] +=
              slice_bytes(spec, s);
        }
      }
      gathers[static_cast<std::size_t>(k)].result = fab_.template all_to_all<Buffer>(
          group, std::move(send), bytes, ready, fabric::Channel::kGather,
          "gather:c" + std::to_string(k));
      gather_posted[static_cast<std::size_t>(k)] = true;

      // Gathered full matrices are charged on their owner from collective
      // start until orthogonalization consumes them.
      for (const int id : chunk.param_ids) {
        const int pos = st_.param_pos(id);
        const auto& spec = st_.specs[static_cast<std::size_t>(pos)];
        const int owner = st_.assignment.owner.at(id);
        fab_.alloc(base + owner, spec.bytes(),
                   gathers[static_cast<std::size_t>(k)].result.time.start_us,
                   "full_grad:" + spec.name);
      }
    };

    const auto post_scatter = [&](int k, double entry_us) {
      const Chunk& chunk = chunks[static_cast<std::size_t>(k)];
      std::vector<std::vector<Buffer>> send(
          static_cast<std::size_t>(gsize), std::vector<Buffer>(static_cast<std::size_t>(gsize)));
      std::vector<std::vector<std::uint64_t>> bytes(
          static_cast<std::size_t>(gsize),
          std::vector<std::uint64_t>(static_cast<std::size_t>(gsize), 0));
      ScatterInFlight flight;
      flight.chunk = k;
      flight.recv_bytes.assign(static_cast<std::size_t>(gsize), 0);
      for (const int id : chunk.param_ids) {
        const int pos = st_.param_pos(id);
        const auto& spec = st_.specs[static_cast<std::size_t>(pos)];
        const int owner = st_.assignment.owner.at(id);
        for (int lr = 0; lr < gsize; ++lr) {
          const Slice& s = st_.layouts[static_cast<std::size_t>(pos)].slice_for_rank(base + lr);
          Piece piece;
          piece.param_id = id;
          piece.tensor = slice_of(full_updates.at(pos), s);
          send[static_cast<std::size_t>(owner)][static_cast<std::size_t>(lr)].push_back(
              std::move(piece));
          bytes[static_cast<std::size_t>(owner)][static_cast<std::size_t>(lr)] +=
              slice_bytes(spec, s);
          flight.recv_bytes[static_cast<std::size_t>(lr)] += slice_bytes(spec, s);
        }
        if constexpr (P::materialized) {
          full_updates.erase(pos);
        }
      }
      const std::vector<double> ready(static_cast<std::size_t>(gsize), entry_us);
      flight.result =
          fab_.template all_to_all<Buffer>(group, std::move(send), bytes, ready,
                                           fabric::Channel::kScatter,
                                           "scatter:c" + std::to_string(k));
      for (int lr = 0; lr < gsize; ++lr) {
        fab_.alloc(base + lr, flight.recv_bytes[static_cast<std::size_t>(lr)],
                   flight.result.time.start_us, "update_shards:c" + std::to_string(k));
      }
      for (const int id : chunk.param_ids) {
        const int pos = st_.param_pos(id);
        const auto& spec = st_.specs[static_cast<std::size_t>(pos)];
        fab_.release(base + st_.assignment.owner.at(id), spec.bytes(),
                     flight.result.time.end_us, "full_update:" + spec.name);
      }
      return flight;
    };

    // Orthogonalize the chunk's parameters on their owners; compute lanes are
    // synchronized to the iteration entry.
    const auto compute_chunk = [&](int k, double entry_us) {
      const Chunk& chunk = chunks[static_cast<std::size_t>(k)];
      const auto& gathered = gathers[static_cast<std::size_t>(k)].result;
      double done = entry_us;
      for (const int id : chunk.param_ids) {
        const int pos = st_.param_pos(id);
        const auto& spec = st_.specs[static_cast<std::size_t>(pos)];
        const int owner = st_.assignment.owner.at(id);
        const int wr = base + owner;
        auto full = assemble_full(pos, base, gathered.recv[static_cast<std::size_t>(owner)]);
        const auto iv = fab_.compute(wr, sharding::ns_flops(spec, st_.hyper.ns_iterations),
                                     entry_us, "ns:" + spec.name);
        fab_.alloc(wr, spec.bytes(), iv.start_us, "full_update:" + spec.name);
        fab_.release(wr, spec.bytes(), iv.end_us, "full_grad:" + spec.name);
        done = std::max(done, iv.end_us);
        if constexpr (P::materialized) {
          full_updates[pos] = newton_schulz(full, st_.hyper, spec.name);
        } else {
          full_updates[pos] = full;
        }
      }
      return done;
    };

    // Scattered update shards are applied as soon as their scatter lands and
    // released right after.
    const auto apply_chunk = [&](const ScatterInFlight& flight) {
      const Chunk& chunk = chunks[static_cast<std::size_t>(flight.chunk)];
      std::vector<double> last(static_cast<std::size_t>(gsize), flight.result.time.end_us);
      double done = flight.result.time.end_us;
      for (const int id : chunk.param_ids) {
        const int pos = st_.param_pos(id);
        const auto& spec = st_.specs[static_cast<std::size_t>(pos)];
        const int owner = st_.assignment.owner.at(id);
        for (int lr = 0; lr < gsize; ++lr) {
          const int wr = base + lr;
          const Slice& s = st_.layouts[static_cast<std::size_t>(pos)].slice_for_rank(wr);
          const auto iv = fab_.compute(wr, apply_flops(s.elems()), flight.result.time.end_us,
                                       "apply:" + spec.name);
          last[static_cast<std::size_t>(lr)] = std::max(last[static_cast<std::size_t>(lr)],
                                                        iv.end_us);
          done = std::max(done, iv.end_us);
          if constexpr (P::materialized) {
            const auto& received =
                flight.result.recv[static_cast<std::size_t>(lr)][static_cast<std::size_t>(owner)];
            const Piece* update = nullptr;
            for (const Piece& piece : received) {
              if (piece.param_id == id) update = &piece;
            }
            require(update != nullptr, "missing update shard for \"" + spec.name + "\"");
            auto& param = st_.params[static_cast<std::size_t>(wr)][static_cast<std::size_t>(pos)];
            param = apply_update(param, update->tensor, st_.hyper, spec.rows, spec.cols);
          }
        }
      }
      for (int lr = 0; lr < gsize; ++lr) {
        fab_.release(base + lr, flight.recv_bytes[static_cast<std::size_t>(lr)],
                     last[static_cast<std::size_t>(lr)],
                     "update_shards:c" + std::to_string(flight.chunk));
      }
      return done;
    };

    // Warm-up: pre-post the first gathers so the pipeline starts full.
    for (int j = 0; j < warmup; ++j) {
      post_gather(j, 0.0);
    }

    double boundary = 0.0;
    for (int k = 0; k < nchunks; ++k) {
      const double entry =
          std::max(boundary, gathers[static_cast<std::size_t>(k)].result.time.end_us);
      double iteration_done = entry;
      std::optional<ScatterInFlight> flight;
      if (k >= 1) {
        flight = post_scatter(k - 1, entry);
      }
      if (k + warmup < nchunks && !gather_posted[static_cast<std::size_t>(k + warmup)]) {
        post_gather(k + warmup, entry);
        iteration_done = std::max(
            iteration_done, gathers[static_cast<std::size_t>(k + warmup)].result.time.end_us);
      }
      iteration_done = std::max(iteration_done, compute_chunk(k, entry));
      if (flight.has_value()) {
        iteration_done = std::max(iteration_done, apply_chunk(*flight));
      }
      boundary = iteration_done;
    }
    const ScatterInFlight tail = post_scatter(nchunks - 1, boundary);
    apply_chunk(tail);
  }

  void run_group_distributed(int rep) {
    const int base = st_.mesh.group_base(rep);
    const int gsize = st_.mesh.shard_group_size();
    const auto group = fabric::RankGroup::contiguous(base, gsize);

    std::vector<double> prev_apply(static_cast<std::size_t>(gsize), 0.0);
    for (std::size_t pos = 0; pos < st_.specs.size(); ++pos) {
      const auto& spec = st_.specs[pos];
      if (spec.elementwise) continue;
      const std::string name = spec.name;

      std::vector<Piece> shards;
      std::vector<std::uint64_t> shard_bytes;
      std::vector<double> ready(static_cast<std::size_t>(gsize));
      for (int lr = 0; lr < gsize; ++lr) {
        const int wr = base + lr;
        const Slice& s = st_.layouts[pos].slice_for_rank(wr);
        Piece piece;
        piece.param_id = spec.id;
        if constexpr (P::materialized) {
          piece.tensor = eff_[static_cast<std::size_t>(wr)][pos];
        } else {
          piece.tensor = ShapeMat{s.row_ext, s.col_ext};
        }
        shards.push_back(std::move(piece));
        shard_bytes.push_back(slice_bytes(spec, s));
        ready[static_cast<std::size_t>(lr)] =
            std::max(mom_done_[static_cast<std::size_t>(wr)][pos],
                     prev_apply[static_cast<std::size_t>(lr)]);
      }

      auto gathered = fab_.template all_gather<Piece>(group, shards, shard_bytes, ready,
                                                      fabric::Channel::kGather, "gather:" + name);

      // Identical input on every rank, so the orthogonalization result is
      // identical too; computed once, charged on all ranks.
      typename P::Mat update = make_mat<P>(spec.rows, spec.cols);
      if constexpr (P::materialized) {
        // per_rank[i] is the full concatenation in group order: entry lr is
        // rank lr's shard.
        std::vector<Buffer> from_each(static_cast<std::size_t>(gsize));
        for (int lr = 0; lr < gsize; ++lr) {
          from_each[static_cast<std::size_t>(lr)].push_back(
              gathered.per_rank[0][static_cast<std::size_t>(lr)]);
        }
        auto full = assemble_full(static_cast<int>(pos), base, from_each);
        update = newton_schulz(full, st_.hyper, name);
      }

      for (int lr = 0; lr < gsize; ++lr) {
        const int wr = base + lr;
        const Slice& s = st_.layouts[pos].slice_for_rank(wr);
        const auto ns = fab_.compute(wr, sharding::ns_flops(spec, st_.hyper.ns_iterations),
                                     gathered.time.end_us, "ns:" + name);
        fab_.alloc(wr, spec.bytes(), ns.start_us, "full_update:" + name);
        fab_.release(wr, gathered.full_bytes, ns.end_us, "gather:" + name);
        const auto ap = fab_.compute(wr, apply_flops(s.elems()), ns.end_us, "apply:" + name);
        fab_.release(wr, spec.bytes(), ap.end_us, "full_update:" + name);
        prev_apply[static_cast<std::size_t>(lr)] = ap.end_us;
        if constexpr (P::materialized) {
          auto& param = st_.params[static_cast<std::size_t>(wr)][pos];
          param = apply_update(param, slice_of(update, s), st_.hyper, spec.rows, spec.cols);
        }
      }
    }
  }

  OptimizerState<P>& st_;
  const ShardGrid<P>& grads_;
  fabric::Fabric& fab_;
  ShardGrid<P> eff_;
  std::vector<std::vector<double>> mom_done_;
};

template <class P>
std::vector<Chunk> single_chunk(const OptimizerState<P>& st) {
  Chunk c;
  c.index = 0;
  c.param_ids = st.assignment.order;
  return {c};
}

}  // namespace

template <class P>
void distributed_muon_step(OptimizerState<P>& st, const ShardGrid<P>& grads,
                           fabric::Fabric& fab) {
  StepRun<P> run(st, grads, fab);
  run.momentum_phase();
  run.distributed_phase();
}

template <class P>
void parallel_muon_step(OptimizerState<P>& st, const ShardGrid<P>& grads, fabric::Fabric& fab) {
  StepRun<P> run(st, grads, fab);
  run.momentum_phase();
  run.parallel_phase(single_chunk(st), st.pipeline.warmup_depth);
}

template <class P>
void parallel_muon_step_pipelined(OptimizerState<P>& st, const ShardGrid<P>& grads,
                                  fabric::Fabric& fab) {
  StepRun<P> run(st, grads, fab);
  run.momentum_phase();
  run.parallel_phase(st.chunks, st.pipeline.warmup_depth);
}

// Explicit instantiations for the two real element types and the shape-only mode.
template struct OptimizerState<RealPayload<float>>;
template struct OptimizerState<RealPayload<double>>;
template struct OptimizerState<ShapePayload>;

template OptimizerState<RealPayload<float>> make_state(std::vector<ParamSpec>,
                                                       const sharding::Mesh&, const MuonHyper&,
                                                       const PipelineConfig&, bool);
template OptimizerState<RealPayload<double>> make_state(std::vector<ParamSpec>,
                                                        const sharding::Mesh&, const MuonHyper&,
                                                        const PipelineConfig&, bool);
template OptimizerState<ShapePayload> make_state(std::vector<ParamSpec>, const sharding::Mesh&,
                                                 const MuonHyper&, const PipelineConfig&, bool);

template ShardGrid<RealPayload<float>> shard_full(const OptimizerState<RealPayload<float>>&,
                                                  const std::vector<MatrixT<float>>&);
template ShardGrid<RealPayload<double>> shard_full(const OptimizerState<RealPayload<double>>&,
                                                   const std::vector<MatrixT<double>>&);
template void set_params_from_full(OptimizerState<RealPayload<float>>&,
                                   const std::vector<MatrixT<float>>&);
template void set_params_from_full(OptimizerState<RealPayload<double>>&,
                                   const std::vector<MatrixT<double>>&);
template std::vector<MatrixT<float>> gather_full(const OptimizerState<RealPayload<float>>&,
                                                 const ShardGrid<RealPayload<float>>&, int);
template std::vector<MatrixT<double>> gather_full(const OptimizerState<RealPayload<double>>&,
                                                  const ShardGrid<RealPayload<double>>&, int);
template std::vector<MatrixT<float>> gather_full_params(const OptimizerState<RealPayload<float>>&,
                                                        int);
template std::vector<MatrixT<double>> gather_full_params(
    const OptimizerState<RealPayload<double>>&, int);

template void oracle_step(std::vector<MatrixT<float>>&, std::vector<MatrixT<float>>&,
                          const std::vector<MatrixT<float>>&, const std::vector<ParamSpec>&,
                          const MuonHyper&);
template void oracle_step(std::vector<MatrixT<double>>&, std::vector<MatrixT<double>>&,
                          const std::vector<MatrixT<double>>&, const std::vector<ParamSpec>&,
                          const MuonHyper&);

template void distributed_muon_step(OptimizerState<RealPayload<float>>&,
                                    const ShardGrid<RealPayload<float>>&, fabric::Fabric&);
template void distributed_muon_step(OptimizerState<RealPayload<double>>&,
                                    const ShardGrid<RealPayload<double>>&, fabric::Fabric&);
template void distributed_muon_step(OptimizerState<ShapePayload>&,
                                    const ShardGrid<ShapePayload>&, fabric::Fabric&);

template void parallel_muon_step(OptimizerState<RealPayload<float>>&,
                                 const ShardGrid<RealPayload<float>>&, fabric::Fabric&);
template void parallel_muon_step(OptimizerState<RealPayload<double>>&,
                                 const ShardGrid<RealPayload<double>>&, fabric::Fabric&);
template void parallel_muon_step(OptimizerState<ShapePayload>&, const ShardGrid<ShapePayload>&,
                                 fabric::Fabric&);

template void parallel_muon_step_pipelined(OptimizerState<RealPayload<float>>&,
                                           const ShardGrid<RealPayload<float>>&, fabric::Fabric&);
template void parallel_muon_step_pipelined(OptimizerState<RealPayload<double>>&,
                                           const ShardGrid<RealPayload<double>>&,
                                           fabric::Fabric&);
template void parallel_muon_step_pipelined(OptimizerState<ShapePayload>&,
                                           const ShardGrid<ShapePayload>&, fabric::Fabric&);

template MatrixT<float> apply_sgd(const MatrixT<float>&, const MatrixT<float>&, const MuonHyper&);
template MatrixT<double> apply_sgd(const MatrixT<double>&, const MatrixT<double>&,
                                   const MuonHyper&);

}  // namespace parmuon::optim
