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
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace parmuon::fabric {

/// Alpha-beta communication model plus an effective matrix-multiply rate.
/// Calibrated for qualitative orderings, not absolute hardware numbers.
struct CostModel {
  double alpha_us = 20.0;
  double bandwidth_bytes_per_us = 400.0e3;
  double compute_flops_per_us = 200.0e6;

  void validate() const;
};

enum class EventKind {
  kCompute,
  kSend,
  kRecv,
  kCollectiveBegin,
  kCollectiveEnd,
  kAlloc,
  kFree,
};

std::string_view kind_name(EventKind k);

struct Event {
  int rank = 0;
  EventKind kind = EventKind::kCompute;
  double start_us = 0.0;
  double end_us = 0.0;
  std::uint64_t bytes = 0;
  std::uint64_t flops = 0;
  std::string tag;
};

struct EventTrace {
  std::vector<Event> events;

  /// One JSON object per line: rank, kind, start_us, end_us, bytes, flops, tag.
  void write_jsonl(std::ostream& os) const;
};

struct RankGroup {
  std::vector<int> ranks;

  int size() const { return static_cast<int>(ranks.size()); }
  static RankGroup contiguous(int base, int count);
};

/// Per-rank communication lanes. Gathers and scatters occupy separate lanes so
/// a pipelined schedule can overlap the scatter of one chunk with the gather
/// of the next (full-duplex links); compute is a third, independent resource.
enum class Channel { kGather, kScatter };

struct Interval {
  double start_us = 0.0;
  double end_us = 0.0;
};

struct SimResult {
  std::vector<double> finish_us;
  std::vector<std::uint64_t> peak_bytes;
};

/// Deterministic in-process simulation of a rank group. Payload movement is
/// exact data plumbing; timestamps come only from the cost model, so payload
/// contents never depend on it. Single-threaded; every method appends trace
/// events in program order.
class Fabric {
 public:
  Fabric(int world_size, CostModel cost);

  int world_size() const { return world_; }
  const CostModel& cost_model() const { return cost_; }
  EventTrace& trace() { return trace_; }
  const EventTrace& trace() const { return trace_; }

  /// FIFO per-rank compute resource: starts when the rank's compute lane is
  /// free and `ready_us` has passed.
  Interval compute(int rank, std::uint64_t flops, double ready_us, std::string tag);

  void alloc(int rank, std::uint64_t bytes, double at_us, std::string tag);
  void release(int rank, std::uint64_t bytes, double at_us, std::string tag);

  template <typename P>
  struct GatherResult {
    // per group position: the concatenation of all shards in group order
    std::vector<std::vector<P>> per_rank;
    Interval time;
    std::uint64_t full_bytes = 0;  // alloc charged per rank at time.start_us
  };

  /// Every participant ends up holding all shards (concatenation in group
  /// order). Completion is shared: start = max arrival, duration =
  /// alpha + total_bytes_moved/bandwidth where moved bytes exclude each
  /// rank's own shard. An alloc of the full buffer is charged on every rank
  /// at collective start; callers release it.
  template <typename P>
  GatherResult<P> all_gather(const RankGroup& group, const std::vector<P>& shards,
                             const std::vector<std::uint64_t>& shard_bytes,
                             const std::vector<double>& ready_us, Channel channel,
                             const std::string& tag) {
    const auto bytes = gather_byte_plan(group, shard_bytes);
    const Interval t =
        run_collective(group, bytes.in, bytes.out, bytes.cost, ready_us, channel, tag);
    GatherResult<P> out;
    out.time = t;
    out.full_bytes = bytes.full;
    for (int i = 0; i < group.size(); ++i) {
      alloc(group.ranks[static_cast<std::size_t>(i)], bytes.full, t.start_us, tag);
    }
    out.per_rank.assign(static_cast<std::size_t>(group.size()), shards);
    return out;
  }

  template <typename P>
  struct ExchangeResult {
    std::vector<std::vector<P>> recv;  // recv[p][r] = send[r][p]
    Interval time;
  };

  /// recv[p][r] = send[r][p] for all group pairs. Completion is shared:
  /// start = max arrival, duration = alpha + (max per-rank bytes in or
  /// out)/bandwidth, self-transfers excluded from the byte counts.
  template <typename P>
  ExchangeResult<P> all_to_all(const RankGroup& group,
                               std::vector<std::vector<P>> send,
                               const std::vector<std::vector<std::uint64_t>>& send_bytes,
                               const std::vector<double>& ready_us, Channel channel,
                               const std::string& tag) {
    const int n = group.size();
    require_square(group, send.size(), send_bytes);
    for (const auto& row : send) {
      if (static_cast<int>(row.size()) != n) {
        throw_inconsistent(tag);
      }
    }
    const auto bytes = exchange_byte_plan(group, send_bytes);
    const Interval t =
        run_collective(group, bytes.in, bytes.out, bytes.cost, ready_us, channel, tag);
    ExchangeResult<P> out;
    out.time = t;
    out.recv.resize(static_cast<std::size_t>(n));
    for (int p = 0; p < n; ++p) {
      auto& row = out.recv[static_cast<std::size_t>(p)];
      row.reserve(static_cast<std::size_t>(n));
      for (int r = 0; r < n; ++r) {
        row.push_back(std::move(send[static_cast<std::size_t>(r)][static_cast<std::size_t>(p)]));
      }
    }
    return out;
  }

  /// Per-rank finish time (max event end) and peak live bytes (max prefix sum
  /// of alloc-free in timestamp order). Throws if live memory ever goes
  /// negative.
  SimResult simulate() const;

 private:
  struct BytePlan {
    std::vector<std::uint64_t> in;
    std::vector<std::uint64_t> out;
    std::uint64_t cost = 0;  // scalar fed into the bandwidth term
    std::uint64_t full = 0;  // gather only: assembled buffer size
  };

  BytePlan gather_byte_plan(const RankGroup& group,
                            const std::vector<std::uint64_t>& shard_bytes) const;
  BytePlan exchange_byte_plan(const RankGroup& group,
                              const std::vector<std::vector<std::uint64_t>>& send_bytes) const;
  Interval run_collective(const RankGroup& group, const std::vector<std::uint64_t>& bytes_in,
                          const std::vector<std::uint64_t>& bytes_out, std::uint64_t cost_bytes,
                          const std::vector<double>& ready_us, Channel channel,
                          const std::string& tag);
  void require_square(const RankGroup& group, std::size_t send_rows,
                      const std::vector<std::vector<std::uint64_t>>& send_bytes) const;
  [[noreturn]] void throw_inconsistent(const std::string& tag) const;
  void check_rank(int rank) const;
  void check_group(const RankGroup& group) const;

  int world_;
  CostModel cost_;
  EventTrace trace_;
  std::vector<double> compute_free_;
  std::vector<std::array<double, 2>> chan_free_;
};

}  // namespace parmuon::fabric
