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

#include "parmuon/fabric.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "parmuon/matrix.hpp"

namespace parmuon::fabric {

void CostModel::validate() const {
  require(alpha_us > 0.0 && bandwidth_bytes_per_us > 0.0 && compute_flops_per_us > 0.0,
          "cost model fields must all be strictly positive");
}

std::string_view kind_name(EventKind k) {
  switch (k) {
    case EventKind::kCompute:
      return "compute";
    case EventKind::kSend:
      return "send";
    case EventKind::kRecv:
      return "recv";
    case EventKind::kCollectiveBegin:
      return "collective_begin";
    case EventKind::kCollectiveEnd:
      return "collective_end";
    case EventKind::kAlloc:
      return "alloc";
    case EventKind::kFree:
      return "free";
  }
  return "unknown";
}

void EventTrace::write_jsonl(std::ostream& os) const {
  for (const Event& e : events) {
    nlohmann::ordered_json j;
    j["rank"] = e.rank;
    j["kind"] = kind_name(e.kind);
    j["start_us"] = e.start_us;
    j["end_us"] = e.end_us;
    j["bytes"] = e.bytes;
    j["flops"] = e.flops;
    j["tag"] = e.tag;
    os << j.dump() << '\n';
  }
}

RankGroup RankGroup::contiguous(int base, int count) {
  RankGroup g;
  g.ranks.resize(static_cast<std::size_t>(count));
  std::iota(g.ranks.begin(), g.ranks.end(), base);
  return g;
}

Fabric::Fabric(int world_size, CostModel cost) : world_(world_size), cost_(cost) {
  require(world_size >= 1, "fabric world size must be >= 1");
  cost_.validate();
  compute_free_.assign(static_cast<std::size_t>(world_size), 0.0);
  chan_free_.assign(static_cast<std::size_t>(world_size), {0.0, 0.0});
}

void Fabric::check_rank(int rank) const {
  if (rank < 0 || rank >= world_) {
    throw std::invalid_argument("rank " + std::to_string(rank) + " outside world of " +
                                std::to_string(world_));
  }
}

void Fabric::check_group(const RankGroup& group) const {
  require(group.size() >= 1, "empty rank group");
  std::vector<int> seen;
  for (const int r : group.ranks) {
    check_rank(r);
    if (std::find(seen.begin(), seen.end(), r) != seen.end()) {
      throw std::invalid_argument("duplicate rank " + std::to_string(r) + " in group");
    }
    seen.push_back(r);
  }
}

Interval Fabric::compute(int rank, std::uint64_t flops, double ready_us, std::string tag) {
  check_rank(rank);
  double& lane = compute_free_[static_cast<std::size_t>(rank)];
  const double start = std::max(lane, ready_us);
  const double end = start + static_cast<double>(flops) / cost_.compute_flops_per_us;
  lane = end;
  trace_.events.push_back({rank, EventKind::kCompute, start, end, 0, flops, std::move(tag)});
  return {start, end};
}

void Fabric::alloc(int rank, std::uint64_t bytes, double at_us, std::string tag) {
  check_rank(rank);
  trace_.events.push_back({rank, EventKind::kAlloc, at_us, at_us, bytes, 0, std::move(tag)});
}

void Fabric::release(int rank, std::uint64_t bytes, double at_us, std::string tag) {
  check_rank(rank);
  trace_.events.push_back({rank, EventKind::kFree, at_us, at_us, bytes, 0, std::move(tag)});
}

Fabric::BytePlan Fabric::gather_byte_plan(const RankGroup& group,
                                          const std::vector<std::uint64_t>& shard_bytes) const {
  check_group(group);
  if (shard_bytes.size() != static_cast<std::size_t>(group.size())) {
    throw std::invalid_argument("all_gather: missing shard (got " +
                                std::to_string(shard_bytes.size()) + " shards for group of " +
                                std::to_string(group.size()) + ")");
  }
  BytePlan plan;
  const std::uint64_t total = std::accumulate(shard_bytes.begin(), shard_bytes.end(),
                                              std::uint64_t{0});
  plan.full = total;
  plan.in.resize(shard_bytes.size());
  plan.out.resize(shard_bytes.size());
  std::uint64_t moved = 0;
  for (std::size_t i = 0; i < shard_bytes.size(); ++i) {
    plan.in[i] = total - shard_bytes[i];
    plan.out[i] = shard_bytes[i] * static_cast<std::uint64_t>(group.size() - 1);
    moved += plan.in[i];
  }
  plan.cost = moved;
  return plan;
}

Fabric::BytePlan Fabric::exchange_byte_plan(
    const RankGroup& group, const std::vector<std::vector<std::uint64_t>>& send_bytes) const {
  BytePlan plan;
  const std::size_t n = static_cast<std::size_t>(group.size());
  plan.in.assign(n, 0);
  plan.out.assign(n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t p = 0; p < n; ++p) {
      if (r == p) continue;
      plan.out[r] += send_bytes[r][p];
      plan.in[p] += send_bytes[r][p];
    }
  }
  std::uint64_t worst = 0;
  for (std::size_t r = 0; r < n; ++r) {
    worst = std::max({worst, plan.in[r], plan.out[r]});
  }
  plan.cost = worst;
  return plan;
}

void Fabric::require_square(const RankGroup& group, std::size_t send_rows,
                            const std::vector<std::vector<std::uint64_t>>& send_bytes) const {
  check_group(group);
  const std::size_t n = static_cast<std::size_t>(group.size());
  if (send_rows != n || send_bytes.size() != n) {
    throw std::invalid_argument("all_to_all: send matrix must be " + std::to_string(n) + "x" +
                                std::to_string(n));
  }
  for (const auto& row : send_bytes) {
    if (row.size() != n) {
      throw std::invalid_argument("all_to_all: ragged byte matrix");
    }
  }
}

void Fabric::throw_inconsistent(const std::string& tag) const {
  throw std::invalid_argument("all_to_all \"" + tag + "\": inconsistent buffer metadata");
}

Interval Fabric::run_collective(const RankGroup& group,
                                const std::vector<std::uint64_t>& bytes_in,
                                const std::vector<std::uint64_t>& bytes_out,
                                std::uint64_t cost_bytes, const std::vector<double>& ready_us,
                                Channel channel, const std::string& tag) {
  const std::size_t n = static_cast<std::size_t>(group.size());
  if (ready_us.size() != n) {
    throw std::invalid_argument("collective \"" + tag + "\": ready times for " +
                                std::to_string(ready_us.size()) + " ranks, group has " +
                                std::to_string(n));
  }
  const std::size_t ch = channel == Channel::kGather ? 0 : 1;

  std::vector<double> arrive(n);
  double start = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int rank = group.ranks[i];
    arrive[i] = std::max(ready_us[i], chan_free_[static_cast<std::size_t>(rank)][ch]);
    start = std::max(start, arrive[i]);
  }
  const double done =
      start + cost_.alpha_us + static_cast<double>(cost_bytes) / cost_.bandwidth_bytes_per_us;

  for (std::size_t i = 0; i < n; ++i) {
    const int rank = group.ranks[i];
    chan_free_[static_cast<std::size_t>(rank)][ch] = done;
    trace_.events.push_back(
        {rank, EventKind::kCollectiveBegin, arrive[i], arrive[i], 0, 0, tag});
    trace_.events.push_back({rank, EventKind::kSend, start, done, bytes_out[i], 0, tag});
    trace_.events.push_back({rank, EventKind::kRecv, start, done, bytes_in[i], 0, tag});
    trace_.events.push_back({rank, EventKind::kCollectiveEnd, done, done, 0, 0, tag});
  }
  return {start, done};
}

SimResult Fabric::simulate() const {
  SimResult out;
  out.finish_us.assign(static_cast<std::size_t>(world_), 0.0);
  out.peak_bytes.assign(static_cast<std::size_t>(world_), 0);

  struct MemEvent {
    double at;
    std::size_t seq;
    std::int64_t delta;
  };
  std::vector<std::vector<MemEvent>> mem(static_cast<std::size_t>(world_));

  for (std::size_t seq = 0; seq < trace_.events.size(); ++seq) {
    const Event& e = trace_.events[seq];
    const std::size_t r = static_cast<std::size_t>(e.rank);
    out.finish_us[r] = std::max(out.finish_us[r], e.end_us);
    if (e.kind == EventKind::kAlloc) {
      mem[r].push_back({e.start_us, seq, static_cast<std::int64_t>(e.bytes)});
    } else if (e.kind == EventKind::kFree) {
      mem[r].push_back({e.start_us, seq, -static_cast<std::int64_t>(e.bytes)});
    }
  }

  for (int r = 0; r < world_; ++r) {
    auto& events = mem[static_cast<std::size_t>(r)];
    std::sort(events.begin(), events.end(), [](const MemEvent& a, const MemEvent& b) {
      if (a.at != b.at) return a.at < b.at;
      return a.seq < b.seq;
    });
    std::int64_t live = 0;
    std::int64_t peak = 0;
    for (const MemEvent& e : events) {
      live += e.delta;
      if (live < 0) {
        throw std::runtime_error("rank " + std::to_string(r) +
                                 ": live memory went negative at t=" + std::to_string(e.at) +
                                 "us (accounting bug)");
      }
      peak = std::max(peak, live);
    }
    out.peak_bytes[static_cast<std::size_t>(r)] = static_cast<std::uint64_t>(peak);
  }
  return out;
}

}  // namespace parmuon::fabric
