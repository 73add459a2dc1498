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

#include <map>
#include <random>
#include <sstream>

#include "parmuon/fabric.hpp"
#include "parmuon/matrix.hpp"
#include "parmuon/sharding.hpp"

using namespace parmuon;
using namespace parmuon::fabric;

namespace {

struct Payload {
  std::vector<int> values;
};

CostModel cheap_model() {
  CostModel cm;
  cm.alpha_us = 10.0;
  cm.bandwidth_bytes_per_us = 100.0;
  cm.compute_flops_per_us = 1000.0;
  return cm;
}

std::vector<double> zeros(int n) { return std::vector<double>(static_cast<std::size_t>(n), 0.0); }

}  // namespace

TEST_CASE("all_gather concatenates shards on every rank") {
  Fabric fab(2, cheap_model());
  const RankGroup group = RankGroup::contiguous(0, 2);
  const std::vector<Payload> shards = {Payload{{1, 2}}, Payload{{3, 4}}};
  const auto res = fab.all_gather(group, shards, {16, 16}, zeros(2), Channel::kGather, "g");
  REQUIRE(res.per_rank.size() == 2);
  for (const auto& held : res.per_rank) {
    REQUIRE(held.size() == 2);
    CHECK(held[0].values == std::vector<int>{1, 2});
    CHECK(held[1].values == std::vector<int>{3, 4});
  }
  CHECK(res.full_bytes == 32);
  // total moved: each rank receives the other's 16 bytes
  CHECK(res.time.end_us == doctest::Approx(10.0 + 32.0 / 100.0));
}

TEST_CASE("single-rank all_gather moves nothing") {
  Fabric fab(1, cheap_model());
  const auto res = fab.all_gather(RankGroup::contiguous(0, 1), std::vector<Payload>{{{7}}},
                                  {64}, zeros(1), Channel::kGather, "g");
  CHECK(res.per_rank.size() == 1);
  CHECK(res.per_rank[0][0].values == std::vector<int>{7});
  for (const Event& e : fab.trace().events) {
    if (e.kind == EventKind::kSend || e.kind == EventKind::kRecv) CHECK(e.bytes == 0);
  }
}

TEST_CASE("uneven all_gather reassembles per the shard layout") {
  // 4 ranks over 10 rows: the remainder rule gives extents 3,3,2,2.
  sharding::ParamSpec param;
  param.id = 0;
  param.name = "p";
  param.rows = 10;
  param.cols = 2;
  const sharding::Mesh mesh{1, 4, 1};
  const auto layout = sharding::shard_mapping(param, mesh);

  MatrixF64 full(10, 2);
  fill_normal(full, 99);

  Fabric fab(4, cheap_model());
  std::vector<MatrixF64> shards;
  std::vector<std::uint64_t> bytes;
  for (int r = 0; r < 4; ++r) {
    const auto& s = layout.slice_for_rank(r);
    shards.push_back(copy_slice(full, s.row_off, s.row_ext, s.col_off, s.col_ext));
    bytes.push_back(s.elems() * 8);
  }
  const auto res =
      fab.all_gather(RankGroup::contiguous(0, 4), shards, bytes, zeros(4), Channel::kGather, "g");

  for (const auto& held : res.per_rank) {
    MatrixF64 rebuilt(10, 2);
    for (int r = 0; r < 4; ++r) {
      const auto& s = layout.slice_for_rank(r);
      paste_slice(rebuilt, held[static_cast<std::size_t>(r)], s.row_off, s.col_off);
    }
    CHECK(max_abs_diff(rebuilt, full) == 0.0);
  }
}

TEST_CASE("all_gather with a missing shard is an error") {
  Fabric fab(2, cheap_model());
  CHECK_THROWS_WITH_AS(fab.all_gather(RankGroup::contiguous(0, 2), std::vector<Payload>{{{1}}},
                                      {8}, zeros(2), Channel::kGather, "g"),
                       doctest::Contains("missing shard"), std::invalid_argument);
}

TEST_CASE("all_to_all is the transpose of the send matrix") {
  Fabric fab(4, cheap_model());
  const RankGroup group = RankGroup::contiguous(0, 4);
  std::vector<std::vector<Payload>> send(4, std::vector<Payload>(4));
  std::vector<std::vector<std::uint64_t>> bytes(4, std::vector<std::uint64_t>(4, 4));
  for (int r = 0; r < 4; ++r) {
    for (int p = 0; p < 4; ++p) {
      send[static_cast<std::size_t>(r)][static_cast<std::size_t>(p)].values = {100 * r + p};
    }
  }
  const auto res = fab.all_to_all(group, std::move(send), bytes, zeros(4), Channel::kGather, "x");
  for (int p = 0; p < 4; ++p) {
    for (int r = 0; r < 4; ++r) {
      CHECK(res.recv[static_cast<std::size_t>(p)][static_cast<std::size_t>(r)].values ==
            std::vector<int>{100 * r + p});
    }
  }
}

TEST_CASE("self-only all_to_all is the identity") {
  Fabric fab(2, cheap_model());
  std::vector<std::vector<Payload>> send(2, std::vector<Payload>(2));
  send[0][0].values = {1};
  send[1][1].values = {2};
  std::vector<std::vector<std::uint64_t>> bytes(2, {0, 0});
  bytes[0][0] = 8;
  bytes[1][1] = 8;
  const auto res = fab.all_to_all(RankGroup::contiguous(0, 2), std::move(send), bytes, zeros(2),
                                  Channel::kGather, "x");
  CHECK(res.recv[0][0].values == std::vector<int>{1});
  CHECK(res.recv[1][1].values == std::vector<int>{2});
  // self-transfers are free of bandwidth cost
  CHECK(res.time.end_us == doctest::Approx(10.0));
}

TEST_CASE("two ranks swap payloads") {
  Fabric fab(2, cheap_model());
  std::vector<std::vector<Payload>> send(2, std::vector<Payload>(2));
  send[0][1].values = {11};  // A
  send[1][0].values = {22};  // B
  std::vector<std::vector<std::uint64_t>> bytes(2, {0, 0});
  bytes[0][1] = 40;
  bytes[1][0] = 40;
  const auto res = fab.all_to_all(RankGroup::contiguous(0, 2), std::move(send), bytes, zeros(2),
                                  Channel::kGather, "swap");
  CHECK(res.recv[0][1].values == std::vector<int>{22});
  CHECK(res.recv[1][0].values == std::vector<int>{11});
  CHECK(res.time.end_us == doctest::Approx(10.0 + 40.0 / 100.0));
}

TEST_CASE("applying all_to_all twice restores the send matrix") {
  Fabric fab(3, cheap_model());
  const RankGroup group = RankGroup::contiguous(0, 3);
  std::vector<std::vector<Payload>> send(3, std::vector<Payload>(3));
  std::mt19937_64 eng(4);
  for (auto& row : send) {
    for (auto& cell : row) cell.values = {static_cast<int>(eng() % 1000)};
  }
  const auto original = send;
  std::vector<std::vector<std::uint64_t>> bytes(3, std::vector<std::uint64_t>(3, 8));
  auto once = fab.all_to_all(group, std::move(send), bytes, zeros(3), Channel::kGather, "a");
  const auto twice =
      fab.all_to_all(group, std::move(once.recv), bytes, zeros(3), Channel::kGather, "b");
  for (int r = 0; r < 3; ++r) {
    for (int p = 0; p < 3; ++p) {
      CHECK(twice.recv[static_cast<std::size_t>(r)][static_cast<std::size_t>(p)].values ==
            original[static_cast<std::size_t>(r)][static_cast<std::size_t>(p)].values);
    }
  }
}

TEST_CASE("ragged send matrices are rejected") {
  Fabric fab(2, cheap_model());
  std::vector<std::vector<Payload>> send(2, std::vector<Payload>(1));
  std::vector<std::vector<std::uint64_t>> bytes(2, std::vector<std::uint64_t>(2, 0));
  CHECK_THROWS_AS(fab.all_to_all(RankGroup::contiguous(0, 2), std::move(send), bytes, zeros(2),
                                 Channel::kGather, "x"),
                  std::invalid_argument);
}

TEST_CASE("compute time follows the flop rate") {
  Fabric fab(1, cheap_model());
  const auto iv = fab.compute(0, 5000, 0.0, "work");
  CHECK(iv.start_us == 0.0);
  CHECK(iv.end_us == doctest::Approx(5.0));
  const auto sim = fab.simulate();
  CHECK(sim.finish_us[0] == doctest::Approx(5.0));
}

TEST_CASE("peak memory is the max prefix of alloc minus free") {
  Fabric fab(1, cheap_model());
  fab.alloc(0, 100, 0.0, "x");
  fab.alloc(0, 50, 1.0, "y");
  fab.release(0, 100, 2.0, "x");
  fab.release(0, 50, 3.0, "y");
  const auto sim = fab.simulate();
  CHECK(sim.peak_bytes[0] == 150);
}

TEST_CASE("negative live memory is an accounting error") {
  Fabric fab(1, cheap_model());
  fab.alloc(0, 10, 0.0, "x");
  fab.release(0, 20, 1.0, "x");
  CHECK_THROWS_AS(fab.simulate(), std::runtime_error);
}

TEST_CASE("payloads are independent of the cost model") {
  const auto run = [](const CostModel& cm) {
    Fabric fab(2, cm);
    std::vector<std::vector<Payload>> send(2, std::vector<Payload>(2));
    send[0][1].values = {5};
    send[1][0].values = {6};
    std::vector<std::vector<std::uint64_t>> bytes(2, std::vector<std::uint64_t>(2, 8));
    return fab.all_to_all(RankGroup::contiguous(0, 2), std::move(send), bytes,
                          std::vector<double>(2, 0.0), Channel::kGather, "x");
  };
  CostModel slow = cheap_model();
  slow.bandwidth_bytes_per_us = 1.0;
  const auto a = run(cheap_model());
  const auto b = run(slow);
  for (int r = 0; r < 2; ++r) {
    for (int p = 0; p < 2; ++p) {
      CHECK(a.recv[static_cast<std::size_t>(r)][static_cast<std::size_t>(p)].values ==
            b.recv[static_cast<std::size_t>(r)][static_cast<std::size_t>(p)].values);
    }
  }
  CHECK(a.time.end_us != b.time.end_us);
}

TEST_CASE("collective ends never precede any participant's begin") {
  Fabric fab(3, cheap_model());
  const RankGroup group = RankGroup::contiguous(0, 3);
  fab.compute(1, 12345, 0.0, "skew");  // rank 1 arrives late
  std::vector<Payload> shards(3);
  fab.all_gather(group, shards, {8, 8, 8}, {0.0, 12.3, 1.0}, Channel::kGather, "g1");
  std::vector<std::vector<Payload>> send(3, std::vector<Payload>(3));
  std::vector<std::vector<std::uint64_t>> bytes(3, std::vector<std::uint64_t>(3, 8));
  fab.all_to_all(group, std::move(send), bytes, {5.0, 0.0, 30.0}, Channel::kScatter, "g2");

  std::map<std::string, double> max_begin;
  std::map<std::string, double> min_end;
  for (const Event& e : fab.trace().events) {
    if (e.kind == EventKind::kCollectiveBegin) {
      max_begin[e.tag] = std::max(max_begin.count(e.tag) ? max_begin[e.tag] : 0.0, e.start_us);
    }
    if (e.kind == EventKind::kCollectiveEnd) {
      min_end[e.tag] = min_end.count(e.tag) ? std::min(min_end[e.tag], e.end_us) : e.end_us;
    }
  }
  for (const auto& [tag, begin] : max_begin) {
    CHECK(min_end.at(tag) >= begin);
  }
}

TEST_CASE("identical call sequences produce byte-identical traces") {
  const auto run = [] {
    Fabric fab(2, cheap_model());
    fab.compute(0, 100, 0.0, "a");
    fab.compute(1, 250, 0.0, "b");
    std::vector<Payload> shards(2);
    auto g = fab.all_gather(RankGroup::contiguous(0, 2), shards, {8, 24}, zeros(2),
                            Channel::kGather, "g");
    fab.release(0, g.full_bytes, g.time.end_us, "g");
    fab.release(1, g.full_bytes, g.time.end_us, "g");
    std::ostringstream os;
    fab.trace().write_jsonl(os);
    return os.str();
  };
  CHECK(run() == run());
}

TEST_CASE("trace export carries the expected fields") {
  Fabric fab(1, cheap_model());
  fab.compute(0, 1000, 0.0, "ns:p0");
  std::ostringstream os;
  fab.trace().write_jsonl(os);
  const std::string line = os.str();
  CHECK(line.find("\"rank\":0") != std::string::npos);
  CHECK(line.find("\"kind\":\"compute\"") != std::string::npos);
  CHECK(line.find("\"start_us\":0.0") != std::string::npos);
  CHECK(line.find("\"flops\":1000") != std::string::npos);
  CHECK(line.find("\"tag\":\"ns:p0\"") != std::string::npos);
}
