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

#include <algorithm>
#include <cmath>
#include <sstream>

#include "parmuon/optim.hpp"

using namespace parmuon;
using namespace parmuon::optim;
using sharding::Mesh;
using sharding::ParamSpec;

namespace {

ParamSpec spec(int id, index_t rows, index_t cols, bool elementwise = false, int tp_dim = 1) {
  ParamSpec s;
  s.id = id;
  s.name = "p" + std::to_string(id);
  s.rows = rows;
  s.cols = cols;
  s.elem_bytes = 8;
  s.tp_dim = tp_dim;
  s.elementwise = elementwise;
  return s;
}

MuonHyper test_hyper() {
  MuonHyper h;
  h.lr = 0.05;
  h.weight_decay = 0.01;
  h.ns_iterations = 3;
  return h;
}

fabric::CostModel test_cost() {
  fabric::CostModel cm;
  cm.alpha_us = 20.0;
  cm.bandwidth_bytes_per_us = 100.0;
  cm.compute_flops_per_us = 1000.0;
  return cm;
}

std::vector<MatrixF64> seeded(const std::vector<ParamSpec>& specs, std::uint64_t salt) {
  std::vector<MatrixF64> out;
  for (const auto& s : specs) {
    MatrixF64 m(s.rows, s.cols);
    fill_normal(m, salt * 1000003ull + static_cast<std::uint64_t>(s.id));
    out.push_back(std::move(m));
  }
  return out;
}

struct Steppers {
  using StepFn = void (*)(OptimizerState<RealPayload<double>>&,
                          const ShardGrid<RealPayload<double>>&, fabric::Fabric&);
  StepFn fn;
  const char* name;
};

/// Runs one stepper for `steps` steps against the oracle and returns the worst
/// elementwise parameter/momentum deviation.
double run_against_oracle(Steppers stepper, const std::vector<ParamSpec>& specs,
                          const Mesh& mesh, int steps, index_t chunk_size = 2) {
  const MuonHyper hyper = test_hyper();
  PipelineConfig pipe{true, chunk_size, 2};
  auto st = make_state<RealPayload<double>>(specs, mesh, hyper, pipe, true);
  const auto initial = seeded(st.specs, 1);
  set_params_from_full(st, initial);

  auto oracle_params = initial;
  std::vector<MatrixF64> oracle_momenta;
  for (const auto& s : st.specs) oracle_momenta.emplace_back(s.rows, s.cols);

  fabric::Fabric fab(mesh.world_size(), test_cost());
  for (int step = 1; step <= steps; ++step) {
    const auto grads = seeded(st.specs, 100 + static_cast<std::uint64_t>(step));
    const auto grid = shard_full(st, grads);
    stepper.fn(st, grid, fab);
    oracle_step(oracle_params, oracle_momenta, grads, st.specs, hyper);
  }

  double worst = 0.0;
  const auto params = gather_full_params(st);
  const auto momenta = gather_full(st, st.momenta);
  for (std::size_t p = 0; p < st.specs.size(); ++p) {
    worst = std::max(worst, max_abs_diff(params[p], oracle_params[p]));
    worst = std::max(worst, max_abs_diff(momenta[p], oracle_momenta[p]));
  }
  // every replica group must agree with replica 0
  for (int rep = 1; rep < mesh.dp_replicate; ++rep) {
    const auto rep_params = gather_full_params(st, rep);
    for (std::size_t p = 0; p < st.specs.size(); ++p) {
      worst = std::max(worst, max_abs_diff(params[p], rep_params[p]));
    }
  }
  return worst;
}

int count_events(const fabric::EventTrace& trace, fabric::EventKind kind,
                 const std::string& tag_prefix) {
  int n = 0;
  for (const auto& e : trace.events) {
    if (e.kind == kind && e.tag.rfind(tag_prefix, 0) == 0) ++n;
  }
  return n;
}

std::string trace_bytes(const fabric::EventTrace& trace) {
  std::ostringstream os;
  trace.write_jsonl(os);
  return os.str();
}

}  // namespace

TEST_CASE("oracle: zero gradients only decay the parameters") {
  const auto specs = std::vector<ParamSpec>{spec(0, 4, 6), spec(1, 3, 3)};
  MuonHyper hyper = test_hyper();
  hyper.weight_decay = 0.5;
  auto params = seeded(specs, 3);
  const auto before = params;
  std::vector<MatrixF64> momenta{MatrixF64(4, 6), MatrixF64(3, 3)};
  std::vector<MatrixF64> grads{MatrixF64(4, 6), MatrixF64(3, 3)};
  oracle_step(params, momenta, grads, specs, hyper);
  for (std::size_t p = 0; p < specs.size(); ++p) {
    for (std::size_t i = 0; i < params[p].data.size(); ++i) {
      CHECK(params[p].data[i] ==
            doctest::Approx(before[p].data[i] * (1.0 - hyper.lr * 0.5)).epsilon(1e-15));
    }
  }
}

TEST_CASE("oracle: scalar parameter chains the scalar recurrence") {
  MuonHyper hyper;
  hyper.lr = 0.1;
  hyper.weight_decay = 0.0;
  hyper.ns_iterations = 1;
  const auto specs = std::vector<ParamSpec>{spec(0, 1, 1)};
  std::vector<MatrixF64> params{MatrixF64(1, 1, {5.0})};
  std::vector<MatrixF64> momenta{MatrixF64(1, 1)};
  std::vector<MatrixF64> grads{MatrixF64(1, 1, {2.0})};
  oracle_step(params, momenta, grads, specs, hyper);
  // effective gradient normalizes to ~1; one quintic iteration gives
  // a + b + c = 0.701.
  CHECK(params[0](0, 0) == doctest::Approx(5.0 - 0.1 * 0.701).epsilon(1e-3));
}

TEST_CASE("oracle is deterministic") {
  const auto specs = std::vector<ParamSpec>{spec(0, 6, 10), spec(1, 8, 4)};
  auto p1 = seeded(specs, 4);
  auto p2 = p1;
  std::vector<MatrixF64> m1{MatrixF64(6, 10), MatrixF64(8, 4)};
  auto m2 = m1;
  const auto grads = seeded(specs, 5);
  oracle_step(p1, m1, grads, specs, test_hyper());
  oracle_step(p2, m2, grads, specs, test_hyper());
  for (std::size_t p = 0; p < specs.size(); ++p) {
    CHECK(p1[p].data == p2[p].data);
    CHECK(m1[p].data == m2[p].data);
  }
}

TEST_CASE("single rank reduces to the oracle") {
  const auto specs = std::vector<ParamSpec>{spec(0, 6, 10), spec(1, 8, 4), spec(2, 5, 5)};
  const Mesh mesh{1, 1, 1};
  CHECK(run_against_oracle({&distributed_muon_step<RealPayload<double>>, "distributed"}, specs,
                           mesh, 1) == 0.0);
  CHECK(run_against_oracle({&parallel_muon_step<RealPayload<double>>, "parallel"}, specs, mesh,
                           1) == 0.0);
  CHECK(run_against_oracle({&parallel_muon_step_pipelined<RealPayload<double>>, "pipelined"},
                           specs, mesh, 1) == 0.0);
}

TEST_CASE("all steppers match the oracle exactly on a 4-rank model") {
  std::vector<ParamSpec> specs;
  for (int i = 0; i < 10; ++i) {
    specs.push_back(spec(i, 8 + 4 * (i % 3), 6 + 2 * (i % 4)));
  }
  specs.push_back(spec(10, 16, 1, /*elementwise=*/true));
  specs.push_back(spec(11, 12, 1, /*elementwise=*/true));
  const Mesh mesh{1, 4, 1};
  for (const Steppers s : {Steppers{&distributed_muon_step<RealPayload<double>>, "distributed"},
                           Steppers{&parallel_muon_step<RealPayload<double>>, "parallel"},
                           Steppers{&parallel_muon_step_pipelined<RealPayload<double>>,
                                    "pipelined"}}) {
    CAPTURE(s.name);
    CHECK(run_against_oracle(s, specs, mesh, 3) == 0.0);
  }
}

TEST_CASE("hybrid and replicated meshes match the oracle exactly") {
  std::vector<ParamSpec> specs;
  for (int i = 0; i < 8; ++i) {
    specs.push_back(spec(i, 8 + 2 * (i % 3), 8 + 4 * (i % 2), false, i % 2));
  }
  for (const Mesh mesh : {Mesh{1, 2, 2}, Mesh{2, 2, 1}, Mesh{1, 2, 1}, Mesh{2, 1, 2}}) {
    CAPTURE(mesh.dp_replicate);
    CAPTURE(mesh.dp_shard);
    CAPTURE(mesh.tp);
    for (const Steppers s :
         {Steppers{&distributed_muon_step<RealPayload<double>>, "distributed"},
          Steppers{&parallel_muon_step<RealPayload<double>>, "parallel"},
          Steppers{&parallel_muon_step_pipelined<RealPayload<double>>, "pipelined"}}) {
      CAPTURE(s.name);
      CHECK(run_against_oracle(s, specs, mesh, 2) == 0.0);
    }
  }
}

TEST_CASE("newton-schulz compute events: redundant for distributed, one per param for parallel") {
  std::vector<ParamSpec> specs;
  for (int i = 0; i < 6; ++i) specs.push_back(spec(i, 8, 8));
  const Mesh mesh{1, 2, 1};
  const MuonHyper hyper = test_hyper();
  PipelineConfig pipe{true, 2, 2};

  const auto run = [&](auto stepper) {
    auto st = make_state<RealPayload<double>>(specs, mesh, hyper, pipe, false);
    set_params_from_full(st, seeded(st.specs, 1));
    fabric::Fabric fab(mesh.world_size(), test_cost());
    const auto grid = shard_full(st, seeded(st.specs, 2));
    stepper(st, grid, fab);
    return fab;
  };

  const auto dist = run(
      [](auto& st, const auto& g, auto& f) { distributed_muon_step(st, g, f); });
  CHECK(count_events(dist.trace(), fabric::EventKind::kCompute, "ns:") == 6 * 2);

  const auto par = run([](auto& st, const auto& g, auto& f) { parallel_muon_step(st, g, f); });
  CHECK(count_events(par.trace(), fabric::EventKind::kCompute, "ns:") == 6);

  const auto piped = run(
      [](auto& st, const auto& g, auto& f) { parallel_muon_step_pipelined(st, g, f); });
  CHECK(count_events(piped.trace(), fabric::EventKind::kCompute, "ns:") == 6);

  // 2 ranks x 4 params: each rank computes exactly its owned params
  std::vector<ParamSpec> four;
  for (int i = 0; i < 4; ++i) four.push_back(spec(i, 8, 8));
  auto st = make_state<RealPayload<double>>(four, mesh, hyper, pipe, false);
  set_params_from_full(st, seeded(st.specs, 1));
  fabric::Fabric fab(mesh.world_size(), test_cost());
  parallel_muon_step(st, shard_full(st, seeded(st.specs, 2)), fab);
  int per_rank[2] = {0, 0};
  for (const auto& e : fab.trace().events) {
    if (e.kind == fabric::EventKind::kCompute && e.tag.rfind("ns:", 0) == 0) {
      per_rank[e.rank] += 1;
    }
  }
  CHECK(per_rank[0] == 2);
  CHECK(per_rank[1] == 2);
}

TEST_CASE("pipelined schedule with one chunk degenerates to the non-pipelined trace") {
  std::vector<ParamSpec> specs;
  for (int i = 0; i < 5; ++i) specs.push_back(spec(i, 8, 8));
  const Mesh mesh{1, 2, 1};
  const MuonHyper hyper = test_hyper();

  auto st_a = make_state<RealPayload<double>>(specs, mesh, hyper, {false, 32, 2}, false);
  auto st_b = make_state<RealPayload<double>>(specs, mesh, hyper, {true, 64, 2}, false);
  set_params_from_full(st_a, seeded(st_a.specs, 1));
  set_params_from_full(st_b, seeded(st_b.specs, 1));
  fabric::Fabric fab_a(2, test_cost());
  fabric::Fabric fab_b(2, test_cost());
  parallel_muon_step(st_a, shard_full(st_a, seeded(st_a.specs, 2)), fab_a);
  parallel_muon_step_pipelined(st_b, shard_full(st_b, seeded(st_b.specs, 2)), fab_b);
  CHECK(trace_bytes(fab_a.trace()) == trace_bytes(fab_b.trace()));
}

TEST_CASE("steady state overlaps gather, compute, and scatter on one rank") {
  std::vector<ParamSpec> specs;
  for (int i = 0; i < 8; ++i) specs.push_back(spec(i, 64, 64));
  const Mesh mesh{1, 2, 1};
  MuonHyper hyper = test_hyper();
  hyper.ns_iterations = 5;
  PipelineConfig pipe{true, 2, 2};

  auto st = make_state<RealPayload<double>>(specs, mesh, hyper, pipe, false);
  set_params_from_full(st, seeded(st.specs, 1));
  fabric::Fabric fab(2, test_cost());
  parallel_muon_step_pipelined(st, shard_full(st, seeded(st.specs, 2)), fab);

  struct Span {
    double start, end;
    std::string tag;
  };
  std::vector<Span> ns, gathers, scatters;
  for (const auto& e : fab.trace().events) {
    if (e.rank != 0) continue;
    if (e.kind == fabric::EventKind::kCompute && e.tag.rfind("ns:", 0) == 0) {
      ns.push_back({e.start_us, e.end_us, e.tag});
    }
    if (e.kind == fabric::EventKind::kSend && e.tag.rfind("gather:", 0) == 0) {
      gathers.push_back({e.start_us, e.end_us, e.tag});
    }
    if (e.kind == fabric::EventKind::kSend && e.tag.rfind("scatter:", 0) == 0) {
      scatters.push_back({e.start_us, e.end_us, e.tag});
    }
  }
  bool overlap = false;
  for (const auto& c : ns) {
    for (const auto& g : gathers) {
      for (const auto& s : scatters) {
        const double lo = std::max({c.start, g.start, s.start});
        const double hi = std::min({c.end, g.end, s.end});
        if (lo < hi) overlap = true;
      }
    }
  }
  CHECK(overlap);

  // the pipelined makespan beats the sequential gather -> compute -> scatter
  auto st_seq = make_state<RealPayload<double>>(specs, mesh, hyper, {false, 2, 2}, false);
  set_params_from_full(st_seq, seeded(st_seq.specs, 1));
  fabric::Fabric fab_seq(2, test_cost());
  parallel_muon_step(st_seq, shard_full(st_seq, seeded(st_seq.specs, 2)), fab_seq);

  const auto makespan = [](fabric::Fabric& f) {
    const auto sim = f.simulate();
    return *std::max_element(sim.finish_us.begin(), sim.finish_us.end());
  };
  CHECK(makespan(fab) < makespan(fab_seq));
}

TEST_CASE("peak memory grows with chunk size and pipelining lowers it") {
  std::vector<ParamSpec> specs;
  for (int i = 0; i < 12; ++i) specs.push_back(spec(i, 32, 32));
  const Mesh mesh{1, 2, 1};
  const MuonHyper hyper = test_hyper();

  const auto peak = [&](bool pipelined, index_t chunk) {
    auto st = make_state<RealPayload<double>>(specs, mesh, hyper, {pipelined, chunk, 2}, false);
    set_params_from_full(st, seeded(st.specs, 1));
    fabric::Fabric fab(2, test_cost());
    const auto grid = shard_full(st, seeded(st.specs, 2));
    if (pipelined) {
      parallel_muon_step_pipelined(st, grid, fab);
    } else {
      parallel_muon_step(st, grid, fab);
    }
    const auto sim = fab.simulate();
    return *std::max_element(sim.peak_bytes.begin(), sim.peak_bytes.end());
  };

  const auto p2 = peak(true, 2);
  const auto p4 = peak(true, 4);
  const auto p12 = peak(true, 12);
  const auto full = peak(false, 12);
  CHECK(p2 <= p4);
  CHECK(p4 <= p12);
  CHECK(p12 == full);
  CHECK(p2 < full);
}

TEST_CASE("real and shape payloads drive identical traces") {
  std::vector<ParamSpec> specs;
  for (int i = 0; i < 5; ++i) specs.push_back(spec(i, 8, 12));
  specs.push_back(spec(5, 8, 1, true));
  const Mesh mesh{1, 2, 1};
  const MuonHyper hyper = test_hyper();
  PipelineConfig pipe{true, 2, 2};

  auto real_state = make_state<RealPayload<double>>(specs, mesh, hyper, pipe, true);
  set_params_from_full(real_state, seeded(real_state.specs, 1));
  fabric::Fabric real_fab(2, test_cost());
  parallel_muon_step_pipelined(real_state, shard_full(real_state, seeded(real_state.specs, 2)),
                               real_fab);

  auto shape_state = make_state<ShapePayload>(specs, mesh, hyper, pipe, true);
  fabric::Fabric shape_fab(2, test_cost());
  const auto shape_grads = make_shape_grads(shape_state);
  parallel_muon_step_pipelined(shape_state, shape_grads, shape_fab);

  CHECK(trace_bytes(real_fab.trace()) == trace_bytes(shape_fab.trace()));
}

TEST_CASE("rebuilding the schedule reproduces the trace byte for byte") {
  std::vector<ParamSpec> specs;
  for (int i = 0; i < 7; ++i) specs.push_back(spec(i, 8 + i, 10));
  const Mesh mesh{1, 2, 1};
  const auto run = [&] {
    auto st = make_state<RealPayload<double>>(specs, mesh, test_hyper(), {true, 3, 2}, true);
    set_params_from_full(st, seeded(st.specs, 1));
    fabric::Fabric fab(2, test_cost());
    for (int step = 1; step <= 2; ++step) {
      parallel_muon_step_pipelined(st, shard_full(st, seeded(st.specs, 10 + static_cast<std::uint64_t>(step))), fab);
    }
    return trace_bytes(fab.trace());
  };
  CHECK(run() == run());
}

TEST_CASE("per-rank compute events never overlap in time") {
  std::vector<ParamSpec> specs;
  for (int i = 0; i < 9; ++i) specs.push_back(spec(i, 12 + i, 10));
  const Mesh mesh{1, 3, 1};
  auto st = make_state<RealPayload<double>>(specs, mesh, test_hyper(), {true, 2, 2}, true);
  set_params_from_full(st, seeded(st.specs, 1));
  fabric::Fabric fab(3, test_cost());
  parallel_muon_step_pipelined(st, shard_full(st, seeded(st.specs, 2)), fab);

  std::vector<std::vector<std::pair<double, double>>> spans(3);
  for (const auto& e : fab.trace().events) {
    if (e.kind == fabric::EventKind::kCompute) {
      spans[static_cast<std::size_t>(e.rank)].push_back({e.start_us, e.end_us});
    }
  }
  for (auto& per_rank : spans) {
    std::sort(per_rank.begin(), per_rank.end());
    for (std::size_t i = 0; i + 1 < per_rank.size(); ++i) {
      CHECK(per_rank[i].second <= per_rank[i + 1].first + 1e-12);
    }
  }
}

TEST_CASE("mismatched gradient shards are rejected") {
  const auto specs = std::vector<ParamSpec>{spec(0, 8, 8), spec(1, 8, 8)};
  const Mesh mesh{1, 2, 1};
  auto st = make_state<RealPayload<double>>(specs, mesh, test_hyper(), {false, 2, 2}, false);
  set_params_from_full(st, seeded(st.specs, 1));
  auto grid = shard_full(st, seeded(st.specs, 2));
  grid[0][1] = MatrixF64(3, 3);  // wrong slice shape
  fabric::Fabric fab(2, test_cost());
  CHECK_THROWS_AS(parallel_muon_step(st, grid, fab), std::invalid_argument);
}

TEST_CASE("parallel and distributed agree bit for bit") {
  std::vector<ParamSpec> specs;
  for (int i = 0; i < 9; ++i) specs.push_back(spec(i, 12, 6 + i));
  const Mesh mesh{1, 3, 1};
  const MuonHyper hyper = test_hyper();

  auto a = make_state<RealPayload<double>>(specs, mesh, hyper, {false, 4, 2}, true);
  auto b = a;
  set_params_from_full(a, seeded(a.specs, 1));
  set_params_from_full(b, seeded(b.specs, 1));
  fabric::Fabric fa(3, test_cost());
  fabric::Fabric fb(3, test_cost());
  for (int step = 1; step <= 2; ++step) {
    const auto grads = seeded(a.specs, 20 + static_cast<std::uint64_t>(step));
    distributed_muon_step(a, shard_full(a, grads), fa);
    parallel_muon_step(b, shard_full(b, grads), fb);
  }
  const auto pa = gather_full_params(a);
  const auto pb = gather_full_params(b);
  for (std::size_t p = 0; p < specs.size(); ++p) {
    CHECK(pa[p].data == pb[p].data);
  }
}
