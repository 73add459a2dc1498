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
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "parmuon/fabric.hpp"
#include "parmuon/muon.hpp"
#include "parmuon/optim.hpp"
#include "parmuon/sharding.hpp"

namespace parmuon::harness {

enum class OptimizerKind { kDistributed, kParallel };
enum class Precision { kF32, kF64 };

/// Real payloads carry matrix data (oracle-checkable); shape payloads carry
/// dimensions only. Auto picks real when the model is small enough to verify.
enum class PayloadMode { kAuto, kReal, kShapes };

struct ExperimentConfig {
  std::vector<sharding::ParamSpec> model;
  std::string preset;  // set when the model came from a named preset
  sharding::Mesh mesh;
  OptimizerKind optimizer = OptimizerKind::kParallel;
  bool pipeline = false;
  bool sort_by_flops = false;
  index_t chunk_size = 32;
  int warmup_depth = 2;
  int steps = 1;
  MuonHyper hyper;
  fabric::CostModel cost_model;
  std::uint64_t seed = 0;
  Precision precision = Precision::kF64;
  PayloadMode payload = PayloadMode::kAuto;
  int oracle_check_max_params = 64;
  std::uint64_t real_payload_max_elems = 1ull << 24;

  void validate() const;
  bool use_real_payload() const;
  std::string label() const;
};

/// 40 decoder layers of attention (4096x4096 q/k/v/o) and feed-forward
/// (16384x4096 gate/up, 4096x16384 down) matrices, 2-byte elements.
std::vector<sharding::ParamSpec> motif2_12_7b_params();
std::vector<sharding::ParamSpec> preset_params(const std::string& name);

ExperimentConfig config_from_json(const nlohmann::json& j, const std::string& source);
ExperimentConfig load_config(const std::string& path);
nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);

struct ReportMetrics {
  double time_ms = 0.0;
  double peak_mem_mb = 0.0;
  double tflops_per_gpu = 0.0;
  std::uint64_t useful_flops_per_step = 0;
  bool oracle_checked = false;
  double oracle_divergence = 0.0;
};

struct Report {
  std::string label;
  ExperimentConfig config;
  ReportMetrics metrics;
  std::vector<double> rank_finish_ms;
  std::vector<double> rank_peak_mb;
};

nlohmann::ordered_json metrics_to_json(const ReportMetrics& m);
nlohmann::ordered_json report_to_json(const Report& r);
std::string render_table(const std::vector<Report>& rows);

/// Build state + fabric, run `steps` optimizer steps with seeded synthetic
/// gradients, simulate the trace, and cross-check against the dense oracle
/// when the model is small enough. Fails (throws) if the oracle check
/// diverges. `trace_out`, when set, receives the full event trace.
Report run_experiment(const ExperimentConfig& cfg, fabric::EventTrace* trace_out = nullptr);

struct SweepEntry {
  index_t chunk_size = 0;  // 0 means "all parameters in one chunk"
  Report report;
};

struct SweepResult {
  std::vector<SweepEntry> entries;
  index_t best_time_chunk = 0;
  index_t best_memory_chunk = 0;
};

/// One pipelined run per chunk size (0 = single chunk). Sizes are reported in
/// input order; the summary names the time- and memory-minimizing sizes.
SweepResult sweep_chunk_size(const ExperimentConfig& cfg, const std::vector<index_t>& sizes);
std::string render_sweep(const SweepResult& sweep);

struct VerifyResult {
  double distributed = 0.0;
  double parallel = 0.0;
  double pipelined = 0.0;
  double momentum = 0.0;  // worst momentum divergence across steppers
  bool pass = false;
};

/// Run all three steppers with real payloads and compare parameters and
/// momenta against the dense oracle (Frobenius distance, worst parameter).
VerifyResult verify_config(const ExperimentConfig& cfg);

struct PolyNormBenchCell {
  index_t rows = 0;
  index_t features = 0;
  double fwd_delta = 0.0;
  double fwd_traffic_ratio = 0.0;  // fused reads / naive reads
  double mul_delta = 0.0;
  double mul_traffic_ratio = 0.0;
  double bwd_delta = 0.0;
  double bwd_traffic_ratio = 0.0;
};

struct PolyNormBenchResult {
  std::vector<PolyNormBenchCell> cells;
  double geomean_fwd_ratio = 0.0;
  double geomean_mul_ratio = 0.0;
  double geomean_bwd_ratio = 0.0;
  double max_fwd_delta = 0.0;
  double max_mul_delta = 0.0;
  double max_bwd_delta = 0.0;
};

/// Fused-vs-naive equivalence deltas and read-traffic ratios over a shape
/// grid. Defaults mirror the large-model activation sizes: features 8192 and
/// 16384, rows 1024..8192.
PolyNormBenchResult bench_polynorm(const std::vector<index_t>& rows = {1024, 2048, 4096, 8192},
                                   const std::vector<index_t>& features = {8192, 16384},
                                   Precision precision = Precision::kF32,
                                   std::uint64_t seed = 0);
std::string render_polynorm_bench(const PolyNormBenchResult& r);
nlohmann::ordered_json polynorm_bench_to_json(const PolyNormBenchResult& r);

/// Deterministic per-(seed, step, param) stream seed.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t step, std::uint64_t param_id);

}  // namespace parmuon::harness
