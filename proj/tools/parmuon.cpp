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

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "parmuon/harness.hpp"
#include "parmuon/kernels.hpp"

namespace {

using namespace parmuon;

struct CommonOpts {
  std::string config_path;
  std::string report_path;
  std::string trace_path;
  std::string preset;
  std::optional<int> ranks;
  std::optional<int> dp_replicate;
  std::optional<int> tp;
  std::optional<std::string> optimizer;
  std::optional<bool> pipeline;
  std::optional<bool> sort;
  std::optional<index_t> chunk_size;
  std::optional<int> steps;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
  std::optional<std::string> payload;
  std::string kernels;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("-c,--config", o.config_path, "experiment config file (JSON)");
  cmd->add_option("--preset", o.preset, "built-in model preset (e.g. motif2-12.7b)");
  cmd->add_option("--ranks", o.ranks, "FSDP shard ranks (mesh.dp_shard)");
  cmd->add_option("--dp-replicate", o.dp_replicate, "replica groups (mesh.dp_replicate)");
  cmd->add_option("--tp", o.tp, "tensor-parallel degree (mesh.tp)");
  cmd->add_option("--optimizer", o.optimizer, "distributed | parallel");
  cmd->add_option("--pipeline", o.pipeline, "enable chunked pipelining");
  cmd->add_option("--sort", o.sort, "FLOPs-sorted round-robin assignment");
  cmd->add_option("--chunk-size", o.chunk_size, "pipeline chunk size");
  cmd->add_option("--steps", o.steps, "optimizer steps to simulate");
  cmd->add_option("--seed", o.seed, "seed for synthetic gradients");
  cmd->add_option("--precision", o.precision, "f32 | f64");
  cmd->add_option("--payload", o.payload, "auto | real | shapes");
  cmd->add_option("--report", o.report_path, "write the report JSON here");
  cmd->add_option("--trace", o.trace_path, "write the event trace (JSONL) here");
  cmd->add_option("--kernels", o.kernels, "force kernel backend: scalar | avx2");
}

harness::ExperimentConfig build_config(const CommonOpts& o) {
  harness::ExperimentConfig cfg;
  if (!o.config_path.empty()) {
    cfg = harness::load_config(o.config_path);
  } else if (!o.preset.empty()) {
    nlohmann::json j;
    j["model"] = {{"preset", o.preset}};
    cfg = harness::config_from_json(j, "<cli>");
  } else {
    throw std::invalid_argument("need --config or --preset");
  }
  if (!o.preset.empty() && !o.config_path.empty()) {
    cfg.model = harness::preset_params(o.preset);
    cfg.preset = o.preset;
  }
  if (o.ranks) cfg.mesh.dp_shard = *o.ranks;
  if (o.dp_replicate) cfg.mesh.dp_replicate = *o.dp_replicate;
  if (o.tp) cfg.mesh.tp = *o.tp;
  if (o.optimizer) {
    if (*o.optimizer == "distributed") {
      cfg.optimizer = harness::OptimizerKind::kDistributed;
    } else if (*o.optimizer == "parallel") {
      cfg.optimizer = harness::OptimizerKind::kParallel;
    } else {
      throw std::invalid_argument("--optimizer: expected distributed or parallel");
    }
  }
  if (o.pipeline) cfg.pipeline = *o.pipeline;
  if (o.sort) cfg.sort_by_flops = *o.sort;
  if (o.chunk_size) cfg.chunk_size = *o.chunk_size;
  if (o.steps) cfg.steps = *o.steps;
  if (o.seed) cfg.seed = *o.seed;
  if (o.precision) {
    if (*o.precision == "f32") {
      cfg.precision = harness::Precision::kF32;
    } else if (*o.precision == "f64") {
      cfg.precision = harness::Precision::kF64;
    } else {
      throw std::invalid_argument("--precision: expected f32 or f64");
    }
  }
  if (o.payload) {
    if (*o.payload == "auto") {
      cfg.payload = harness::PayloadMode::kAuto;
    } else if (*o.payload == "real") {
      cfg.payload = harness::PayloadMode::kReal;
    } else if (*o.payload == "shapes") {
      cfg.payload = harness::PayloadMode::kShapes;
    } else {
      throw std::invalid_argument("--payload: expected auto, real or shapes");
    }
  }
  if (!o.kernels.empty()) {
    kernels::set_backend(o.kernels == "scalar" ? kernels::Backend::kScalar
                                               : kernels::Backend::kAvx2);
  }
  cfg.validate();
  return cfg;
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << contents;
}

void emit_report(const CommonOpts& o, const nlohmann::ordered_json& j,
                 const fabric::EventTrace& trace) {
  if (!o.report_path.empty()) {
    write_file(o.report_path, j.dump(2) + "\n");
  }
  if (!o.trace_path.empty()) {
    std::ofstream out(o.trace_path);
    if (!out) throw std::runtime_error("cannot write " + o.trace_path);
    trace.write_jsonl(out);
  }
}

bool oracle_gate_ok(const harness::Report& r) {
  return !r.metrics.oracle_checked || r.metrics.oracle_divergence <= 1e-12;
}

int cmd_run(const CommonOpts& o, bool compare_variants) {
  const auto base = build_config(o);
  std::vector<harness::Report> rows;
  fabric::EventTrace trace;
  nlohmann::ordered_json out;

  if (compare_variants) {
    // The four canonical configurations: the baseline, then parallel without
    // pipelining, pipelined unsorted, and pipelined sorted.
    struct Variant {
      harness::OptimizerKind kind;
      bool pipeline;
      bool sorted;
    };
    const Variant variants[] = {
        {harness::OptimizerKind::kDistributed, false, false},
        {harness::OptimizerKind::kParallel, false, false},
        {harness::OptimizerKind::kParallel, true, false},
        {harness::OptimizerKind::kParallel, true, true},
    };
    nlohmann::ordered_json reports = nlohmann::ordered_json::array();
    for (const Variant& v : variants) {
      harness::ExperimentConfig cfg = base;
      cfg.optimizer = v.kind;
      cfg.pipeline = v.pipeline;
      cfg.sort_by_flops = v.sorted;
      rows.push_back(harness::run_experiment(cfg));
      reports.push_back(harness::report_to_json(rows.back()));
    }
    out = std::move(reports);
  } else {
    rows.push_back(harness::run_experiment(base, &trace));
    out = harness::report_to_json(rows.front());
  }

  emit_report(o, out, trace);
  std::cout << harness::render_table(rows);
  for (const auto& r : rows) {
    if (!oracle_gate_ok(r)) {
      std::cerr << "oracle check FAILED: max divergence " << r.metrics.oracle_divergence
                << "\n";
      return 1;
    }
  }
  return 0;
}

int cmd_sweep(const CommonOpts& o, const std::string& sizes_arg) {
  auto cfg = build_config(o);
  std::vector<index_t> sizes;
  std::stringstream ss(sizes_arg);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "all") {
      sizes.push_back(0);
    } else {
      sizes.push_back(static_cast<index_t>(std::stoll(item)));
    }
  }
  const auto sweep = harness::sweep_chunk_size(cfg, sizes);
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& e : sweep.entries) {
    nlohmann::ordered_json ej;
    ej["chunk_size"] = e.chunk_size == 0 ? nlohmann::ordered_json("all")
                                         : nlohmann::ordered_json(e.chunk_size);
    ej["report"] = harness::report_to_json(e.report);
    j.push_back(std::move(ej));
  }
  fabric::EventTrace empty;
  emit_report(o, j, empty);
  std::cout << harness::render_sweep(sweep);
  for (const auto& e : sweep.entries) {
    if (!oracle_gate_ok(e.report)) return 1;
  }
  return 0;
}

int cmd_bench_polynorm(const CommonOpts& o, const std::string& rows_arg,
                       const std::string& features_arg) {
  const auto parse_list = [](const std::string& arg) {
    std::vector<index_t> out;
    std::stringstream ss(arg);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<index_t>(std::stoll(item)));
    return out;
  };
  if (!o.kernels.empty()) {
    kernels::set_backend(o.kernels == "scalar" ? kernels::Backend::kScalar
                                               : kernels::Backend::kAvx2);
  }
  harness::Precision precision = harness::Precision::kF32;
  if (o.precision && *o.precision == "f64") precision = harness::Precision::kF64;
  const auto result = harness::bench_polynorm(parse_list(rows_arg), parse_list(features_arg),
                                              precision, o.seed.value_or(0));
  if (!o.report_path.empty()) {
    write_file(o.report_path, harness::polynorm_bench_to_json(result).dump(2) + "\n");
  }
  std::cout << harness::render_polynorm_bench(result);
  const double tol = precision == harness::Precision::kF32 ? 1e-6 : 1e-12;
  if (result.max_fwd_delta > tol || result.max_mul_delta > tol) {
    std::cerr << "fused/naive equivalence FAILED\n";
    return 1;
  }
  return 0;
}

int cmd_verify(const CommonOpts& o) {
  auto cfg = build_config(o);
  cfg.payload = harness::PayloadMode::kReal;
  const auto result = harness::verify_config(cfg);
  std::cout << "oracle divergence (Frobenius, worst parameter)\n"
            << "  distributed_muon      " << result.distributed << "\n"
            << "  parallel_muon         " << result.parallel << "\n"
            << "  parallel_muon (piped) " << result.pipelined << "\n"
            << "  momentum (worst)      " << result.momentum << "\n"
            << (result.pass ? "PASS" : "FAIL") << " (tolerance 1e-12)\n";
  return result.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallel Muon sharded-optimizer engine and communication simulator"};
  app.require_subcommand(1);

  CommonOpts run_opts;
  bool compare_variants = false;
  auto* run = app.add_subcommand("run", "run one experiment config");
  add_common(run, run_opts);
  run->add_flag("--compare-variants", compare_variants,
                "run the four canonical optimizer variants and print one table");

  CommonOpts sweep_opts;
  std::string sizes = "4,8,32,128,all";
  auto* sweep = app.add_subcommand("sweep", "sweep pipeline chunk sizes");
  add_common(sweep, sweep_opts);
  sweep->add_option("--sizes", sizes, "comma-separated chunk sizes; 'all' = one chunk");

  CommonOpts bench_opts;
  std::string bench_rows = "1024,2048,4096,8192";
  std::string bench_features = "8192,16384";
  auto* bench = app.add_subcommand("bench-polynorm", "fused vs naive PolyNorm grid");
  bench->add_option("--rows", bench_rows, "comma-separated row counts");
  bench->add_option("--features", bench_features, "comma-separated feature dims");
  bench->add_option("--precision", bench_opts.precision, "f32 | f64");
  bench->add_option("--seed", bench_opts.seed, "data seed");
  bench->add_option("--report", bench_opts.report_path, "write bench JSON here");
  bench->add_option("--kernels", bench_opts.kernels, "force kernel backend");

  CommonOpts verify_opts;
  auto* verify = app.add_subcommand("verify", "oracle-only correctness check");
  add_common(verify, verify_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_opts, compare_variants);
    if (sweep->parsed()) return cmd_sweep(sweep_opts, sizes);
    if (bench->parsed()) return cmd_bench_polynorm(bench_opts, bench_rows, bench_features);
    if (verify->parsed()) return cmd_verify(verify_opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
