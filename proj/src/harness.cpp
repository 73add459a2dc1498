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

#include "parmuon/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "parmuon/kernels.hpp"
#include "parmuon/polynorm.hpp"

namespace parmuon::harness {

namespace {

constexpr double kMiB = 1048576.0;
constexpr double kOracleTolerance = 1e-12;

[[noreturn]] void config_error(const std::string& source, const std::string& what) {
  throw std::invalid_argument(source + ": " + what);
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                const std::string& source, const std::string& scope) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      config_error(source, "unknown key \"" + (scope.empty() ? key : scope + "." + key) + "\"");
    }
  }
}

}  // namespace

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t step, std::uint64_t param_id) {
  return mix64(mix64(mix64(seed) ^ step) ^ param_id);
}

std::vector<sharding::ParamSpec> motif2_12_7b_params() {
  constexpr int kLayers = 40;
  constexpr index_t kHidden = 4096;
  constexpr index_t kFeedForward = 16384;
  std::vector<sharding::ParamSpec> params;
  params.reserve(kLayers * 7);
  int id = 0;
  for (int layer = 0; layer < kLayers; ++layer) {
    const std::string prefix = "layers." + std::to_string(layer) + ".";
    const auto add = [&](const std::string& name, index_t rows, index_t cols) {
      sharding::ParamSpec s;
      s.id = id++;
      s.name = prefix + name;
      s.rows = rows;
      s.cols = cols;
      s.elem_bytes = 2;
      params.push_back(std::move(s));
    };
    add("attn.wq", kHidden, kHidden);
    add("attn.wk", kHidden, kHidden);
    add("attn.wv", kHidden, kHidden);
    add("attn.wo", kHidden, kHidden);
    add("ffn.w_gate", kFeedForward, kHidden);
    add("ffn.w_up", kFeedForward, kHidden);
    add("ffn.w_down", kHidden, kFeedForward);
  }
  return params;
}

std::vector<sharding::ParamSpec> preset_params(const std::string& name) {
  if (name == "motif2-12.7b") return motif2_12_7b_params();
  throw std::invalid_argument("unknown model preset \"" + name + "\"");
}

void ExperimentConfig::validate() const {
  if (model.empty()) {
    throw std::invalid_argument("config: empty model (no parameters)");
  }
  for (const auto& p : model) p.validate();
  mesh.validate();
  hyper.validate();
  cost_model.validate();
  require(chunk_size >= 1, "config: key \"chunk_size\" must be >= 1");
  require(warmup_depth >= 1, "config: key \"warmup_depth\" must be >= 1");
  require(steps >= 1, "config: key \"steps\" must be >= 1");
  require(oracle_check_max_params >= 0, "config: key \"oracle_check_max_params\" must be >= 0");
}

bool ExperimentConfig::use_real_payload() const {
  if (payload == PayloadMode::kReal) return true;
  if (payload == PayloadMode::kShapes) return false;
  if (model.size() > static_cast<std::size_t>(oracle_check_max_params)) return false;
  std::uint64_t elems = 0;
  for (const auto& p : model) elems += p.elems();
  return elems <= real_payload_max_elems;
}

std::string ExperimentConfig::label() const {
  return optimizer == OptimizerKind::kDistributed ? "distributed_muon" : "parallel_muon";
}

// ---------------------------------------------------------------------------
// config serialization
// ---------------------------------------------------------------------------

namespace {

sharding::ParamSpec param_from_json(const nlohmann::json& j, const std::string& source,
                                    std::size_t index) {
  const std::string scope = "model.params[" + std::to_string(index) + "]";
  if (!j.is_object()) config_error(source, scope + " must be an object");
  check_keys(j, {"id", "name", "rows", "cols", "elem_bytes", "tp_dim", "elementwise"}, source,
             scope);
  sharding::ParamSpec s;
  if (!j.contains("rows") || !j.contains("cols")) {
    config_error(source, scope + " needs \"rows\" and \"cols\"");
  }
  s.id = j.value("id", static_cast<int>(index));
  s.name = j.value("name", "param" + std::to_string(s.id));
  s.rows = j.at("rows").get<index_t>();
  s.cols = j.at("cols").get<index_t>();
  s.elem_bytes = j.value("elem_bytes", 8);
  s.tp_dim = j.value("tp_dim", 1);
  s.elementwise = j.value("elementwise", false);
  return s;
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback, const std::string& source) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    config_error(source, "key \"" + key + "\": " + e.what());
  }
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j, const std::string& source) {
  if (!j.is_object()) config_error(source, "top level must be an object");
  check_keys(j,
             {"model", "mesh", "optimizer", "pipeline", "sort_by_flops", "chunk_size",
              "warmup_depth", "steps", "hyper", "cost_model", "seed", "precision", "payload",
              "oracle_check_max_params", "real_payload_max_elems"},
             source, "");

  ExperimentConfig cfg;
  if (!j.contains("model")) config_error(source, "missing key \"model\"");
  const auto& model = j.at("model");
  if (!model.is_object()) config_error(source, "key \"model\" must be an object");
  check_keys(model, {"preset", "params"}, source, "model");
  if (model.contains("preset")) {
    cfg.preset = model.at("preset").get<std::string>();
    cfg.model = preset_params(cfg.preset);
  } else if (model.contains("params")) {
    const auto& params = model.at("params");
    if (!params.is_array()) config_error(source, "key \"model.params\" must be an array");
    if (params.empty()) config_error(source, "key \"model.params\": empty model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      cfg.model.push_back(param_from_json(params[i], source, i));
    }
  } else {
    config_error(source, "key \"model\" needs \"preset\" or \"params\"");
  }

  if (j.contains("mesh")) {
    const auto& mesh = j.at("mesh");
    check_keys(mesh, {"dp_replicate", "dp_shard", "tp"}, source, "mesh");
    cfg.mesh.dp_replicate = get_or(mesh, "dp_replicate", 1, source);
    cfg.mesh.dp_shard = get_or(mesh, "dp_shard", 1, source);
    cfg.mesh.tp = get_or(mesh, "tp", 1, source);
  }

  const std::string optimizer = get_or<std::string>(j, "optimizer", "parallel", source);
  if (optimizer == "distributed") {
    cfg.optimizer = OptimizerKind::kDistributed;
  } else if (optimizer == "parallel") {
    cfg.optimizer = OptimizerKind::kParallel;
  } else {
    config_error(source, "key \"optimizer\": expected \"distributed\" or \"parallel\", got \"" +
                             optimizer + "\"");
  }

  cfg.pipeline = get_or(j, "pipeline", false, source);
  cfg.sort_by_flops = get_or(j, "sort_by_flops", false, source);
  cfg.chunk_size = get_or<index_t>(j, "chunk_size", 32, source);
  cfg.warmup_depth = get_or(j, "warmup_depth", 2, source);
  cfg.steps = get_or(j, "steps", 1, source);
  cfg.seed = get_or<std::uint64_t>(j, "seed", 0, source);

  if (j.contains("hyper")) {
    const auto& h = j.at("hyper");
    check_keys(h,
               {"momentum_beta", "nesterov", "lr", "weight_decay", "ns_iterations",
                "ns_coefficients", "epsilon"},
               source, "hyper");
    cfg.hyper.momentum_beta = get_or(h, "momentum_beta", cfg.hyper.momentum_beta, source);
    cfg.hyper.nesterov = get_or(h, "nesterov", cfg.hyper.nesterov, source);
    cfg.hyper.lr = get_or(h, "lr", cfg.hyper.lr, source);
    cfg.hyper.weight_decay = get_or(h, "weight_decay", cfg.hyper.weight_decay, source);
    cfg.hyper.ns_iterations = get_or(h, "ns_iterations", cfg.hyper.ns_iterations, source);
    if (h.contains("ns_coefficients")) {
      const auto coeffs = h.at("ns_coefficients");
      if (!coeffs.is_array() || coeffs.size() != 3) {
        config_error(source, "key \"hyper.ns_coefficients\" must be an array of 3 reals");
      }
      for (int i = 0; i < 3; ++i) {
        cfg.hyper.ns_coefficients[static_cast<std::size_t>(i)] = coeffs[i].get<double>();
      }
    }
    cfg.hyper.epsilon = get_or(h, "epsilon", cfg.hyper.epsilon, source);
  }

  if (j.contains("cost_model")) {
    const auto& c = j.at("cost_model");
    check_keys(c, {"alpha_us", "bandwidth_bytes_per_us", "compute_flops_per_us"}, source,
               "cost_model");
    cfg.cost_model.alpha_us = get_or(c, "alpha_us", cfg.cost_model.alpha_us, source);
    cfg.cost_model.bandwidth_bytes_per_us =
        get_or(c, "bandwidth_bytes_per_us", cfg.cost_model.bandwidth_bytes_per_us, source);
    cfg.cost_model.compute_flops_per_us =
        get_or(c, "compute_flops_per_us", cfg.cost_model.compute_flops_per_us, source);
  }

  const std::string precision = get_or<std::string>(j, "precision", "f64", source);
  if (precision == "f32") {
    cfg.precision = Precision::kF32;
  } else if (precision == "f64") {
    cfg.precision = Precision::kF64;
  } else {
    config_error(source, "key \"precision\": expected \"f32\" or \"f64\", got \"" + precision +
                             "\"");
  }

  const std::string payload = get_or<std::string>(j, "payload", "auto", source);
  if (payload == "auto") {
    cfg.payload = PayloadMode::kAuto;
  } else if (payload == "real") {
    cfg.payload = PayloadMode::kReal;
  } else if (payload == "shapes") {
    cfg.payload = PayloadMode::kShapes;
  } else {
    config_error(source, "key \"payload\": expected auto/real/shapes, got \"" + payload + "\"");
  }

  cfg.oracle_check_max_params = get_or(j, "oracle_check_max_params", 64, source);
  cfg.real_payload_max_elems =
      get_or<std::uint64_t>(j, "real_payload_max_elems", cfg.real_payload_max_elems, source);

  try {
    cfg.validate();
  } catch (const std::exception& e) {
    config_error(source, e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::invalid_argument("cannot open config file: " + path);
  }
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const std::size_t upto = std::min(text.size(), static_cast<std::size_t>(e.byte));
    const std::size_t line =
        1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n'));
    throw std::invalid_argument(path + ":" + std::to_string(line) + ": " + e.what());
  }
  return config_from_json(j, path);
}

nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  if (!cfg.preset.empty()) {
    j["model"] = {{"preset", cfg.preset}};
  } else {
    nlohmann::ordered_json params = nlohmann::ordered_json::array();
    for (const auto& p : cfg.model) {
      nlohmann::ordered_json pj;
      pj["id"] = p.id;
      pj["name"] = p.name;
      pj["rows"] = p.rows;
      pj["cols"] = p.cols;
      pj["elem_bytes"] = p.elem_bytes;
      pj["tp_dim"] = p.tp_dim;
      pj["elementwise"] = p.elementwise;
      params.push_back(std::move(pj));
    }
    j["model"] = {{"params", std::move(params)}};
  }
  j["mesh"] = {{"dp_replicate", cfg.mesh.dp_replicate},
               {"dp_shard", cfg.mesh.dp_shard},
               {"tp", cfg.mesh.tp}};
  j["optimizer"] = cfg.optimizer == OptimizerKind::kDistributed ? "distributed" : "parallel";
  j["pipeline"] = cfg.pipeline;
  j["sort_by_flops"] = cfg.sort_by_flops;
  j["chunk_size"] = cfg.chunk_size;
  j["warmup_depth"] = cfg.warmup_depth;
  j["steps"] = cfg.steps;
  j["seed"] = cfg.seed;
  j["precision"] = cfg.precision == Precision::kF32 ? "f32" : "f64";
  j["hyper"] = {{"momentum_beta", cfg.hyper.momentum_beta},
                {"nesterov", cfg.hyper.nesterov},
                {"lr", cfg.hyper.lr},
                {"weight_decay", cfg.hyper.weight_decay},
                {"ns_iterations", cfg.hyper.ns_iterations},
                {"ns_coefficients", cfg.hyper.ns_coefficients},
                {"epsilon", cfg.hyper.epsilon}};
  j["cost_model"] = {{"alpha_us", cfg.cost_model.alpha_us},
                     {"bandwidth_bytes_per_us", cfg.cost_model.bandwidth_bytes_per_us},
                     {"compute_flops_per_us", cfg.cost_model.compute_flops_per_us}};
  return j;
}

// ---------------------------------------------------------------------------
// experiment runner
// ---------------------------------------------------------------------------

namespace {

std::uint64_t useful_ns_flops(const std::vector<sharding::ParamSpec>& specs, int ns_iterations) {
  std::uint64_t total = 0;
  for (const auto& s : specs) {
    if (!s.elementwise) total += sharding::ns_flops(s, ns_iterations);
  }
  return total;
}

struct RunOutcome {
  fabric::SimResult sim;
  bool oracle_checked = false;
  double oracle_divergence = 0.0;
};

template <class P>
void run_stepper(const ExperimentConfig& cfg, optim::OptimizerState<P>& state,
                 const optim::ShardGrid<P>& grads, fabric::Fabric& fab) {
  if (cfg.optimizer == OptimizerKind::kDistributed) {
    optim::distributed_muon_step(state, grads, fab);
  } else if (cfg.pipeline) {
    optim::parallel_muon_step_pipelined(state, grads, fab);
  } else {
    optim::parallel_muon_step(state, grads, fab);
  }
}

template <typename T>
std::vector<MatrixT<T>> seeded_matrices(const std::vector<sharding::ParamSpec>& specs,
                                        std::uint64_t seed, std::uint64_t step) {
  std::vector<MatrixT<T>> out;
  out.reserve(specs.size());
  for (const auto& s : specs) {
    MatrixT<T> m(s.rows, s.cols);
    fill_normal(m, stream_seed(seed, step, static_cast<std::uint64_t>(s.id)));
    out.push_back(std::move(m));
  }
  return out;
}

template <typename T>
RunOutcome run_real(const ExperimentConfig& cfg, fabric::Fabric& fab) {
  using P = optim::RealPayload<T>;
  optim::PipelineConfig pipe{cfg.pipeline, cfg.chunk_size, cfg.warmup_depth};
  auto state = optim::make_state<P>(cfg.model, cfg.mesh, cfg.hyper, pipe, cfg.sort_by_flops);

  auto initial = seeded_matrices<T>(state.specs, cfg.seed, 0);
  optim::set_params_from_full(state, initial);

  const bool check =
      state.specs.size() <= static_cast<std::size_t>(cfg.oracle_check_max_params);
  std::vector<MatrixT<T>> oracle_params;
  std::vector<MatrixT<T>> oracle_momenta;
  if (check) {
    oracle_params = initial;
    for (const auto& s : state.specs) {
      oracle_momenta.emplace_back(s.rows, s.cols);
    }
  }

  for (int step = 1; step <= cfg.steps; ++step) {
    auto grads = seeded_matrices<T>(state.specs, cfg.seed, static_cast<std::uint64_t>(step));
    const auto grid = optim::shard_full(state, grads);
    run_stepper(cfg, state, grid, fab);
    if (check) {
      optim::oracle_step(oracle_params, oracle_momenta, grads, state.specs, cfg.hyper);
    }
  }

  RunOutcome out;
  out.sim = fab.simulate();
  if (check) {
    out.oracle_checked = true;
    const auto result = optim::gather_full_params(state);
    for (std::size_t p = 0; p < state.specs.size(); ++p) {
      MatrixT<T> diff = result[p];
      const auto& k = kernels::table<T>();
      k.axpby(diff.data.size(), T(-1), oracle_params[p].data.data(), T(1), diff.data.data());
      out.oracle_divergence = std::max(out.oracle_divergence, frobenius_norm(diff));
    }
  }
  return out;
}

RunOutcome run_shapes(const ExperimentConfig& cfg, fabric::Fabric& fab) {
  using P = optim::ShapePayload;
  optim::PipelineConfig pipe{cfg.pipeline, cfg.chunk_size, cfg.warmup_depth};
  auto state = optim::make_state<P>(cfg.model, cfg.mesh, cfg.hyper, pipe, cfg.sort_by_flops);
  const auto grads = optim::make_shape_grads(state);
  for (int step = 1; step <= cfg.steps; ++step) {
    run_stepper(cfg, state, grads, fab);
  }
  RunOutcome out;
  out.sim = fab.simulate();
  return out;
}

}  // namespace

Report run_experiment(const ExperimentConfig& cfg, fabric::EventTrace* trace_out) {
  cfg.validate();
  fabric::Fabric fab(cfg.mesh.world_size(), cfg.cost_model);

  RunOutcome outcome;
  if (cfg.use_real_payload()) {
    outcome = cfg.precision == Precision::kF32 ? run_real<float>(cfg, fab)
                                               : run_real<double>(cfg, fab);
  } else {
    outcome = run_shapes(cfg, fab);
  }

  Report report;
  report.label = cfg.label();
  report.config = cfg;

  double finish_us = 0.0;
  std::uint64_t peak = 0;
  for (int r = 0; r < cfg.mesh.world_size(); ++r) {
    finish_us = std::max(finish_us, outcome.sim.finish_us[static_cast<std::size_t>(r)]);
    peak = std::max(peak, outcome.sim.peak_bytes[static_cast<std::size_t>(r)]);
    report.rank_finish_ms.push_back(outcome.sim.finish_us[static_cast<std::size_t>(r)] / 1000.0);
    report.rank_peak_mb.push_back(
        static_cast<double>(outcome.sim.peak_bytes[static_cast<std::size_t>(r)]) / kMiB);
  }

  const double step_time_us = finish_us / cfg.steps;
  report.metrics.time_ms = step_time_us / 1000.0;
  report.metrics.peak_mem_mb = static_cast<double>(peak) / kMiB;
  report.metrics.useful_flops_per_step = useful_ns_flops(cfg.model, cfg.hyper.ns_iterations);
  report.metrics.tflops_per_gpu =
      step_time_us > 0.0
          ? static_cast<double>(report.metrics.useful_flops_per_step) /
                (static_cast<double>(cfg.mesh.world_size()) * step_time_us) / 1e6
          : 0.0;
  report.metrics.oracle_checked = outcome.oracle_checked;
  report.metrics.oracle_divergence = outcome.oracle_divergence;

  if (trace_out != nullptr) {
    *trace_out = fab.trace();
  }
  return report;
}

nlohmann::ordered_json metrics_to_json(const ReportMetrics& m) {
  nlohmann::ordered_json j;
  j["time_ms"] = m.time_ms;
  j["peak_mem_mb"] = m.peak_mem_mb;
  j["tflops_per_gpu"] = m.tflops_per_gpu;
  j["useful_flops_per_step"] = m.useful_flops_per_step;
  const char* status = !m.oracle_checked
                           ? "unverified"
                           : (m.oracle_divergence <= kOracleTolerance ? "ok" : "diverged");
  j["oracle"] = {{"status", status}, {"max_divergence", m.oracle_divergence}};
  return j;
}

nlohmann::ordered_json report_to_json(const Report& r) {
  nlohmann::ordered_json j;
  j["label"] = r.label;
  j["config"] = config_to_json(r.config);
  j["metrics"] = metrics_to_json(r.metrics);
  j["per_rank"] = {{"finish_ms", r.rank_finish_ms}, {"peak_mb", r.rank_peak_mb}};
  return j;
}

std::string render_table(const std::vector<Report>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "Configuration" << std::right << std::setw(11)
     << "Pipelining" << std::setw(12) << "Sort Param." << std::setw(11) << "Chunk Size"
     << std::setw(12) << "Time (ms)" << std::setw(15) << "Peak Mem (MB)" << std::setw(16)
     << "TFLOPS per GPU" << std::setw(12) << "Oracle" << '\n';
  os << std::string(111, '-') << '\n';
  for (const Report& r : rows) {
    const bool parallel = r.config.optimizer == OptimizerKind::kParallel;
    const std::string pipelining = !parallel ? "--" : (r.config.pipeline ? "O" : "X");
    const std::string sorted = !parallel ? "--" : (r.config.sort_by_flops ? "O" : "X");
    const std::string chunk =
        (parallel && r.config.pipeline) ? std::to_string(r.config.chunk_size) : "--";
    const char* oracle = !r.metrics.oracle_checked
                             ? "unverified"
                             : (r.metrics.oracle_divergence <= kOracleTolerance ? "ok"
                                                                                : "DIVERGED");
    os << std::left << std::setw(22) << r.label << std::right << std::setw(11) << pipelining
       << std::setw(12) << sorted << std::setw(11) << chunk << std::setw(12) << std::fixed
       << std::setprecision(2) << r.metrics.time_ms << std::setw(15) << std::setprecision(1)
       << r.metrics.peak_mem_mb << std::setw(16) << std::setprecision(1)
       << r.metrics.tflops_per_gpu << std::setw(12) << oracle << '\n';
  }
  return os.str();
}

SweepResult sweep_chunk_size(const ExperimentConfig& cfg, const std::vector<index_t>& sizes) {
  require(!sizes.empty(), "sweep_chunk_size: empty size list");
  const index_t all = static_cast<index_t>(
      std::count_if(cfg.model.begin(), cfg.model.end(),
                    [](const sharding::ParamSpec& p) { return !p.elementwise; }));
  // Each entry owns its fabric, so entries run concurrently; results are
  // collected in input order to keep reports deterministic.
  std::vector<std::future<Report>> pending;
  for (const index_t size : sizes) {
    ExperimentConfig run = cfg;
    run.optimizer = OptimizerKind::kParallel;
    run.pipeline = true;
    run.chunk_size = size == 0 ? all : size;
    pending.push_back(std::async(std::launch::async,
                                 [run] { return run_experiment(run); }));
  }
  SweepResult result;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    SweepEntry entry;
    entry.chunk_size = sizes[i];
    entry.report = pending[i].get();
    result.entries.push_back(std::move(entry));
  }
  const auto best = [&](auto metric) {
    index_t best_size = result.entries.front().chunk_size;
    double best_value = metric(result.entries.front().report.metrics);
    for (const auto& e : result.entries) {
      const double v = metric(e.report.metrics);
      if (v < best_value) {
        best_value = v;
        best_size = e.chunk_size;
      }
    }
    return best_size;
  };
  result.best_time_chunk = best([](const ReportMetrics& m) { return m.time_ms; });
  result.best_memory_chunk = best([](const ReportMetrics& m) { return m.peak_mem_mb; });
  return result;
}

std::string render_sweep(const SweepResult& sweep) {
  std::ostringstream os;
  os << std::right << std::setw(11) << "Chunk Size" << std::setw(12) << "Time (ms)"
     << std::setw(15) << "Peak Mem (MB)" << std::setw(16) << "TFLOPS per GPU" << '\n';
  os << std::string(54, '-') << '\n';
  for (const auto& e : sweep.entries) {
    os << std::setw(11) << (e.chunk_size == 0 ? std::string("all") : std::to_string(e.chunk_size))
       << std::setw(12) << std::fixed << std::setprecision(2) << e.report.metrics.time_ms
       << std::setw(15) << std::setprecision(1) << e.report.metrics.peak_mem_mb << std::setw(16)
       << std::setprecision(1) << e.report.metrics.tflops_per_gpu << '\n';
  }
  const auto name = [](index_t c) { return c == 0 ? std::string("all") : std::to_string(c); };
  os << "best time: chunk " << name(sweep.best_time_chunk) << "; best memory: chunk "
     << name(sweep.best_memory_chunk) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// oracle verification
// ---------------------------------------------------------------------------

namespace {

template <typename T>
double worst_frobenius(const std::vector<MatrixT<T>>& a, const std::vector<MatrixT<T>>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    MatrixT<T> diff = a[i];
    kernels::table<T>().axpby(diff.data.size(), T(-1), b[i].data.data(), T(1), diff.data.data());
    worst = std::max(worst, frobenius_norm(diff));
  }
  return worst;
}

template <typename T>
VerifyResult verify_typed(const ExperimentConfig& cfg) {
  using P = optim::RealPayload<T>;
  optim::PipelineConfig pipe{true, cfg.chunk_size, cfg.warmup_depth};
  auto dist = optim::make_state<P>(cfg.model, cfg.mesh, cfg.hyper, pipe, cfg.sort_by_flops);
  auto par = dist;
  auto piped = dist;
  const auto initial = seeded_matrices<T>(dist.specs, cfg.seed, 0);
  optim::set_params_from_full(dist, initial);
  optim::set_params_from_full(par, initial);
  optim::set_params_from_full(piped, initial);

  fabric::Fabric fab_dist(cfg.mesh.world_size(), cfg.cost_model);
  fabric::Fabric fab_par(cfg.mesh.world_size(), cfg.cost_model);
  fabric::Fabric fab_piped(cfg.mesh.world_size(), cfg.cost_model);

  std::vector<MatrixT<T>> oracle_params = initial;
  std::vector<MatrixT<T>> oracle_momenta;
  for (const auto& s : dist.specs) oracle_momenta.emplace_back(s.rows, s.cols);

  for (int step = 1; step <= cfg.steps; ++step) {
    auto grads = seeded_matrices<T>(dist.specs, cfg.seed, static_cast<std::uint64_t>(step));
    const auto grid = optim::shard_full(dist, grads);
    optim::distributed_muon_step(dist, grid, fab_dist);
    optim::parallel_muon_step(par, grid, fab_par);
    optim::parallel_muon_step_pipelined(piped, grid, fab_piped);
    optim::oracle_step(oracle_params, oracle_momenta, grads, dist.specs, cfg.hyper);
  }

  VerifyResult out;
  out.distributed = worst_frobenius(optim::gather_full_params(dist), oracle_params);
  out.parallel = worst_frobenius(optim::gather_full_params(par), oracle_params);
  out.pipelined = worst_frobenius(optim::gather_full_params(piped), oracle_params);
  out.momentum = std::max(
      {worst_frobenius(optim::gather_full(dist, dist.momenta), oracle_momenta),
       worst_frobenius(optim::gather_full(par, par.momenta), oracle_momenta),
       worst_frobenius(optim::gather_full(piped, piped.momenta), oracle_momenta)});
  out.pass = out.distributed <= kOracleTolerance && out.parallel <= kOracleTolerance &&
             out.pipelined <= kOracleTolerance && out.momentum <= kOracleTolerance;
  return out;
}

}  // namespace

VerifyResult verify_config(const ExperimentConfig& cfg) {
  cfg.validate();
  return cfg.precision == Precision::kF32 ? verify_typed<float>(cfg) : verify_typed<double>(cfg);
}

// ---------------------------------------------------------------------------
// polynorm micro-benchmark
// ---------------------------------------------------------------------------

namespace {

template <typename T>
PolyNormBenchCell bench_cell(index_t rows, index_t features, std::uint64_t seed) {
  using polynorm::PolyNormParams;
  using polynorm::TrafficCounter;
  PolyNormParams params;
  params.weights = {0.8, -0.2, 0.4};
  params.bias = 0.1;

  MatrixT<T> x(rows, features);
  fill_normal(x, stream_seed(seed, 1, static_cast<std::uint64_t>(rows * 131 + features)));

  PolyNormBenchCell cell;
  cell.rows = rows;
  cell.features = features;

  {
    TrafficCounter naive_c, fused_c;
    const auto naive = polynorm::polynorm_naive(x, params, &naive_c);
    const auto fused = polynorm::polynorm_fused(x, params, &fused_c);
    cell.fwd_delta = max_abs_diff(naive, fused);
    cell.fwd_traffic_ratio = static_cast<double>(fused_c.elements_read) /
                             static_cast<double>(naive_c.elements_read);

    MatrixT<T> gate(rows, features);
    fill_normal(gate, stream_seed(seed, 2, static_cast<std::uint64_t>(rows * 131 + features)));
    // Composed reference evaluated in double end to end and rounded once so
    // the comparison is against the mathematical composition, not against a
    // second storage-precision rounding of the activation.
    MatrixT<double> xd(rows, features);
    for (std::size_t i = 0; i < xd.data.size(); ++i) {
      xd.data[i] = static_cast<double>(x.data[i]);
    }
    const auto composed_d = polynorm::polynorm_naive(xd, params, nullptr);
    MatrixT<T> composed(rows, features);
    for (std::size_t i = 0; i < composed.data.size(); ++i) {
      composed.data[i] =
          static_cast<T>(composed_d.data[i] * static_cast<double>(gate.data[i]));
    }
    TrafficCounter composed_c = naive_c;  // naive forward plus a multiply pass
    composed_c.elements_read += 2 * static_cast<std::uint64_t>(composed.data.size());
    composed_c.elements_written += static_cast<std::uint64_t>(composed.data.size());
    TrafficCounter mul_c;
    const auto mul = polynorm::polynorm_mul_fused(x, gate, params, &mul_c);
    cell.mul_delta = max_abs_diff(composed, mul);
    cell.mul_traffic_ratio = static_cast<double>(mul_c.elements_read) /
                             static_cast<double>(composed_c.elements_read);
  }

  {
    MatrixT<T> upstream(rows, features);
    fill_normal(upstream, stream_seed(seed, 3, static_cast<std::uint64_t>(rows * 131 + features)));
    TrafficCounter naive_c, fused_c;
    const auto naive = polynorm::polynorm_backward_naive(x, upstream, params, &naive_c);
    const auto fused = polynorm::polynorm_backward(x, upstream, params, &fused_c);
    cell.bwd_delta = max_abs_diff(naive.dx, fused.dx);
    for (int i = 0; i < 3; ++i) {
      cell.bwd_delta = std::max(cell.bwd_delta,
                                std::abs(naive.dweights[static_cast<std::size_t>(i)] -
                                         fused.dweights[static_cast<std::size_t>(i)]));
    }
    cell.bwd_delta = std::max(cell.bwd_delta, std::abs(naive.dbias - fused.dbias));
    cell.bwd_traffic_ratio = static_cast<double>(fused_c.elements_read) /
                             static_cast<double>(naive_c.elements_read);
  }
  return cell;
}

double geomean(const std::vector<double>& values) {
  double log_sum = 0.0;
  for (const double v : values) log_sum += std::log(v);
  return std::exp(log_sum / static_cast<double>(values.size()));
}

}  // namespace

PolyNormBenchResult bench_polynorm(const std::vector<index_t>& rows,
                                   const std::vector<index_t>& features, Precision precision,
                                   std::uint64_t seed) {
  require(!rows.empty() && !features.empty(), "bench_polynorm: empty shape grid");
  PolyNormBenchResult result;
  std::vector<double> fwd, mul, bwd;
  for (const index_t f : features) {
    for (const index_t r : rows) {
      const PolyNormBenchCell cell = precision == Precision::kF32
                                         ? bench_cell<float>(r, f, seed)
                                         : bench_cell<double>(r, f, seed);
      fwd.push_back(cell.fwd_traffic_ratio);
      mul.push_back(cell.mul_traffic_ratio);
      bwd.push_back(cell.bwd_traffic_ratio);
      result.max_fwd_delta = std::max(result.max_fwd_delta, cell.fwd_delta);
      result.max_mul_delta = std::max(result.max_mul_delta, cell.mul_delta);
      result.max_bwd_delta = std::max(result.max_bwd_delta, cell.bwd_delta);
      result.cells.push_back(cell);
    }
  }
  result.geomean_fwd_ratio = geomean(fwd);
  result.geomean_mul_ratio = geomean(mul);
  result.geomean_bwd_ratio = geomean(bwd);
  return result;
}

std::string render_polynorm_bench(const PolyNormBenchResult& r) {
  std::ostringstream os;
  os << std::right << std::setw(7) << "rows" << std::setw(9) << "features" << std::setw(13)
     << "fwd delta" << std::setw(11) << "fwd ratio" << std::setw(13) << "mul delta"
     << std::setw(11) << "mul ratio" << std::setw(13) << "bwd delta" << std::setw(11)
     << "bwd ratio" << '\n';
  os << std::string(88, '-') << '\n';
  for (const auto& c : r.cells) {
    os << std::setw(7) << c.rows << std::setw(9) << c.features << std::setw(13)
       << std::scientific << std::setprecision(2) << c.fwd_delta << std::setw(11) << std::fixed
       << std::setprecision(3) << c.fwd_traffic_ratio << std::setw(13) << std::scientific
       << std::setprecision(2) << c.mul_delta << std::setw(11) << std::fixed
       << std::setprecision(3) << c.mul_traffic_ratio << std::setw(13) << std::scientific
       << std::setprecision(2) << c.bwd_delta << std::setw(11) << std::fixed
       << std::setprecision(3) << c.bwd_traffic_ratio << '\n';
  }
  os << "geometric mean read-traffic ratio (fused/naive): forward " << std::fixed
     << std::setprecision(3) << r.geomean_fwd_ratio << ", +mul " << r.geomean_mul_ratio
     << ", backward " << r.geomean_bwd_ratio << '\n';
  return os.str();
}

nlohmann::ordered_json polynorm_bench_to_json(const PolyNormBenchResult& r) {
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"rows", c.rows},
                     {"features", c.features},
                     {"fwd_delta", c.fwd_delta},
                     {"fwd_traffic_ratio", c.fwd_traffic_ratio},
                     {"mul_delta", c.mul_delta},
                     {"mul_traffic_ratio", c.mul_traffic_ratio},
                     {"bwd_delta", c.bwd_delta},
                     {"bwd_traffic_ratio", c.bwd_traffic_ratio}});
  }
  nlohmann::ordered_json j;
  j["cells"] = std::move(cells);
  j["geomean"] = {{"forward", r.geomean_fwd_ratio},
                  {"forward_mul", r.geomean_mul_ratio},
                  {"backward", r.geomean_bwd_ratio}};
  j["max_delta"] = {{"forward", r.max_fwd_delta},
                    {"forward_mul", r.max_mul_delta},
                    {"backward", r.max_bwd_delta}};
  return j;
}

}  // namespace parmuon::harness
