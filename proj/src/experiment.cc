// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#include "taper/experiment.h"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

namespace taper {

ExperimentConfig ExperimentConfig::from_config(const KeyValueConfig& cfg) {
  ExperimentConfig c;
  c.engine = EngineConfig::from_config(cfg);
  c.gt.base.a = cfg.get_double("gt_a", c.gt.base.a);
  c.gt.base.b = cfg.get_double("gt_b", c.gt.base.b);
  c.gt.base.c = cfg.get_double("gt_c", c.gt.base.c);
  c.gt.base.validate();
  c.gt.noise_sigma = cfg.get_double("gt_noise_sigma", c.gt.noise_sigma);
  if (c.gt.noise_sigma < 0.0) throw std::invalid_argument("gt_noise_sigma must be non-negative");
  c.gt.seed = static_cast<std::uint64_t>(cfg.get_int("gt_seed", static_cast<std::int64_t>(c.gt.seed)));
  if (cfg.has("predictor_a") || cfg.has("predictor_b") || cfg.has("predictor_c")) {
    LinearLatencyModel m{cfg.get_double("predictor_a", c.gt.base.a), cfg.get_double("predictor_b", c.gt.base.b),
                         cfg.get_double("predictor_c", c.gt.base.c)};
    m.validate();
    c.predictor = m;
  }
  c.profile_seed = static_cast<std::uint64_t>(cfg.get_int("profile_seed", static_cast<std::int64_t>(c.profile_seed)));
  c.constant_cost = cfg.get_double("constant_predictor_ms", c.constant_cost);
  std::vector<double> weights;
  for (const auto& w : cfg.get_list("utility_weights")) weights.push_back(parse_double(w, "utility weight"));
  c.utility = UtilityCurve::parse(cfg.get_string("utility", "linear"), weights);
  return c;
}

LinearLatencyModel initial_predictor(const ExperimentConfig& cfg) {
  if (cfg.predictor) return *cfg.predictor;
  GroundTruthModel profiler = cfg.gt;
  profiler.seed = cfg.profile_seed;
  const auto samples = profile(profiler, ProfilingGrid::standard());
  return fit_ols(samples).model;
}

std::string SweepCell::key() const {
  std::ostringstream os;
  os << policy;
  if (policy == "taper") os << "_rho" << rho;
  if (ablation != Ablation::kNone) os << '_' << ablation_name(ablation);
  if (pdr) os << "_pdr" << *pdr;
  os << "_slo" << slo_tpot;
  return os.str();
}

namespace {

std::vector<double> doubles(const KeyValueConfig& cfg, std::string_view key, std::vector<double> fallback) {
  if (!cfg.has(key)) return fallback;
  std::vector<double> out;
  for (const auto& item : cfg.get_list(key)) out.push_back(parse_double(item, key));
  if (out.empty()) throw ConfigError("sweep axis '" + std::string(key) + "' is empty");
  return out;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& value) {
  const std::filesystem::path p(value);
  return p.is_absolute() ? p : base / p;
}

}  // namespace

SweepSpec SweepSpec::load(const std::filesystem::path& path) {
  return parse(KeyValueConfig::load(path.string()), path.parent_path());
}

SweepSpec SweepSpec::parse(const KeyValueConfig& cfg, const std::filesystem::path& base_dir) {
  SweepSpec spec;
  if (cfg.has("trace") == cfg.has("regime")) throw ConfigError("sweep spec needs exactly one of 'trace' or 'regime'");
  if (cfg.has("trace")) spec.trace = resolve(base_dir, cfg.get_string("trace", ""));
  if (cfg.has("regime")) spec.regime = resolve(base_dir, cfg.get_string("regime", ""));
  spec.trace_seed = static_cast<std::uint64_t>(cfg.get_int("trace_seed", 0));
  if (cfg.has("base_config")) spec.base_config = resolve(base_dir, cfg.get_string("base_config", ""));

  std::vector<std::string> policies = cfg.has("policies") ? cfg.get_list("policies") : std::vector<std::string>{"taper"};
  if (policies.empty()) throw ConfigError("sweep axis 'policies' is empty");
  const auto rhos = doubles(cfg, "rho", {0.8});
  const auto slos = doubles(cfg, "slo", {50.0});
  std::vector<std::optional<double>> pdrs{std::nullopt};
  if (cfg.has("pdr")) {
    if (spec.regime.empty()) throw ConfigError("a pdr axis requires 'regime'");
    pdrs.clear();
    for (double v : doubles(cfg, "pdr", {})) pdrs.emplace_back(v);
  }
  std::vector<Ablation> ablations{Ablation::kNone};
  if (cfg.has("ablations")) {
    ablations.clear();
    for (const auto& a : cfg.get_list("ablations")) ablations.push_back(parse_ablation(a));
  }
  for (const auto& pdr : pdrs) {
    for (double slo : slos) {
      for (const auto& policy : policies) {
        PolicyKind::parse(policy);  // reject unknown names early
        if (policy != "taper") {
          spec.cells.push_back({policy, Ablation::kNone, 0.8, pdr, slo});
          continue;
        }
        for (Ablation a : ablations) {
          for (double rho : rhos) {
            if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in (0, 1]");
            spec.cells.push_back({policy, a, rho, pdr, slo});
          }
        }
      }
    }
  }
  return spec;
}

Trace cell_trace(const SweepSpec& spec, const SweepCell& cell) {
  if (!spec.trace.empty()) return load_trace(spec.trace.string());
  RegimeSpec regime = RegimeSpec::from_config(KeyValueConfig::load(spec.regime.string()));
  if (cell.pdr) regime.pdr_target = *cell.pdr;
  regime.slo_tpot = cell.slo_tpot;
  return generate_trace(regime, spec.trace_seed);
}

CellResult run_cell(const Trace& trace, const SweepCell& cell, const ExperimentConfig& base) {
  ExperimentConfig cfg = base;
  cfg.engine.slo_tpot = cell.slo_tpot;
  cfg.engine.keep_outputs = false;
  RunSetup setup;
  setup.policy = PolicyKind::parse(cell.policy, cell.rho, cfg.utility);
  setup.ablation = cell.ablation;
  setup.constant_cost = cfg.constant_cost;
  setup.label = cell.key();
  const MetricsLog log = run_simulation(trace, setup, cfg.gt, initial_predictor(cfg), cfg.engine);
  return {cell, summarize_run(log)};
}

unsigned sweep_threads() {
  if (const char* env = std::getenv("TAPER_SIM_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1U, std::thread::hardware_concurrency());
}

std::vector<CellResult> run_sweep(const SweepSpec& spec, const ExperimentConfig& base, unsigned threads) {
  std::vector<CellResult> results(spec.cells.size());
  // Traces are shared read-only across cells that use the same one.
  std::map<std::optional<double>, Trace> traces;
  for (const auto& cell : spec.cells) {
    const auto key = spec.trace.empty() ? cell.pdr : std::nullopt;
    if (!traces.count(key)) traces.emplace(key, cell_trace(spec, cell));
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(spec.cells.size());
  auto worker = [&] {
    for (std::size_t i = next++; i < spec.cells.size(); i = next++) {
      try {
        const auto& cell = spec.cells[i];
        const auto key = spec.trace.empty() ? cell.pdr : std::nullopt;
        results[i] = run_cell(traces.at(key), cell, base);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1U, std::min<unsigned>(threads, static_cast<unsigned>(spec.cells.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (auto& r : results) {
    for (const auto& other : results) {
      if (other.cell.policy == "off" && other.cell.pdr == r.cell.pdr && other.cell.slo_tpot == r.cell.slo_tpot &&
          other.summary.goodput > 0.0) {
        r.summary.goodput_vs_off = r.summary.goodput / other.summary.goodput;
      }
    }
  }
  return results;
}

void write_sweep_csv(std::ostream& out, const std::vector<CellResult>& results) {
  out << "cell,policy,ablation,rho,pdr,slo_ms,attainment,throughput,goodput,goodput_vs_off,admission_rate,"
         "serial_p99_tpot,parallel_p99_tpot,budget_violations\n";
  auto opt = [](const std::optional<double>& v) {
    std::ostringstream os;
    if (v) os << std::setprecision(10) << *v;
    return os.str();
  };
  for (const auto& r : results) {
    const auto& s = r.summary;
    out << std::setprecision(10) << r.cell.key() << ',' << r.cell.policy << ',' << ablation_name(r.cell.ablation)
        << ',' << (r.cell.policy == "taper" ? opt(r.cell.rho) : std::string()) << ',' << opt(r.cell.pdr) << ','
        << r.cell.slo_tpot << ',' << s.attainment << ',' << s.throughput << ',' << s.goodput << ','
        << opt(s.goodput_vs_off) << ',' << s.admission_rate << ',' << opt(s.serial_p99) << ','
        << opt(s.parallel_p99) << ',' << s.counters.budget_violations << '\n';
  }
}

}  // namespace taper
