// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "taper/config.h"
#include "taper/costmodel.h"
#include "taper/engine.h"
#include "taper/metrics.h"
#include "taper/workload.h"

namespace taper {

// Everything a run needs besides the trace and the policy.
struct ExperimentConfig {
  EngineConfig engine;
  GroundTruthModel gt{{8.0, 0.08, 0.0008}, 0.02, 0};
  // Fixed predictor; when absent it is fitted by OLS on a profiling sweep of
  // the ground truth (profile_seed selects that sweep's noise).
  std::optional<LinearLatencyModel> predictor;
  std::uint64_t profile_seed = 1;
  Millis constant_cost = 0.0;  // constant-predictor ablation; <= 0 derives it
  UtilityCurve utility = UtilityCurve::linear();

  // Keys: the EngineConfig keys, gt_a, gt_b, gt_c, gt_noise_sigma, gt_seed,
  // predictor_a/b/c, profile_seed, constant_predictor_ms, utility, utility_weights.
  static ExperimentConfig from_config(const KeyValueConfig& cfg);
};

LinearLatencyModel initial_predictor(const ExperimentConfig& cfg);

struct SweepCell {
  std::string policy;  // off | capN | eager | taper
  Ablation ablation = Ablation::kNone;
  double rho = 0.8;
  std::optional<double> pdr;  // regenerates the trace when set
  Millis slo_tpot = 50.0;

  std::string key() const;
};

struct SweepSpec {
  std::filesystem::path trace;        // fixed trace, or
  std::filesystem::path regime;       // regime config regenerated per pdr cell
  std::uint64_t trace_seed = 0;
  std::filesystem::path base_config;  // ExperimentConfig keys
  std::vector<SweepCell> cells;

  // Keys: trace | regime (+ trace_seed), base_config, policies, rho, pdr, slo,
  // ablations. Paths are relative to the spec file. Axes: taper cells take
  // every rho and ablation; other policies ignore both.
  static SweepSpec load(const std::filesystem::path& path);
  static SweepSpec parse(const KeyValueConfig& cfg, const std::filesystem::path& base_dir);
};

struct CellResult {
  SweepCell cell;
  RunSummary summary;
};

// The trace a cell runs on.
Trace cell_trace(const SweepSpec& spec, const SweepCell& cell);

CellResult run_cell(const Trace& trace, const SweepCell& cell, const ExperimentConfig& base);

// Runs every cell on up to `threads` workers; results are in cell order and
// identical to running each cell alone. Fills goodput_vs_off from the Off cell
// sharing the same pdr and SLO.
std::vector<CellResult> run_sweep(const SweepSpec& spec, const ExperimentConfig& base, unsigned threads);

// TAPER_SIM_THREADS if set and positive, else the hardware concurrency.
unsigned sweep_threads();

void write_sweep_csv(std::ostream& out, const std::vector<CellResult>& results);

}  // namespace taper
