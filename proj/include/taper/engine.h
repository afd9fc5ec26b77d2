// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

#include "taper/config.h"
#include "taper/costmodel.h"
#include "taper/policy.h"
#include "taper/run_log.h"
#include "taper/workload.h"

namespace taper {

// When a waiting request may activate. kPrefix needs only its current blocks
// to be free, so later growth can force preemptions. kReserve also requires the
// final footprints of all active requests plus its own to fit in capacity, so
// growth never exhausts memory.
enum class KvAdmission { kReserve, kPrefix };

KvAdmission parse_kv_admission(const std::string& name);
std::string kv_admission_name(KvAdmission a);

struct EngineConfig {
  Millis slo_tpot = 50.0;
  std::int64_t kv_capacity_blocks = 65536;
  std::int64_t kv_block_size = 16;
  Millis prefill_ms_per_token = 0.1;
  double refresh_interval = 10.0;  // simulated minutes
  std::int64_t window_capacity = 200;
  std::uint64_t seed = 0;
  KvAdmission kv_admission = KvAdmission::kReserve;
  bool keep_outputs = false;  // retain canonical output logs per request
  bool keep_steps = true;     // retain StepRecords

  // Throws std::invalid_argument unless every field is positive.
  void validate() const;
  // Reads keys named after the fields; absent keys keep their defaults.
  static EngineConfig from_config(const KeyValueConfig& cfg);
};

// Planner variants used to isolate mechanism contributions.
enum class Ablation {
  kNone,
  kNoSlackBudget,      // budget = +inf, so every branch that fits in memory is admitted
  kNoReplanning,       // a request's grant is frozen at phase open until the reduce
  kConstantPredictor,  // predictor charges a fixed cost per sequence, ignoring context
};

Ablation parse_ablation(const std::string& name);
std::string ablation_name(Ablation a);

struct RunSetup {
  PolicyKind policy;
  Ablation ablation = Ablation::kNone;
  // Per-sequence cost used by kConstantPredictor; <= 0 derives it from the
  // initial predictor (see constant_predictor_cost).
  Millis constant_cost = 0.0;
  std::string label;  // defaults to policy name (+ ablation)

  std::string name() const;
};

// The predictor's cost of one sequence at the largest per-sequence context of
// the standard profiling grid.
Millis constant_predictor_cost(const LinearLatencyModel& predictor);

Millis deadline_of(const RequestRuntime& req, const EngineConfig& cfg);

// Runs one trace to completion. Bit-deterministic per (trace, setup, gt, predictor, cfg).
MetricsLog run_simulation(const Trace& trace, const RunSetup& setup, const GroundTruthModel& gt,
                          const LinearLatencyModel& predictor, const EngineConfig& cfg);

// Total simulated span of a trace: the sum of its generator segments when
// recorded in metadata, else the last arrival.
Millis trace_span(const Trace& trace);

}  // namespace taper
