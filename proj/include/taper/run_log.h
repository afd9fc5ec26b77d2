// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "taper/costmodel.h"
#include "taper/generation.h"

namespace taper {

struct Delivery {
  RequestId request_id = 0;
  int serial_tokens = 0;
  int parallel_tokens = 0;
};

struct StepRecord {
  std::int64_t step_index = 0;
  Millis start = 0.0;
  Millis end = 0.0;
  StepComposition composition;
  int active_requests = 0;
  int granted = 0;          // opportunistic branches admitted
  int ready = 0;            // opportunistic branches that were ready
  Millis predicted = 0.0;
  Millis realized = 0.0;
  std::optional<Millis> budget;
  std::vector<Delivery> deliveries;

  Millis realized_latency() const { return end - start; }
};

struct TokenLatency {
  Millis time = 0.0;
  Millis latency = 0.0;
};

struct PhaseRecord {
  int stage_index = 0;
  Millis open = 0.0;
  Millis close = 0.0;
  std::int64_t tokens = 0;  // all branch tokens of the phase
};

struct RequestRecord {
  RequestId request_id = 0;
  Millis arrival = 0.0;
  Millis activation = 0.0;
  Millis completion = 0.0;
  bool finished = false;
  bool decomposable = false;
  int preemptions = 0;
  std::int64_t total_tokens = 0;
  std::vector<TokenLatency> serial_latencies;
  std::vector<PhaseRecord> phases;
  Millis max_tpot = 0.0;
  bool met_slo = false;
  std::uint64_t output_digest = 0;
  std::vector<OutputToken> canonical_output;  // only when the engine keeps outputs
};

struct RunCounters {
  std::int64_t steps = 0;
  std::int64_t budget_checks = 0;
  std::int64_t budget_violations = 0;
  std::int64_t deferrals = 0;               // ready branches left out of a step
  std::int64_t deferral_kv_mutations = 0;   // ledger mutations touching a deferred branch
  std::int64_t kv_mutations = 0;
  std::int64_t preemptions = 0;
  std::int64_t memory_trimmed_grants = 0;
  int refreshes = 0;
  int degenerate_refreshes = 0;
  std::int64_t planner_calls = 0;
  std::int64_t planner_evals = 0;
  std::int64_t eval_bound_violations = 0;
  std::vector<double> planner_wall_us;
};

struct MetricsLog {
  std::string policy;
  Millis slo_tpot = 50.0;
  Millis trace_span = 0.0;
  std::vector<StepRecord> steps;
  std::vector<RequestRecord> requests;  // trace order
  std::vector<RequestId> unschedulable;
  RunCounters counters;
  std::vector<std::string> warnings;
};

}  // namespace taper
