// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taper/run_log.h"

namespace taper {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TokenClass { kSerial, kParallel };

// duration / tokens over all branches of the phase. Throws on a zero-token phase.
Millis effective_tpot(const PhaseRecord& phase);

// Nearest-rank percentile (p in (0, 100]); throws MetricsError on no samples.
double nearest_rank(std::vector<double> samples, double p);

// Per-token latencies (serial class) or per-phase effective TPOTs (parallel
// class). With a window, keeps samples whose token delivery or phase close
// falls in [t0, t1).
std::vector<double> tpot_samples(const MetricsLog& log, TokenClass cls, std::optional<Millis> t0 = std::nullopt,
                                 std::optional<Millis> t1 = std::nullopt);
Millis tpot_percentile(const MetricsLog& log, TokenClass cls, double p, std::optional<Millis> t0 = std::nullopt,
                       std::optional<Millis> t1 = std::nullopt);

// |met_slo| / |completed|; throws MetricsError when nothing completed.
double slo_attainment(const MetricsLog& log);

struct WindowSummary {
  Millis t0 = 0.0;
  Millis t1 = 0.0;
  bool empty = true;           // no steps ended in the window
  double throughput = 0.0;     // tokens / s
  double goodput = 0.0;        // tokens of SLO-meeting requests / s
  double admission_rate = 1.0; // granted / ready opportunistic branches
  double req_rate = 0.0;       // arrivals / s
  double mean_step_latency = 0.0;
  std::optional<double> attainment;  // over requests completing in the window
  std::optional<double> serial_p99;
  std::optional<double> parallel_p99;
};

// Throws std::invalid_argument unless t1 > t0.
WindowSummary summarize_window(const MetricsLog& log, Millis t0, Millis t1);

// Non-overlapping windows of `width` covering [0, ceil(span / width) * width).
std::vector<WindowSummary> windowed(const MetricsLog& log, Millis width = kMsPerMinute);

void write_csv_header(std::ostream& out);
void write_csv_rows(std::ostream& out, const MetricsLog& log, Millis width = kMsPerMinute);
// Header plus one row per window.
void export_csv(const std::string& path, const MetricsLog& log, Millis width = kMsPerMinute);

struct RunSummary {
  std::string policy;
  std::size_t requests = 0;
  std::size_t completed = 0;
  std::size_t unschedulable = 0;
  double attainment = 0.0;
  double throughput = 0.0;  // over the trace span
  double goodput = 0.0;
  double admission_rate = 1.0;
  double mean_step_latency = 0.0;
  std::optional<double> serial_p99;
  std::optional<double> parallel_p99;
  std::optional<double> goodput_vs_off;
  double median_planner_us = 0.0;
  Millis makespan = 0.0;
  RunCounters counters;  // planner_wall_us is not copied
};

RunSummary summarize_run(const MetricsLog& log);
void write_summary_json(std::ostream& out, const RunSummary& summary);
void write_steps_jsonl(std::ostream& out, const MetricsLog& log);

}  // namespace taper
