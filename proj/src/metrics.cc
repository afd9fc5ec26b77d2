// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#include "taper/metrics.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

namespace taper {

using json = nlohmann::json;

Millis effective_tpot(const PhaseRecord& phase) {
  if (phase.tokens <= 0) throw MetricsError("effective TPOT of a zero-token phase");
  return (phase.close - phase.open) / static_cast<double>(phase.tokens);
}

double nearest_rank(std::vector<double> samples, double p) {
  if (samples.empty()) throw MetricsError("percentile of an empty sample set");
  if (!(p > 0.0 && p <= 100.0)) throw std::invalid_argument("percentile must lie in (0, 100]");
  std::sort(samples.begin(), samples.end());
  const auto n = static_cast<double>(samples.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, samples.size());
  return samples[rank - 1];
}

std::vector<double> tpot_samples(const MetricsLog& log, TokenClass cls, std::optional<Millis> t0,
                                 std::optional<Millis> t1) {
  auto in_window = [&](Millis t) { return (!t0 || t >= *t0) && (!t1 || t < *t1); };
  std::vector<double> out;
  for (const auto& r : log.requests) {
    if (cls == TokenClass::kSerial) {
      for (const auto& s : r.serial_latencies) {
        if (in_window(s.time)) out.push_back(s.latency);
      }
    } else {
      for (const auto& p : r.phases) {
        if (in_window(p.close)) out.push_back(effective_tpot(p));
      }
    }
  }
  return out;
}

Millis tpot_percentile(const MetricsLog& log, TokenClass cls, double p, std::optional<Millis> t0,
                       std::optional<Millis> t1) {
  auto samples = tpot_samples(log, cls, t0, t1);
  if (samples.empty()) {
    throw MetricsError(cls == TokenClass::kSerial ? "no serial-class samples" : "no parallel-class samples");
  }
  return nearest_rank(std::move(samples), p);
}

double slo_attainment(const MetricsLog& log) {
  std::size_t completed = 0;
  std::size_t met = 0;
  for (const auto& r : log.requests) {
    if (!r.finished) continue;
    ++completed;
    met += r.met_slo ? 1 : 0;
  }
  if (completed == 0) throw MetricsError("no completed requests");
  return static_cast<double>(met) / static_cast<double>(completed);
}

namespace {

std::unordered_map<RequestId, bool> slo_by_request(const MetricsLog& log) {
  std::unordered_map<RequestId, bool> met;
  met.reserve(log.requests.size());
  for (const auto& r : log.requests) met[r.request_id] = r.finished && r.met_slo;
  return met;
}

std::optional<double> optional_percentile(const MetricsLog& log, TokenClass cls, std::optional<Millis> t0,
                                          std::optional<Millis> t1) {
  auto samples = tpot_samples(log, cls, t0, t1);
  if (samples.empty()) return std::nullopt;
  return nearest_rank(std::move(samples), 99.0);
}

WindowSummary summarize(const MetricsLog& log, const std::unordered_map<RequestId, bool>& met, Millis t0,
                        Millis t1) {
  if (!(t1 > t0)) throw std::invalid_argument("window end must exceed its start");
  WindowSummary w;
  w.t0 = t0;
  w.t1 = t1;
  const double seconds = (t1 - t0) / 1000.0;
  std::int64_t tokens = 0;
  std::int64_t good = 0;
  std::int64_t granted = 0;
  std::int64_t ready = 0;
  double latency_sum = 0.0;
  std::int64_t steps = 0;
  const auto first = std::lower_bound(log.steps.begin(), log.steps.end(), t0,
                                      [](const StepRecord& s, Millis t) { return s.end < t; });
  for (auto it = first; it != log.steps.end() && it->end < t1; ++it) {
    ++steps;
    latency_sum += it->realized;
    granted += it->granted;
    ready += it->ready;
    for (const auto& d : it->deliveries) {
      const int n = d.serial_tokens + d.parallel_tokens;
      tokens += n;
      if (met.at(d.request_id)) good += n;
    }
  }
  w.empty = steps == 0;
  w.throughput = static_cast<double>(tokens) / seconds;
  w.goodput = static_cast<double>(good) / seconds;
  w.admission_rate = ready == 0 ? 1.0 : static_cast<double>(granted) / static_cast<double>(ready);
  w.mean_step_latency = steps == 0 ? 0.0 : latency_sum / static_cast<double>(steps);

  std::size_t arrivals = 0;
  std::size_t completed = 0;
  std::size_t met_count = 0;
  for (const auto& r : log.requests) {
    if (r.arrival >= t0 && r.arrival < t1) ++arrivals;
    if (r.finished && r.completion >= t0 && r.completion < t1) {
      ++completed;
      met_count += r.met_slo ? 1 : 0;
    }
  }
  w.req_rate = static_cast<double>(arrivals) / seconds;
  if (completed > 0) w.attainment = static_cast<double>(met_count) / static_cast<double>(completed);
  w.serial_p99 = optional_percentile(log, TokenClass::kSerial, t0, t1);
  w.parallel_p99 = optional_percentile(log, TokenClass::kParallel, t0, t1);
  return w;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

WindowSummary summarize_window(const MetricsLog& log, Millis t0, Millis t1) {
  return summarize(log, slo_by_request(log), t0, t1);
}

std::vector<WindowSummary> windowed(const MetricsLog& log, Millis width) {
  if (!(width > 0.0)) throw std::invalid_argument("window width must be positive");
  std::vector<WindowSummary> out;
  if (log.steps.empty() && log.requests.empty()) return out;
  const auto met = slo_by_request(log);
  const auto count = static_cast<std::size_t>(std::ceil(log.trace_span / width - 1e-9));
  for (std::size_t i = 0; i < count; ++i) {
    const Millis t0 = static_cast<double>(i) * width;
    out.push_back(summarize(log, met, t0, t0 + width));
  }
  return out;
}

void write_csv_header(std::ostream& out) {
  out << "window_start_min,policy,req_rate,mean_step_latency_ms,throughput,goodput,attainment,"
         "serial_p99_tpot,parallel_p99_tpot,admission_rate\n";
}

void write_csv_rows(std::ostream& out, const MetricsLog& log, Millis width) {
  for (const auto& w : windowed(log, width)) {
    out << fmt(w.t0 / kMsPerMinute) << ',' << log.policy << ',' << fmt(w.req_rate) << ','
        << fmt(w.mean_step_latency) << ',' << fmt(w.throughput) << ',' << fmt(w.goodput) << ','
        << fmt(w.attainment) << ',' << fmt(w.serial_p99) << ',' << fmt(w.parallel_p99) << ','
        << fmt(w.admission_rate) << '\n';
  }
}

void export_csv(const std::string& path, const MetricsLog& log, Millis width) {
  std::ofstream out(path);
  if (!out) throw MetricsError("cannot write " + path);
  write_csv_header(out);
  write_csv_rows(out, log, width);
  if (!out) throw MetricsError("cannot write " + path);
}

RunSummary summarize_run(const MetricsLog& log) {
  RunSummary s;
  s.policy = log.policy;
  s.requests = log.requests.size();
  s.unschedulable = log.unschedulable.size();
  for (const auto& r : log.requests) s.completed += r.finished ? 1 : 0;
  if (s.completed > 0) s.attainment = slo_attainment(log);
  if (!log.steps.empty()) s.makespan = log.steps.back().end;
  const Millis span = log.trace_span > 0.0 ? log.trace_span : s.makespan;
  if (span > 0.0) {
    const WindowSummary w = summarize_window(log, 0.0, span);
    s.throughput = w.throughput;
    s.goodput = w.goodput;
    s.admission_rate = w.admission_rate;
    s.mean_step_latency = w.mean_step_latency;
  }
  s.serial_p99 = optional_percentile(log, TokenClass::kSerial, std::nullopt, std::nullopt);
  s.parallel_p99 = optional_percentile(log, TokenClass::kParallel, std::nullopt, std::nullopt);
  if (!log.counters.planner_wall_us.empty()) s.median_planner_us = nearest_rank(log.counters.planner_wall_us, 50.0);
  s.counters = log.counters;
  s.counters.planner_wall_us.clear();
  return s;
}

void write_summary_json(std::ostream& out, const RunSummary& s) {
  const auto& c = s.counters;
  json j = {
      {"policy", s.policy},
      {"requests", s.requests},
      {"completed", s.completed},
      {"unschedulable", s.unschedulable},
      {"attainment", s.attainment},
      {"throughput_tok_s", s.throughput},
      {"goodput_tok_s", s.goodput},
      {"goodput_vs_off", optional_json(s.goodput_vs_off)},
      {"admission_rate", s.admission_rate},
      {"mean_step_latency_ms", s.mean_step_latency},
      {"serial_p99_tpot_ms", optional_json(s.serial_p99)},
      {"parallel_p99_tpot_ms", optional_json(s.parallel_p99)},
      {"makespan_ms", s.makespan},
      {"median_planner_us", s.median_planner_us},
      {"counters",
       {{"steps", c.steps},
        {"budget_checks", c.budget_checks},
        {"budget_violations", c.budget_violations},
        {"deferrals", c.deferrals},
        {"deferral_kv_mutations", c.deferral_kv_mutations},
        {"kv_mutations", c.kv_mutations},
        {"preemptions", c.preemptions},
        {"memory_trimmed_grants", c.memory_trimmed_grants},
        {"refreshes", c.refreshes},
        {"degenerate_refreshes", c.degenerate_refreshes},
        {"planner_calls", c.planner_calls},
        {"planner_evals", c.planner_evals},
        {"eval_bound_violations", c.eval_bound_violations}}},
  };
  out << j.dump(2) << '\n';
}

void write_steps_jsonl(std::ostream& out, const MetricsLog& log) {
  for (const auto& s : log.steps) {
    json deliveries = json::array();
    for (const auto& d : s.deliveries) deliveries.push_back({d.request_id, d.serial_tokens, d.parallel_tokens});
    json j = {{"step", s.step_index},
              {"start_ms", s.start},
              {"end_ms", s.end},
              {"n", s.composition.n_tokens},
              {"L", s.composition.aggregate_context},
              {"active", s.active_requests},
              {"granted", s.granted},
              {"ready", s.ready},
              {"predicted_ms", s.predicted},
              {"realized_ms", s.realized},
              {"budget_ms", s.budget ? json(*s.budget) : json(nullptr)},
              {"deliveries", deliveries}};
    out << j.dump() << '\n';
  }
}

}  // namespace taper
