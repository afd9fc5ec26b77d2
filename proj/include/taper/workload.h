// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "taper/config.h"

namespace taper {

using RequestId = std::int64_t;
using Millis = double;

inline constexpr Millis kMsPerMinute = 60'000.0;

struct SerialStage {
  std::int64_t token_count = 0;

  friend bool operator==(const SerialStage&, const SerialStage&) = default;
};

// A parallel phase: `header_tokens` are decoded serially before the branches
// open, every branch then decodes independently (its own header folded into
// its length), and `reduce_tokens` are decoded after all branches complete.
struct ParallelStage {
  std::int64_t header_tokens = 0;
  std::vector<std::int64_t> branch_lengths;
  std::int64_t reduce_tokens = 0;

  int fanout() const { return static_cast<int>(branch_lengths.size()); }
  std::int64_t branch_tokens() const;
  std::int64_t total_tokens() const { return header_tokens + branch_tokens() + reduce_tokens; }

  friend bool operator==(const ParallelStage&, const ParallelStage&) = default;
};

using Stage = std::variant<SerialStage, ParallelStage>;

std::int64_t stage_tokens(const Stage& stage);

struct RequestScript {
  RequestId request_id = 0;
  Millis arrival_time = 0.0;
  std::int64_t prompt_tokens = 0;
  std::vector<Stage> stages;
  // Tenant/priority class for weighted utility curves.
  int request_class = 0;

  bool decomposable() const;
  std::int64_t output_tokens() const;
  std::int64_t parallel_branch_tokens() const;

  friend bool operator==(const RequestScript&, const RequestScript&) = default;
};

struct Trace {
  std::vector<RequestScript> scripts;
  std::map<std::string, std::string> metadata;
  // Set by parse_trace when input arrivals were out of order and got sorted.
  bool resorted = false;

  friend bool operator==(const Trace& a, const Trace& b) {
    return a.scripts == b.scripts && a.metadata == b.metadata;
  }
};

class TraceError : public std::runtime_error {
 public:
  TraceError(int line, const std::string& message);
  int line() const { return line_; }

 private:
  int line_;
};

// Throws std::invalid_argument when the script violates a structural invariant.
void validate_script(const RequestScript& script);

Trace parse_trace(std::istream& in);
Trace load_trace(const std::string& path);
void write_trace(std::ostream& out, const Trace& trace);
void save_trace(const std::string& path, const Trace& trace);

struct RegimeSegment {
  double duration_min = 0.0;
  double mean_rate = 0.0;  // requests per second
};

struct LengthDistribution {
  double mean = 0.0;
  double stddev = 0.0;
};

struct RegimeSpec {
  std::vector<RegimeSegment> segments;
  double pdr_target = 0.5;
  // percentile (0-100) -> fanout at that percentile
  std::map<double, int> fanout_percentiles{{10, 2}, {25, 3}, {50, 4}, {75, 5}, {90, 7}};
  double pts_target = 0.58;
  LengthDistribution prompt_length{1024.0, 512.0};
  LengthDistribution output_length{256.0, 128.0};
  int max_parallel_stages = 2;
  Millis slo_tpot = 50.0;

  void validate() const;
  static RegimeSpec from_config(const KeyValueConfig& cfg);
};

// Piecewise-linear quantile function through the percentile table with flat
// tails, rounded to the nearest integer fanout (never below 2).
class FanoutSampler {
 public:
  explicit FanoutSampler(const std::map<double, int>& percentiles);
  int quantile(double u) const;

 private:
  std::vector<std::pair<double, double>> knots_;
};

Trace generate_trace(const RegimeSpec& spec, std::uint64_t seed);

struct WorkloadStats {
  double pdr = 0.0;
  double pts = 0.0;
  double abf = 0.0;
  std::int64_t requests = 0;
  std::int64_t parallel_stages = 0;
};

WorkloadStats characterize(const Trace& trace);

}  // namespace taper
