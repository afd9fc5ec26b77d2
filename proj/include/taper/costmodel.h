// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "taper/workload.h"

namespace taper {

// Sequences advancing one token in a decode step and their total context.
struct StepComposition {
  std::int64_t n_tokens = 0;
  std::int64_t aggregate_context = 0;

  void add_sequence(std::int64_t context) {
    ++n_tokens;
    aggregate_context += context;
  }
  bool contains(const StepComposition& other) const {
    return n_tokens >= other.n_tokens && aggregate_context >= other.aggregate_context;
  }

  friend bool operator==(const StepComposition&, const StepComposition&) = default;
};

// T(S) = a + b * n_tokens + c * aggregate_context, in milliseconds.
struct LinearLatencyModel {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;

  // Throws std::invalid_argument unless a >= 0, b > 0, c > 0.
  void validate() const;
};

inline Millis predict(const LinearLatencyModel& m, const StepComposition& s) {
  return m.a + m.b * static_cast<double>(s.n_tokens) + m.c * static_cast<double>(s.aggregate_context);
}

// The latency function the planner consults. Besides the fitted linear model
// it can act as the constant-cost ablation, which charges every sequence the
// same fixed cost and ignores context.
class Predictor {
 public:
  enum class Kind { kLinear, kPerSequenceConstant };

  Predictor() = default;
  static Predictor linear(const LinearLatencyModel& model);
  static Predictor per_sequence_constant(Millis cost_per_sequence);

  Millis operator()(const StepComposition& s) const {
    if (kind_ == Kind::kLinear) return predict(model_, s);
    return per_sequence_ * static_cast<double>(s.n_tokens);
  }

  Kind kind() const { return kind_; }
  const LinearLatencyModel& model() const { return model_; }
  Millis per_sequence_cost() const { return per_sequence_; }

 private:
  Kind kind_ = Kind::kLinear;
  LinearLatencyModel model_;
  Millis per_sequence_ = 0.0;
};

// Simulated hardware: the base model with multiplicative truncated-normal noise.
struct GroundTruthModel {
  LinearLatencyModel base;
  double noise_sigma = 0.02;
  std::uint64_t seed = 0;
};

// The relative noise term for a step: N(0, sigma) clipped to +-3 sigma,
// a pure function of (seed, step_index).
double latency_noise(std::uint64_t seed, std::uint64_t step_index, double sigma);

Millis realize_latency(const GroundTruthModel& gt, const StepComposition& s, std::uint64_t step_index);

struct LatencySample {
  StepComposition composition;
  Millis observed = 0.0;
};

// Fixed-capacity ring of the most recent samples, oldest first.
class SampleWindow {
 public:
  explicit SampleWindow(std::size_t capacity = 200);

  void push(const LatencySample& sample);
  std::size_t size() const { return samples_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return samples_.empty(); }
  std::vector<LatencySample> samples() const { return {samples_.begin(), samples_.end()}; }

 private:
  std::size_t capacity_;
  std::deque<LatencySample> samples_;
};

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kCoefficientFloor = 1e-6;

struct FitResult {
  LinearLatencyModel model;
  std::vector<std::string> warnings;  // one per clamped coefficient
};

// Ordinary least squares over rows (1, n_tokens, aggregate_context).
// Throws FitError on too few samples or a rank-deficient design.
FitResult fit_ols(std::span<const LatencySample> samples);

struct RefreshResult {
  LinearLatencyModel model;
  bool degenerate = false;  // window unusable; `model` is the prior
  std::vector<std::string> warnings;
};

RefreshResult refresh_model(const LinearLatencyModel& prior, const SampleWindow& window);

// Mean of |predicted - observed| / observed.
double evaluate_mape(const LinearLatencyModel& model, std::span<const LatencySample> samples);

// Fires once per elapsed interval of simulated time.
class RefreshSchedule {
 public:
  explicit RefreshSchedule(Millis interval);
  bool due(Millis now);
  int fired() const { return fired_; }

 private:
  Millis interval_;
  Millis next_;
  int fired_ = 0;
};

struct ProfilingGrid {
  std::vector<std::int64_t> batch_sizes;
  std::vector<std::int64_t> context_lengths;  // per-sequence context

  // 20 batch sizes x 25 per-sequence context lengths, log-spaced.
  static ProfilingGrid standard(std::int64_t max_batch = 64, std::int64_t min_context = 128,
                                std::int64_t max_context = 4096);
};

// One realized latency per grid cell; step indices start at `first_step`.
std::vector<LatencySample> profile(const GroundTruthModel& gt, const ProfilingGrid& grid,
                                   std::uint64_t first_step = 0);

void write_samples_json(std::ostream& out, std::span<const LatencySample> samples);
std::vector<LatencySample> read_samples_json(std::istream& in);
void write_model_json(std::ostream& out, const LinearLatencyModel& model, double mape);
LinearLatencyModel read_model_json(std::istream& in);

}  // namespace taper
