// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taper/costmodel.h"
#include "taper/generation.h"

namespace taper {

// u(k) for k opportunistic branches. u(0) = 0 and u is non-decreasing.
class UtilityCurve {
 public:
  enum class Kind { kLinear, kConcave, kWeighted };

  static UtilityCurve linear();
  static UtilityCurve concave();  // ln(1 + k)
  // u(k) = weight[class] * k; classes beyond the table weigh 1.
  static UtilityCurve weighted(std::vector<double> class_weights);
  static UtilityCurve parse(const std::string& name, std::vector<double> class_weights = {});

  double value(int k, int request_class = 0) const;
  double marginal(int k, int request_class = 0) const { return value(k + 1, request_class) - value(k, request_class); }

  Kind kind() const { return kind_; }
  std::string name() const;

 private:
  Kind kind_ = Kind::kLinear;
  std::vector<double> weights_;
};

struct PolicyKind {
  enum class Type { kOff, kCap, kEager, kTaper };
  Type type = Type::kOff;
  int cap = 1;       // kCap only, step width limit w <= cap
  double rho = 0.8;  // kTaper only, in (0, 1]
  UtilityCurve utility = UtilityCurve::linear();

  static PolicyKind off() { return {Type::kOff}; }
  static PolicyKind capped(int k);
  static PolicyKind eager() { return {Type::kEager}; }
  static PolicyKind taper(double rho, UtilityCurve utility = UtilityCurve::linear());
  // off | capN | eager | taper
  static PolicyKind parse(const std::string& name, double rho = 0.8, UtilityCurve utility = UtilityCurve::linear());

  void validate() const;
  std::string name() const;
};

// Planner view of one active request.
struct RequestSlot {
  RequestId id = 0;
  int request_class = 0;
  Millis deadline = 0.0;
  int protected_slot = kSerialSlot;
  std::int64_t protected_context = 0;
  // Ready branches other than the protected pick, ascending branch index.
  std::vector<int> opportunistic_slots;
  std::vector<std::int64_t> opportunistic_contexts;

  int ready_opportunistic() const { return static_cast<int>(opportunistic_slots.size()); }
};

struct ProtectedBatch {
  StepComposition composition;  // one sequence per active request
  std::vector<RequestSlot> slots;  // ascending request id
};

// `active` must contain only Active runtimes. Deadlines are
// last_progress_time + slo_tpot.
ProtectedBatch build_protected_composition(std::span<const RequestRuntime* const> active, Millis slo_tpot);

struct SlackBudget {
  Millis t0 = 0.0;
  Millis min_slack = 0.0;
  Millis budget = 0.0;  // t0 + rho * max(0, min_slack - t0)
};

SlackBudget compute_slack_budget(const ProtectedBatch& batch, const Predictor& predictor, double rho, Millis now);

// E(k) = T(widened) - T(baseline); throws if widened does not contain baseline.
Millis compute_externality(const Predictor& predictor, const StepComposition& widened,
                           const StepComposition& baseline);

inline constexpr double kScoreEpsilon = 1e-9;

struct PlannerStats {
  int initial_candidates = 0;
  std::int64_t predictor_evals = 0;  // T(widened) evaluations in the greedy loop
  int grants = 0;
  int prunes = 0;
  std::int64_t eval_bound() const {
    return static_cast<std::int64_t>(initial_candidates) * (1 + grants + prunes);
  }
  // (request id, feasible) for each evaluation, filled only when requested.
  std::vector<std::pair<RequestId, bool>> evaluations;
};

struct Allocation {
  StepComposition composition;
  // Aligned with ProtectedBatch::slots.
  std::vector<int> granted;
  std::optional<SlackBudget> budget;
  PlannerStats stats;

  int total_granted() const;
};

int total_ready_opportunistic(const ProtectedBatch& batch);

Allocation plan_fixed(const ProtectedBatch& batch, const PolicyKind& kind);

// The greedy widening loop: starting from `start_grants` (branches already
// in the step), repeatedly commits the eligible candidate with the best
// utility per marginal predicted cost whose widened step fits `budget`.
Allocation greedy_widen(const ProtectedBatch& batch, const Predictor& predictor, const UtilityCurve& utility,
                        Millis budget, std::span<const int> start_grants = {},
                        std::span<const bool> eligible = {}, bool record_evaluations = false);

// As greedy_widen, with a separate utility curve for each slot.
Allocation greedy_widen_per_slot(const ProtectedBatch& batch, const Predictor& predictor,
                                 std::span<const UtilityCurve> utilities, Millis budget);

Allocation plan_taper(const ProtectedBatch& batch, const Predictor& predictor, double rho,
                      const UtilityCurve& utility, Millis now, bool record_evaluations = false);

// Composition of the protected batch widened by `grants` (aligned with slots).
StepComposition widen(const ProtectedBatch& batch, std::span<const int> grants);

}  // namespace taper
