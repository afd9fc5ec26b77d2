// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <stdexcept>
#include <vector>

#include "taper/policy.h"

namespace taper {

class OracleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kMaxOracleBranches = 24;

struct OracleRequest {
  std::vector<double> costs;  // marginal cost of each successive branch, ms
  UtilityCurve utility = UtilityCurve::linear();
  int request_class = 0;
};

// Width allocation with additive per-branch costs and a budget on their sum.
struct AllocationInstance {
  std::vector<OracleRequest> requests;
  double budget = 0.0;

  int total_branches() const;
  // Throws OracleError on non-positive costs, negative budget or > 24 branches.
  void validate() const;
};

struct OracleSolution {
  std::vector<int> granted;  // branches per request, a prefix of its cost list
  double utility = 0.0;
  double cost = 0.0;
};

double allocation_utility(const AllocationInstance& inst, const std::vector<int>& granted);
double allocation_cost(const AllocationInstance& inst, const std::vector<int>& granted);

// Exhaustive search; among maximum-utility feasible grant vectors returns the
// lexicographically smallest.
OracleSolution optimal_allocation(const AllocationInstance& inst);

struct GreedyComparison {
  OracleSolution greedy;
  OracleSolution optimal;
  double ratio = 1.0;  // greedy / optimal, 1 when both are 0
  AllocationInstance encoded;  // costs after encoding into the linear predictor
};

// Runs the planner's greedy loop on a batch whose linear predictor reproduces
// the instance's costs, and the oracle on the same (encoded) costs.
GreedyComparison compare_greedy(const AllocationInstance& inst);

struct RandomInstanceSpec {
  int max_requests = 6;
  int max_branches = 4;
  double min_cost = 0.5;
  double max_cost = 5.0;
  double min_budget_fraction = 0.25;  // of the total branch cost
  double max_budget_fraction = 0.75;
  double min_weight = 0.5;
  double max_weight = 2.0;
};

// Mixed utility curves: linear, concave and weighted.
AllocationInstance random_instance(std::mt19937_64& rng, const RandomInstanceSpec& spec = {});

// {"budget": B, "requests": [{"costs": [...], "utility": "linear"|"concave"|"weighted", "weight": w}]}
AllocationInstance read_instance_json(std::istream& in);
void write_comparison_json(std::ostream& out, const GreedyComparison& cmp);

}  // namespace taper
