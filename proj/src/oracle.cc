// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#include "taper/oracle.h"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>

#include "json.hpp"

namespace taper {

using json = nlohmann::json;

namespace {

// Additive-cost encoding: each opportunistic sequence of context L costs b + c*L.
// b is kept far below the feasibility slack so an exact fit stays feasible.
constexpr double kEncodeB = 1e-12;
constexpr double kEncodeC = 1e-6;
constexpr double kFeasibilitySlack = 1e-9;

double feasibility_limit(double budget) { return budget + kFeasibilitySlack * std::max(1.0, budget); }

}  // namespace

int AllocationInstance::total_branches() const {
  int n = 0;
  for (const auto& r : requests) n += static_cast<int>(r.costs.size());
  return n;
}

void AllocationInstance::validate() const {
  if (!(budget >= 0.0)) throw OracleError("budget must be non-negative");
  for (const auto& r : requests) {
    for (double c : r.costs) {
      if (!(c > 0.0)) throw OracleError("marginal costs must be positive");
    }
  }
  if (total_branches() > kMaxOracleBranches) {
    throw OracleError("instance too large: " + std::to_string(total_branches()) + " branches (limit " +
                      std::to_string(kMaxOracleBranches) + ")");
  }
}

double allocation_utility(const AllocationInstance& inst, const std::vector<int>& granted) {
  double u = 0.0;
  for (std::size_t i = 0; i < inst.requests.size(); ++i) {
    u += inst.requests[i].utility.value(granted[i], inst.requests[i].request_class);
  }
  return u;
}

double allocation_cost(const AllocationInstance& inst, const std::vector<int>& granted) {
  double c = 0.0;
  for (std::size_t i = 0; i < inst.requests.size(); ++i) {
    for (int k = 0; k < granted[i]; ++k) c += inst.requests[i].costs[static_cast<std::size_t>(k)];
  }
  return c;
}

OracleSolution optimal_allocation(const AllocationInstance& inst) {
  inst.validate();
  const std::size_t n = inst.requests.size();
  const double limit = feasibility_limit(inst.budget);
  OracleSolution best;
  best.granted.assign(n, 0);
  std::vector<int> k(n, 0);
  // Odometer over all grant vectors in lexicographic order; a strictly better
  // utility is required to replace the incumbent, so ties keep the smallest.
  for (;;) {
    const double cost = allocation_cost(inst, k);
    if (cost <= limit) {
      const double u = allocation_utility(inst, k);
      if (u > best.utility + 1e-12) {
        best.granted = k;
        best.utility = u;
        best.cost = cost;
      }
    }
    std::size_t pos = n;
    while (pos > 0) {
      --pos;
      if (k[pos] < static_cast<int>(inst.requests[pos].costs.size())) {
        ++k[pos];
        std::fill(k.begin() + static_cast<std::ptrdiff_t>(pos) + 1, k.end(), 0);
        break;
      }
      if (pos == 0) return best;
    }
    if (n == 0) return best;
  }
}

GreedyComparison compare_greedy(const AllocationInstance& inst) {
  inst.validate();
  GreedyComparison cmp;
  cmp.encoded = inst;

  ProtectedBatch batch;
  for (std::size_t i = 0; i < inst.requests.size(); ++i) {
    const auto& req = inst.requests[i];
    RequestSlot slot;
    slot.id = static_cast<RequestId>(i);
    slot.deadline = 0.0;
    slot.protected_slot = kSerialSlot;
    slot.protected_context = 1;
    auto& enc = cmp.encoded.requests[i].costs;
    for (std::size_t b = 0; b < req.costs.size(); ++b) {
      const auto ctx = std::max<std::int64_t>(1, std::llround((req.costs[b] - kEncodeB) / kEncodeC));
      slot.opportunistic_slots.push_back(static_cast<int>(b));
      slot.opportunistic_contexts.push_back(ctx);
      enc[b] = kEncodeB + kEncodeC * static_cast<double>(ctx);
    }
    batch.composition.add_sequence(slot.protected_context);
    batch.slots.push_back(std::move(slot));
  }

  const Predictor predictor = Predictor::linear({0.0, kEncodeB, kEncodeC});
  const Millis t0 = predictor(batch.composition);
  std::vector<UtilityCurve> curves;
  for (const auto& r : inst.requests) curves.push_back(r.utility);
  for (std::size_t i = 0; i < batch.slots.size(); ++i) batch.slots[i].request_class = inst.requests[i].request_class;
  const Allocation alloc = greedy_widen_per_slot(batch, predictor, curves, t0 + feasibility_limit(inst.budget));

  cmp.greedy.granted = alloc.granted;
  cmp.greedy.utility = allocation_utility(cmp.encoded, alloc.granted);
  cmp.greedy.cost = allocation_cost(cmp.encoded, alloc.granted);
  cmp.optimal = optimal_allocation(cmp.encoded);
  if (cmp.optimal.utility <= 0.0) {
    cmp.ratio = cmp.greedy.utility <= 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  } else {
    cmp.ratio = cmp.greedy.utility / cmp.optimal.utility;
  }
  return cmp;
}

AllocationInstance random_instance(std::mt19937_64& rng, const RandomInstanceSpec& spec) {
  std::uniform_int_distribution<int> n_requests(1, spec.max_requests);
  std::uniform_int_distribution<int> n_branches(1, spec.max_branches);
  std::uniform_real_distribution<double> cost(spec.min_cost, spec.max_cost);
  std::uniform_real_distribution<double> weight(spec.min_weight, spec.max_weight);
  std::uniform_real_distribution<double> fraction(spec.min_budget_fraction, spec.max_budget_fraction);
  std::uniform_int_distribution<int> curve(0, 2);
  AllocationInstance inst;
  double total = 0.0;
  const int n = n_requests(rng);
  for (int i = 0; i < n; ++i) {
    OracleRequest r;
    const int m = n_branches(rng);
    for (int b = 0; b < m; ++b) {
      r.costs.push_back(cost(rng));
      total += r.costs.back();
    }
    switch (curve(rng)) {
      case 0:
        r.utility = UtilityCurve::linear();
        break;
      case 1:
        r.utility = UtilityCurve::concave();
        break;
      default:
        r.utility = UtilityCurve::weighted({weight(rng)});
        break;
    }
    inst.requests.push_back(std::move(r));
  }
  inst.budget = fraction(rng) * total;
  return inst;
}

AllocationInstance read_instance_json(std::istream& in) {
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw OracleError(std::string("malformed instance JSON: ") + e.what());
  }
  AllocationInstance inst;
  try {
    inst.budget = j.at("budget").get<double>();
    for (const auto& r : j.at("requests")) {
      OracleRequest req;
      req.costs = r.at("costs").get<std::vector<double>>();
      const std::string name = r.value("utility", std::string("linear"));
      req.utility = name == "weighted" ? UtilityCurve::weighted({r.value("weight", 1.0)}) : UtilityCurve::parse(name);
      inst.requests.push_back(std::move(req));
    }
  } catch (const json::exception& e) {
    throw OracleError(std::string("malformed instance: ") + e.what());
  }
  inst.validate();
  return inst;
}

void write_comparison_json(std::ostream& out, const GreedyComparison& cmp) {
  auto solution = [](const OracleSolution& s) {
    return json{{"granted", s.granted}, {"utility", s.utility}, {"cost", s.cost}};
  };
  json j = {{"greedy", solution(cmp.greedy)}, {"optimal", solution(cmp.optimal)}, {"ratio", cmp.ratio}};
  out << j.dump(2) << '\n';
}

}  // namespace taper
