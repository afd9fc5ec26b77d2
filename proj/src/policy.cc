// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#include "taper/policy.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace taper {

UtilityCurve UtilityCurve::linear() { return {}; }

UtilityCurve UtilityCurve::concave() {
  UtilityCurve u;
  u.kind_ = Kind::kConcave;
  return u;
}

UtilityCurve UtilityCurve::weighted(std::vector<double> class_weights) {
  for (double w : class_weights) {
    if (w < 0.0) throw std::invalid_argument("utility weights must be non-negative");
  }
  UtilityCurve u;
  u.kind_ = Kind::kWeighted;
  u.weights_ = std::move(class_weights);
  return u;
}

UtilityCurve UtilityCurve::parse(const std::string& name, std::vector<double> class_weights) {
  if (name == "linear") return linear();
  if (name == "concave") return concave();
  if (name == "weighted") return weighted(std::move(class_weights));
  throw std::invalid_argument("unknown utility curve '" + name + "' (expected linear, concave or weighted)");
}

double UtilityCurve::value(int k, int request_class) const {
  const double kk = static_cast<double>(k);
  switch (kind_) {
    case Kind::kLinear:
      return kk;
    case Kind::kConcave:
      return std::log1p(kk);
    case Kind::kWeighted: {
      const bool known = request_class >= 0 && request_class < static_cast<int>(weights_.size());
      return (known ? weights_[static_cast<std::size_t>(request_class)] : 1.0) * kk;
    }
  }
  return kk;
}

std::string UtilityCurve::name() const {
  switch (kind_) {
    case Kind::kLinear:
      return "linear";
    case Kind::kConcave:
      return "concave";
    case Kind::kWeighted:
      return "weighted";
  }
  return "linear";
}

PolicyKind PolicyKind::capped(int k) {
  PolicyKind p{Type::kCap};
  p.cap = k;
  p.validate();
  return p;
}

PolicyKind PolicyKind::taper(double rho, UtilityCurve utility) {
  PolicyKind p{Type::kTaper};
  p.rho = rho;
  p.utility = std::move(utility);
  p.validate();
  return p;
}

PolicyKind PolicyKind::parse(const std::string& name, double rho, UtilityCurve utility) {
  if (name == "off") return off();
  if (name == "eager") return eager();
  if (name == "taper") return taper(rho, std::move(utility));
  if (name.size() > 3 && name.rfind("cap", 0) == 0) {
    const auto digits = name.substr(3);
    if (std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      return capped(std::stoi(digits));
    }
  }
  throw std::invalid_argument("unknown policy '" + name + "' (expected off, capN, eager or taper)");
}

void PolicyKind::validate() const {
  if (type == Type::kCap && cap < 1) throw std::invalid_argument("cap must be >= 1");
  if (type == Type::kTaper && !(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in (0, 1]");
}

std::string PolicyKind::name() const {
  switch (type) {
    case Type::kOff:
      return "off";
    case Type::kCap:
      return "cap" + std::to_string(cap);
    case Type::kEager:
      return "eager";
    case Type::kTaper:
      return "taper";
  }
  return "off";
}

ProtectedBatch build_protected_composition(std::span<const RequestRuntime* const> active, Millis slo_tpot) {
  ProtectedBatch batch;
  batch.slots.reserve(active.size());
  for (const RequestRuntime* rt : active) {
    if (rt->state() != RequestState::kActive) throw std::logic_error("protected composition over a non-active request");
    RequestSlot slot;
    slot.id = rt->id();
    slot.request_class = rt->script().request_class;
    slot.deadline = rt->last_progress_time() + slo_tpot;
    slot.protected_slot = rt->protected_slot();
    slot.protected_context = rt->context_length(slot.protected_slot);
    if (rt->in_branch_phase()) {
      for (int b : rt->ready_branches()) {
        if (b == slot.protected_slot) continue;
        slot.opportunistic_slots.push_back(b);
        slot.opportunistic_contexts.push_back(rt->context_length(b));
      }
    }
    batch.composition.add_sequence(slot.protected_context);
    batch.slots.push_back(std::move(slot));
  }
  std::sort(batch.slots.begin(), batch.slots.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return batch;
}

SlackBudget compute_slack_budget(const ProtectedBatch& batch, const Predictor& predictor, double rho, Millis now) {
  SlackBudget sb;
  sb.t0 = predictor(batch.composition);
  if (batch.slots.empty()) {
    sb.min_slack = 0.0;
    sb.budget = sb.t0;
    return sb;
  }
  sb.min_slack = std::numeric_limits<Millis>::infinity();
  for (const auto& s : batch.slots) sb.min_slack = std::min(sb.min_slack, s.deadline - now);
  sb.budget = sb.t0 + rho * std::max(0.0, sb.min_slack - sb.t0);
  return sb;
}

Millis compute_externality(const Predictor& predictor, const StepComposition& widened,
                           const StepComposition& baseline) {
  if (!widened.contains(baseline)) throw std::invalid_argument("widened step is smaller than the baseline");
  return predictor(widened) - predictor(baseline);
}

int Allocation::total_granted() const { return std::accumulate(granted.begin(), granted.end(), 0); }

int total_ready_opportunistic(const ProtectedBatch& batch) {
  int total = 0;
  for (const auto& s : batch.slots) total += s.ready_opportunistic();
  return total;
}

StepComposition widen(const ProtectedBatch& batch, std::span<const int> grants) {
  StepComposition s = batch.composition;
  for (std::size_t i = 0; i < grants.size(); ++i) {
    for (int k = 0; k < grants[i]; ++k) s.add_sequence(batch.slots[i].opportunistic_contexts[static_cast<std::size_t>(k)]);
  }
  return s;
}

Allocation plan_fixed(const ProtectedBatch& batch, const PolicyKind& kind) {
  if (kind.type == PolicyKind::Type::kTaper) throw std::invalid_argument("plan_fixed called with a taper policy");
  Allocation alloc;
  alloc.granted.resize(batch.slots.size(), 0);
  for (std::size_t i = 0; i < batch.slots.size(); ++i) {
    const int ready = batch.slots[i].ready_opportunistic();
    switch (kind.type) {
      case PolicyKind::Type::kOff:
        break;
      case PolicyKind::Type::kCap:
        alloc.granted[i] = std::min(ready, kind.cap - 1);
        break;
      case PolicyKind::Type::kEager:
        alloc.granted[i] = ready;
        break;
      case PolicyKind::Type::kTaper:
        break;
    }
  }
  alloc.composition = widen(batch, alloc.granted);
  return alloc;
}

namespace {

template <typename Marginal>
Allocation greedy_loop(const ProtectedBatch& batch, const Predictor& predictor, const Marginal& marginal,
                       Millis budget, std::span<const int> start_grants, std::span<const bool> eligible,
                       bool record_evaluations) {
  const std::size_t n = batch.slots.size();
  Allocation alloc;
  alloc.granted.assign(n, 0);
  if (!start_grants.empty()) std::copy(start_grants.begin(), start_grants.end(), alloc.granted.begin());
  StepComposition step = widen(batch, alloc.granted);
  Millis step_cost = predictor(step);

  // Slots are ordered by request id, so scanning in index order breaks score ties by lowest id.
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i) {
    const bool allowed = eligible.empty() || eligible[i];
    if (allowed && alloc.granted[i] < batch.slots[i].ready_opportunistic()) candidates.push_back(i);
  }
  PlannerStats& stats = alloc.stats;
  stats.initial_candidates = static_cast<int>(candidates.size());

  while (!candidates.empty()) {
    std::optional<std::size_t> best;
    double best_score = 0.0;
    StepComposition best_step;
    Millis best_cost = 0.0;
    std::vector<std::size_t> infeasible;
    for (std::size_t i : candidates) {
      const auto& slot = batch.slots[i];
      StepComposition widened = step;
      widened.add_sequence(slot.opportunistic_contexts[static_cast<std::size_t>(alloc.granted[i])]);
      const Millis cost = predictor(widened);
      ++stats.predictor_evals;
      const bool feasible = cost <= budget;
      if (record_evaluations) stats.evaluations.emplace_back(slot.id, feasible);
      if (!feasible) {
        // Monotone predictor: any further branch of this request is infeasible too.
        infeasible.push_back(i);
        continue;
      }
      const double du = marginal(i, alloc.granted[i]);
      const double dt = cost - step_cost;
      const double score = du / (kScoreEpsilon + std::max(0.0, dt));
      if (!best || score > best_score) {
        best = i;
        best_score = score;
        best_step = widened;
        best_cost = cost;
      }
    }
    stats.prunes += static_cast<int>(infeasible.size());
    std::erase_if(candidates, [&](std::size_t i) {
      return std::find(infeasible.begin(), infeasible.end(), i) != infeasible.end();
    });
    if (!best || best_score <= 0.0) break;
    step = best_step;
    step_cost = best_cost;
    ++alloc.granted[*best];
    ++stats.grants;
    if (alloc.granted[*best] >= batch.slots[*best].ready_opportunistic()) {
      std::erase(candidates, *best);
    }
  }
  alloc.composition = step;
  return alloc;
}

}  // namespace

Allocation greedy_widen(const ProtectedBatch& batch, const Predictor& predictor, const UtilityCurve& utility,
                        Millis budget, std::span<const int> start_grants, std::span<const bool> eligible,
                        bool record_evaluations) {
  auto marginal = [&](std::size_t i, int k) { return utility.marginal(k, batch.slots[i].request_class); };
  return greedy_loop(batch, predictor, marginal, budget, start_grants, eligible, record_evaluations);
}

Allocation greedy_widen_per_slot(const ProtectedBatch& batch, const Predictor& predictor,
                                 std::span<const UtilityCurve> utilities, Millis budget) {
  if (utilities.size() != batch.slots.size()) throw std::invalid_argument("one utility curve per slot required");
  auto marginal = [&](std::size_t i, int k) { return utilities[i].marginal(k, batch.slots[i].request_class); };
  return greedy_loop(batch, predictor, marginal, budget, {}, {}, false);
}

Allocation plan_taper(const ProtectedBatch& batch, const Predictor& predictor, double rho,
                      const UtilityCurve& utility, Millis now, bool record_evaluations) {
  const SlackBudget sb = compute_slack_budget(batch, predictor, rho, now);
  Allocation alloc = greedy_widen(batch, predictor, utility, sb.budget, {}, {}, record_evaluations);
  alloc.budget = sb;
  return alloc;
}

}  // namespace taper
