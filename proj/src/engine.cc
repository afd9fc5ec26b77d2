// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#include "taper/engine.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>

#include "taper/kv_ledger.h"

namespace taper {

void EngineConfig::validate() const {
  if (!(slo_tpot > 0.0)) throw std::invalid_argument("slo_tpot must be positive");
  if (kv_capacity_blocks <= 0) throw std::invalid_argument("kv_capacity_blocks must be positive");
  if (kv_block_size < 1) throw std::invalid_argument("kv_block_size must be >= 1");
  if (!(prefill_ms_per_token > 0.0)) throw std::invalid_argument("prefill_ms_per_token must be positive");
  if (!(refresh_interval > 0.0)) throw std::invalid_argument("refresh_interval must be positive");
  if (window_capacity <= 0) throw std::invalid_argument("window_capacity must be positive");
}

EngineConfig EngineConfig::from_config(const KeyValueConfig& cfg) {
  EngineConfig c;
  c.slo_tpot = cfg.get_double("slo_tpot", c.slo_tpot);
  c.kv_capacity_blocks = cfg.get_int("kv_capacity_blocks", c.kv_capacity_blocks);
  c.kv_block_size = cfg.get_int("kv_block_size", c.kv_block_size);
  c.prefill_ms_per_token = cfg.get_double("prefill_ms_per_token", c.prefill_ms_per_token);
  c.refresh_interval = cfg.get_double("refresh_interval", c.refresh_interval);
  c.window_capacity = cfg.get_int("window_capacity", c.window_capacity);
  c.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<std::int64_t>(c.seed)));
  c.kv_admission = parse_kv_admission(cfg.get_string("kv_admission", kv_admission_name(c.kv_admission)));
  c.validate();
  return c;
}

KvAdmission parse_kv_admission(const std::string& name) {
  if (name == "reserve") return KvAdmission::kReserve;
  if (name == "prefix") return KvAdmission::kPrefix;
  throw std::invalid_argument("unknown kv_admission '" + name + "' (expected reserve or prefix)");
}

std::string kv_admission_name(KvAdmission a) { return a == KvAdmission::kReserve ? "reserve" : "prefix"; }

Ablation parse_ablation(const std::string& name) {
  if (name == "none") return Ablation::kNone;
  if (name == "no-slack-budget") return Ablation::kNoSlackBudget;
  if (name == "no-replanning") return Ablation::kNoReplanning;
  if (name == "constant-predictor") return Ablation::kConstantPredictor;
  throw std::invalid_argument("unknown ablation '" + name +
                              "' (expected none, no-slack-budget, no-replanning or constant-predictor)");
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kNone:
      return "none";
    case Ablation::kNoSlackBudget:
      return "no-slack-budget";
    case Ablation::kNoReplanning:
      return "no-replanning";
    case Ablation::kConstantPredictor:
      return "constant-predictor";
  }
  return "none";
}

std::string RunSetup::name() const {
  if (!label.empty()) return label;
  if (ablation == Ablation::kNone) return policy.name();
  return policy.name() + "/" + ablation_name(ablation);
}

Millis constant_predictor_cost(const LinearLatencyModel& predictor) {
  const auto grid = ProfilingGrid::standard();
  StepComposition one;
  one.add_sequence(grid.context_lengths.back());
  return predict(predictor, one);
}

Millis deadline_of(const RequestRuntime& req, const EngineConfig& cfg) {
  return req.last_progress_time() + cfg.slo_tpot;
}

Millis trace_span(const Trace& trace) {
  if (auto it = trace.metadata.find("segments"); it != trace.metadata.end() && !it->second.empty()) {
    double minutes = 0.0;
    for (const auto& item : split(it->second, ',')) {
      const auto parts = split(item, ':');
      if (parts.size() != 2) throw std::invalid_argument("malformed segments metadata");
      minutes += parse_double(parts[0], "segment duration");
    }
    return minutes * kMsPerMinute;
  }
  return trace.scripts.empty() ? 0.0 : trace.scripts.back().arrival_time;
}

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t fold(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffU;
    h *= kFnvPrime;
  }
  return h;
}

std::uint64_t digest(const std::vector<OutputToken>& tokens) {
  std::uint64_t h = kFnvOffset;
  for (const auto& t : tokens) {
    h = fold(h, static_cast<std::uint64_t>(t.stage_index));
    h = fold(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(t.branch)));
    h = fold(h, static_cast<std::uint64_t>(t.ordinal));
    h = fold(h, t.value);
  }
  return h;
}

// Blocks the request will hold once every token has been generated.
std::int64_t full_footprint(const KvLedger& kv, const RequestScript& s) {
  std::int64_t serial = 0;
  std::vector<std::int64_t> branches;
  for (const auto& stage : s.stages) {
    if (const auto* ser = std::get_if<SerialStage>(&stage)) {
      serial += ser->token_count;
    } else {
      const auto& p = std::get<ParallelStage>(stage);
      serial += p.header_tokens + p.reduce_tokens;
      branches.insert(branches.end(), p.branch_lengths.begin(), p.branch_lengths.end());
    }
  }
  return kv.activation_blocks(s.prompt_tokens, serial, branches);
}

std::map<std::pair<int, int>, std::int64_t> generated_branch_tokens(const RequestRuntime& rt) {
  std::map<std::pair<int, int>, std::int64_t> out;
  const auto& stages = rt.script().stages;
  for (int i = 0; i < rt.stage_index() && i < static_cast<int>(stages.size()); ++i) {
    if (const auto* p = std::get_if<ParallelStage>(&stages[static_cast<std::size_t>(i)])) {
      for (int b = 0; b < p->fanout(); ++b) out[{i, b}] = p->branch_lengths[static_cast<std::size_t>(b)];
    }
  }
  const auto& cursors = rt.branch_cursors();
  for (std::size_t b = 0; b < cursors.size(); ++b) {
    if (cursors[b] > 0) out[{rt.stage_index(), static_cast<int>(b)}] = cursors[b];
  }
  return out;
}

struct Tracker {
  Millis ready_time = 0.0;
  Millis last_delivery = 0.0;
  int open_phase_stage = -1;
  Millis phase_open = 0.0;
  int frozen_stage = -1;
  int frozen_grant = 0;
  std::int64_t footprint = 0;  // blocks held once every token is generated
};

class Simulation {
 public:
  Simulation(const Trace& trace, const RunSetup& setup, const GroundTruthModel& gt,
             const LinearLatencyModel& predictor, const EngineConfig& cfg)
      : trace_(trace),
        setup_(setup),
        gt_(gt),
        cfg_(cfg),
        model_(predictor),
        kv_(cfg.kv_capacity_blocks, cfg.kv_block_size),
        window_(static_cast<std::size_t>(cfg.window_capacity)),
        refresh_(cfg.refresh_interval * kMsPerMinute) {
    cfg.validate();
    predictor.validate();
    setup.policy.validate();
    if (trace.scripts.empty()) throw std::invalid_argument("trace is empty");
    if (setup.ablation != Ablation::kNone && setup.policy.type != PolicyKind::Type::kTaper) {
      throw std::invalid_argument("ablations apply to the taper policy only");
    }
    if (setup.ablation == Ablation::kConstantPredictor) {
      const Millis cost = setup.constant_cost > 0.0 ? setup.constant_cost : constant_predictor_cost(predictor);
      constant_ = Predictor::per_sequence_constant(cost);
    }
  }

  MetricsLog run();

 private:
  bool taper() const { return setup_.policy.type == PolicyKind::Type::kTaper; }
  Predictor planning_predictor() const {
    return setup_.ablation == Ablation::kConstantPredictor ? constant_ : Predictor::linear(model_);
  }

  void activate_ready();
  void activate(std::size_t idx);
  void preempt(std::size_t idx);
  std::size_t pick_victim() const;
  Allocation plan(const ProtectedBatch& batch, const Predictor& predictor);
  void trim_to_memory(const ProtectedBatch& batch, Allocation& alloc);
  void execute_step(const ProtectedBatch& batch, const Allocation& alloc, const Predictor& predictor);
  void finish(std::size_t idx);

  const Trace& trace_;
  const RunSetup& setup_;
  const GroundTruthModel& gt_;
  const EngineConfig& cfg_;
  LinearLatencyModel model_;
  Predictor constant_;
  KvLedger kv_;
  SampleWindow window_;
  RefreshSchedule refresh_;

  MetricsLog log_;
  std::vector<std::optional<RequestRuntime>> runtimes_;
  std::vector<Tracker> trackers_;
  std::set<std::pair<Millis, std::size_t>> pending_;
  std::vector<std::size_t> active_;  // ascending request id
  std::size_t done_ = 0;
  Millis now_ = 0.0;
  std::int64_t step_ = 0;
  std::int64_t reserved_ = 0;  // sum of active footprints
};

void Simulation::activate(std::size_t idx) {
  RequestRuntime& rt = *runtimes_[idx];
  kv_.activate(rt.id(), rt.script().prompt_tokens, rt.serial_tokens_emitted(), generated_branch_tokens(rt));
  reserved_ += trackers_[idx].footprint;
  rt.set_state(RequestState::kActive);
  rt.set_last_progress_time(now_);
  Tracker& tr = trackers_[idx];
  RequestRecord& rec = log_.requests[idx];
  if (rt.tokens_emitted() == 0) {
    rec.activation = now_;
    tr.last_delivery = now_;
  }
  const auto pos = std::lower_bound(active_.begin(), active_.end(), idx, [&](std::size_t a, std::size_t b) {
    return trace_.scripts[a].request_id < trace_.scripts[b].request_id;
  });
  active_.insert(pos, idx);
}

void Simulation::activate_ready() {
  while (!pending_.empty() && pending_.begin()->first <= now_) {
    const std::size_t idx = pending_.begin()->second;
    RequestRuntime& rt = *runtimes_[idx];
    const auto branch_tokens = generated_branch_tokens(rt);
    std::vector<std::int64_t> counts;
    for (const auto& [key, n] : branch_tokens) counts.push_back(n);
    const std::int64_t need = kv_.activation_blocks(rt.script().prompt_tokens, rt.serial_tokens_emitted(), counts);
    if (need > kv_.free_blocks()) break;  // first-come first-served: wait for memory
    if (cfg_.kv_admission == KvAdmission::kReserve &&
        reserved_ + trackers_[idx].footprint > kv_.capacity()) {
      break;
    }
    pending_.erase(pending_.begin());
    activate(idx);
  }
}

std::size_t Simulation::pick_victim() const {
  std::vector<VictimCandidate> candidates;
  candidates.reserve(active_.size());
  for (std::size_t idx : active_) candidates.push_back({runtimes_[idx]->id(), deadline_of(*runtimes_[idx], cfg_)});
  const auto best = std::max_element(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
    if (a.deadline != b.deadline) return a.deadline < b.deadline;
    return a.request_id < b.request_id;
  });
  return active_[static_cast<std::size_t>(best - candidates.begin())];
}

void Simulation::preempt(std::size_t idx) {
  RequestRuntime& rt = *runtimes_[idx];
  kv_.release(rt.id());
  reserved_ -= trackers_[idx].footprint;
  rt.set_state(RequestState::kWaiting);
  std::erase(active_, idx);
  const auto resume_tokens = rt.script().prompt_tokens + rt.tokens_emitted();
  trackers_[idx].ready_time = now_ + cfg_.prefill_ms_per_token * static_cast<double>(resume_tokens);
  pending_.insert({trackers_[idx].ready_time, idx});
  ++log_.requests[idx].preemptions;
  ++log_.counters.preemptions;
}

Allocation Simulation::plan(const ProtectedBatch& batch, const Predictor& predictor) {
  if (!taper()) return plan_fixed(batch, setup_.policy);
  const auto& pol = setup_.policy;
  switch (setup_.ablation) {
    case Ablation::kNone:
    case Ablation::kConstantPredictor:
      return plan_taper(batch, predictor, pol.rho, pol.utility, now_);
    case Ablation::kNoSlackBudget:
      return greedy_widen(batch, predictor, pol.utility, std::numeric_limits<Millis>::infinity());
    case Ablation::kNoReplanning: {
      const SlackBudget sb = compute_slack_budget(batch, predictor, pol.rho, now_);
      std::vector<int> start(batch.slots.size(), 0);
      std::unique_ptr<bool[]> eligible(new bool[batch.slots.size()]);
      std::vector<std::size_t> slot_to_idx(batch.slots.size());
      for (std::size_t i = 0; i < batch.slots.size(); ++i) {
        const std::size_t idx = active_[i];
        slot_to_idx[i] = idx;
        eligible[i] = true;
        const Tracker& tr = trackers_[idx];
        if (runtimes_[idx]->in_branch_phase() && tr.frozen_stage == runtimes_[idx]->stage_index()) {
          start[i] = std::min(tr.frozen_grant, batch.slots[i].ready_opportunistic());
          eligible[i] = false;
        }
      }
      Allocation alloc = greedy_widen(batch, predictor, pol.utility, sb.budget, start,
                                      std::span<const bool>(eligible.get(), batch.slots.size()));
      alloc.budget = sb;
      for (std::size_t i = 0; i < batch.slots.size(); ++i) {
        const std::size_t idx = slot_to_idx[i];
        if (eligible[i] && runtimes_[idx]->in_branch_phase()) {
          trackers_[idx].frozen_stage = runtimes_[idx]->stage_index();
          trackers_[idx].frozen_grant = alloc.granted[i];
        }
      }
      return alloc;
    }
  }
  throw std::logic_error("unhandled ablation");
}

void Simulation::trim_to_memory(const ProtectedBatch& batch, Allocation& alloc) {
  std::int64_t free = kv_.free_blocks();
  for (std::size_t i = 0; i < batch.slots.size(); ++i) {
    const auto& slot = batch.slots[i];
    free -= kv_.blocks_needed_for_token(slot.id, runtimes_[active_[i]]->stage_index(), slot.protected_slot);
  }
  bool trimmed = false;
  for (std::size_t i = 0; i < batch.slots.size(); ++i) {
    const auto& slot = batch.slots[i];
    const int stage = runtimes_[active_[i]]->stage_index();
    for (int k = 0; k < alloc.granted[i]; ++k) {
      const std::int64_t need = kv_.blocks_needed_for_token(slot.id, stage, slot.opportunistic_slots[static_cast<std::size_t>(k)]);
      if (need > free) {
        log_.counters.memory_trimmed_grants += alloc.granted[i] - k;
        alloc.granted[i] = k;
        trimmed = true;
        break;
      }
      free -= need;
    }
  }
  if (trimmed) alloc.composition = widen(batch, alloc.granted);
}

void Simulation::finish(std::size_t idx) {
  RequestRuntime& rt = *runtimes_[idx];
  kv_.release(rt.id());
  reserved_ -= trackers_[idx].footprint;
  RequestRecord& rec = log_.requests[idx];
  rec.finished = true;
  rec.completion = now_;
  rec.total_tokens = rt.tokens_emitted();
  Millis max_tpot = 0.0;
  for (const auto& s : rec.serial_latencies) max_tpot = std::max(max_tpot, s.latency);
  for (const auto& p : rec.phases) max_tpot = std::max(max_tpot, (p.close - p.open) / static_cast<double>(p.tokens));
  rec.max_tpot = max_tpot;
  rec.met_slo = max_tpot <= cfg_.slo_tpot;
  auto canonical = rt.canonical_output();
  rec.output_digest = digest(canonical);
  if (cfg_.keep_outputs) rec.canonical_output = std::move(canonical);
  std::erase(active_, idx);
  runtimes_[idx].reset();
  ++done_;
}

void Simulation::execute_step(const ProtectedBatch& batch, const Allocation& alloc, const Predictor& predictor) {
  StepRecord rec;
  rec.step_index = step_;
  rec.start = now_;
  rec.composition = alloc.composition;
  rec.active_requests = static_cast<int>(batch.slots.size());
  rec.granted = alloc.total_granted();
  rec.ready = total_ready_opportunistic(batch);
  rec.predicted = predictor(alloc.composition);
  if (alloc.budget) rec.budget = alloc.budget->budget;

  const Millis realized = realize_latency(gt_, alloc.composition, static_cast<std::uint64_t>(step_));
  if (!(realized > 0.0)) throw std::logic_error("non-positive step latency");
  now_ += realized;
  rec.realized = realized;
  rec.end = now_;

  // Ready branches left out of this step; the ledger must not touch them.
  std::vector<std::tuple<RequestId, int, int>> deferred;
  kv_.clear_mutations();

  const std::vector<std::size_t> stepping = active_;
  for (std::size_t i = 0; i < batch.slots.size(); ++i) {
    const auto& slot = batch.slots[i];
    const std::size_t idx = stepping[i];
    RequestRuntime& rt = *runtimes_[idx];
    Tracker& tr = trackers_[idx];
    RequestRecord& rr = log_.requests[idx];
    const int stage = rt.stage_index();
    const int granted = alloc.granted[i];
    for (int k = granted; k < slot.ready_opportunistic(); ++k) {
      deferred.emplace_back(slot.id, stage, slot.opportunistic_slots[static_cast<std::size_t>(k)]);
    }
    log_.counters.deferrals += slot.ready_opportunistic() - granted;

    std::vector<int> admitted{slot.protected_slot};
    admitted.insert(admitted.end(), slot.opportunistic_slots.begin(), slot.opportunistic_slots.begin() + granted);
    for (int s : admitted) kv_.charge_token(slot.id, stage, s == kSerialSlot ? KvLedger::kSerialStream : s);

    Delivery d{slot.id, 0, 0};
    if (slot.protected_slot == kSerialSlot) {
      d.serial_tokens = 1;
      rr.serial_latencies.push_back({now_, now_ - tr.last_delivery});
    } else {
      d.parallel_tokens = static_cast<int>(admitted.size());
    }
    if (cfg_.keep_steps) rec.deliveries.push_back(d);

    const auto events = rt.advance(admitted, now_);
    tr.last_delivery = now_;
    for (const auto& ev : events) {
      if (ev.kind == LifecycleEvent::Kind::kPhaseComplete) {
        const auto& p = std::get<ParallelStage>(rt.script().stages[static_cast<std::size_t>(ev.stage_index)]);
        rr.phases.push_back({ev.stage_index, tr.phase_open, now_, p.branch_tokens()});
        tr.open_phase_stage = -1;
      }
    }
    if (rt.state() == RequestState::kFinished) {
      finish(idx);
    } else if (rt.in_branch_phase() && tr.open_phase_stage != rt.stage_index()) {
      tr.open_phase_stage = rt.stage_index();
      tr.phase_open = now_;
    }
  }

  for (const auto& m : kv_.mutations()) {
    ++log_.counters.kv_mutations;
    if (m.stream < 0) continue;
    if (std::find(deferred.begin(), deferred.end(), std::make_tuple(m.request_id, m.stage_index, m.stream)) !=
        deferred.end()) {
      ++log_.counters.deferral_kv_mutations;
    }
  }

  window_.push({alloc.composition, realized});
  if (refresh_.due(now_) && setup_.ablation != Ablation::kConstantPredictor) {
    const RefreshResult r = refresh_model(model_, window_);
    if (r.degenerate) {
      ++log_.counters.degenerate_refreshes;
    } else {
      model_ = r.model;
      ++log_.counters.refreshes;
    }
    for (const auto& w : r.warnings) log_.warnings.push_back(w);
  }
  if (cfg_.keep_steps) log_.steps.push_back(std::move(rec));
  ++log_.counters.steps;
  ++step_;
}

MetricsLog Simulation::run() {
  log_.policy = setup_.name();
  log_.slo_tpot = cfg_.slo_tpot;
  log_.trace_span = trace_span(trace_);
  const std::size_t n = trace_.scripts.size();
  runtimes_.resize(n);
  trackers_.resize(n);
  log_.requests.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const RequestScript& s = trace_.scripts[i];
    RequestRecord& rec = log_.requests[i];
    rec.request_id = s.request_id;
    rec.arrival = s.arrival_time;
    rec.decomposable = s.decomposable();
    trackers_[i].footprint = full_footprint(kv_, s);
    if (trackers_[i].footprint > kv_.capacity()) {
      log_.unschedulable.push_back(s.request_id);
      log_.warnings.push_back("request " + std::to_string(s.request_id) + " needs more KV blocks than the capacity");
      ++done_;
      continue;
    }
    runtimes_[i].emplace(s);
    trackers_[i].ready_time = s.arrival_time + cfg_.prefill_ms_per_token * static_cast<double>(s.prompt_tokens);
    pending_.insert({trackers_[i].ready_time, i});
  }

  while (done_ < n) {
    activate_ready();
    if (active_.empty()) {
      if (pending_.empty()) throw std::logic_error("requests neither active nor pending");
      now_ = std::max(now_, pending_.begin()->first);
      continue;
    }
    // Opening a phase at activation (no header) starts its clock then.
    for (std::size_t idx : active_) {
      Tracker& tr = trackers_[idx];
      const RequestRuntime& rt = *runtimes_[idx];
      if (rt.in_branch_phase() && tr.open_phase_stage != rt.stage_index()) {
        tr.open_phase_stage = rt.stage_index();
        tr.phase_open = tr.last_delivery;
      }
    }

    // Protected progress must fit in memory; evict the slack-richest request otherwise.
    for (;;) {
      std::int64_t need = 0;
      for (std::size_t idx : active_) {
        const RequestRuntime& rt = *runtimes_[idx];
        const int p = rt.protected_slot();
        need += kv_.blocks_needed_for_token(rt.id(), rt.stage_index(), p == kSerialSlot ? KvLedger::kSerialStream : p);
      }
      if (need <= kv_.free_blocks() || active_.size() <= 1) break;
      preempt(pick_victim());
    }

    std::vector<const RequestRuntime*> ptrs;
    ptrs.reserve(active_.size());
    for (std::size_t idx : active_) ptrs.push_back(&*runtimes_[idx]);
    const ProtectedBatch batch = build_protected_composition(ptrs, cfg_.slo_tpot);
    const Predictor predictor = planning_predictor();

    const auto t_begin = std::chrono::steady_clock::now();
    Allocation alloc = plan(batch, predictor);
    const auto t_end = std::chrono::steady_clock::now();
    if (taper()) {
      auto& c = log_.counters;
      ++c.planner_calls;
      c.planner_evals += alloc.stats.predictor_evals;
      if (alloc.stats.predictor_evals > alloc.stats.eval_bound()) ++c.eval_bound_violations;
      c.planner_wall_us.push_back(std::chrono::duration<double, std::micro>(t_end - t_begin).count());
    }
    trim_to_memory(batch, alloc);
    const bool budget_bound = taper() && (setup_.ablation == Ablation::kNone ||
                                          setup_.ablation == Ablation::kConstantPredictor);
    if (budget_bound) {
      ++log_.counters.budget_checks;
      if (predictor(alloc.composition) > alloc.budget->budget) ++log_.counters.budget_violations;
    }
    execute_step(batch, alloc, predictor);
  }
  return std::move(log_);
}

}  // namespace

MetricsLog run_simulation(const Trace& trace, const RunSetup& setup, const GroundTruthModel& gt,
                          const LinearLatencyModel& predictor, const EngineConfig& cfg) {
  Simulation sim(trace, setup, gt, predictor, cfg);
  return sim.run();
}

}  // namespace taper
