// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#include "taper/generation.h"

#include <algorithm>
#include <limits>

namespace taper {

namespace {

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  std::uint64_t z = h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

RequestRuntime::RequestRuntime(const RequestScript& script) : script_(&script) {
  serial_hash_ = mix(mix(0x7461706572ULL, static_cast<std::uint64_t>(script.request_id)),
                     static_cast<std::uint64_t>(script.prompt_tokens));
  std::vector<LifecycleEvent> ignored;
  enter_stage(ignored);
}

const ParallelStage* RequestRuntime::current_parallel_stage() const {
  if (stage_index_ >= static_cast<int>(script_->stages.size())) return nullptr;
  return std::get_if<ParallelStage>(&script_->stages[static_cast<std::size_t>(stage_index_)]);
}

void RequestRuntime::enter_stage(std::vector<LifecycleEvent>& events) {
  serial_cursor_ = 0;
  stage_serial_ordinal_ = 0;
  branch_cursors_.clear();
  branch_hashes_.clear();
  if (stage_index_ >= static_cast<int>(script_->stages.size())) {
    part_ = Part::kDone;
    state_ = RequestState::kFinished;
    events.push_back({LifecycleEvent::Kind::kRequestFinished, stage_index_ - 1, kSerialSlot});
    return;
  }
  if (const auto* p = current_parallel_stage()) {
    if (p->header_tokens > 0) {
      part_ = Part::kHeader;
    } else {
      open_branches();
    }
  } else {
    part_ = Part::kSerial;
  }
}

void RequestRuntime::open_branches() {
  const auto* p = current_parallel_stage();
  part_ = Part::kBranches;
  tokens_before_phase_ = tokens_emitted_;
  phase_hash_ = serial_hash_;
  branch_cursors_.assign(p->branch_lengths.size(), 0);
  branch_hashes_.resize(p->branch_lengths.size());
  for (std::size_t i = 0; i < branch_hashes_.size(); ++i) branch_hashes_[i] = mix(phase_hash_, i + 1);
}

void RequestRuntime::finish_part(std::vector<LifecycleEvent>& events) {
  const auto* p = current_parallel_stage();
  switch (part_) {
    case Part::kHeader:
      serial_cursor_ = 0;
      open_branches();
      return;
    case Part::kBranches:
      events.push_back({LifecycleEvent::Kind::kPhaseComplete, stage_index_, kSerialSlot});
      // Reduce observes the completed branches in canonical order.
      for (auto h : branch_hashes_) serial_hash_ = mix(serial_hash_, h);
      if (p->reduce_tokens > 0) {
        part_ = Part::kReduce;
        serial_cursor_ = 0;
        return;
      }
      break;
    case Part::kSerial:
    case Part::kReduce:
      break;
    case Part::kDone:
      return;
  }
  events.push_back({LifecycleEvent::Kind::kStageComplete, stage_index_, kSerialSlot});
  ++stage_index_;
  enter_stage(events);
}

std::vector<int> RequestRuntime::ready_branches() const {
  std::vector<int> ready;
  if (part_ != Part::kBranches) return ready;
  const auto* p = current_parallel_stage();
  for (std::size_t i = 0; i < branch_cursors_.size(); ++i) {
    if (branch_cursors_[i] < p->branch_lengths[i]) ready.push_back(static_cast<int>(i));
  }
  return ready;
}

int RequestRuntime::ready_branch_count() const {
  if (part_ != Part::kBranches) return 0;
  const auto* p = current_parallel_stage();
  int n = 0;
  for (std::size_t i = 0; i < branch_cursors_.size(); ++i) n += branch_cursors_[i] < p->branch_lengths[i];
  return n;
}

int RequestRuntime::protected_slot() const {
  if (part_ == Part::kDone) throw ScheduleError("request already finished");
  if (part_ != Part::kBranches) return kSerialSlot;
  const auto* p = current_parallel_stage();
  for (std::size_t i = 0; i < branch_cursors_.size(); ++i) {
    if (branch_cursors_[i] < p->branch_lengths[i]) return static_cast<int>(i);
  }
  throw ScheduleError("phase at barrier with no incomplete branch");
}

VisibilityContext RequestRuntime::visibility(int slot) const {
  VisibilityContext ctx;
  if (slot == kSerialSlot || part_ != Part::kBranches) {
    ctx.prefix_len = script_->prompt_tokens + tokens_emitted_;
    return ctx;
  }
  const auto* p = current_parallel_stage();
  ctx.prefix_len = script_->prompt_tokens + tokens_before_phase_ - p->header_tokens;
  ctx.phase_header_len = p->header_tokens;
  ctx.branch_header_len = 0;  // folded into the branch length
  ctx.own_prior_tokens = branch_cursors_.at(static_cast<std::size_t>(slot));
  return ctx;
}

void RequestRuntime::emit_serial(Millis now) {
  const std::uint64_t value = mix(serial_hash_, 0x5e71a1ULL);
  serial_hash_ = mix(serial_hash_, value);
  output_log_.push_back({stage_index_, kSerialSlot, stage_serial_ordinal_, now, value});
  ++stage_serial_ordinal_;
  ++serial_cursor_;
  ++tokens_emitted_;
  ++serial_tokens_emitted_;
}

void RequestRuntime::emit_branch(int branch, Millis now) {
  auto& h = branch_hashes_[static_cast<std::size_t>(branch)];
  const std::uint64_t value = mix(h, 0xb2a4c8ULL);
  h = mix(h, value);
  auto& cursor = branch_cursors_[static_cast<std::size_t>(branch)];
  output_log_.push_back({stage_index_, branch, cursor, now, value});
  ++cursor;
  ++tokens_emitted_;
}

std::vector<LifecycleEvent> RequestRuntime::advance(std::span<const int> admitted, Millis now) {
  std::vector<LifecycleEvent> events;
  if (part_ == Part::kDone) throw ScheduleError("advancing a finished request");
  if (admitted.empty()) return events;

  std::vector<int> slots(admitted.begin(), admitted.end());
  std::sort(slots.begin(), slots.end());
  if (std::adjacent_find(slots.begin(), slots.end()) != slots.end()) {
    throw ScheduleError("slot admitted twice in one step");
  }

  if (part_ != Part::kBranches) {
    if (slots.size() != 1 || slots[0] != kSerialSlot) {
      throw ScheduleError("branch admitted outside an open parallel phase");
    }
    emit_serial(now);
    const std::int64_t segment_len = [&] {
      const auto* p = current_parallel_stage();
      if (part_ == Part::kHeader) return p->header_tokens;
      if (part_ == Part::kReduce) return p->reduce_tokens;
      return std::get<SerialStage>(script_->stages[static_cast<std::size_t>(stage_index_)]).token_count;
    }();
    if (serial_cursor_ == segment_len) finish_part(events);
  } else {
    if (slots.front() == kSerialSlot) {
      throw ScheduleError("barrier violated: serial or reduce token before all branches complete");
    }
    const auto* p = current_parallel_stage();
    for (int b : slots) {
      if (b < 0 || b >= p->fanout()) throw ScheduleError("branch index out of range");
      if (branch_cursors_[static_cast<std::size_t>(b)] >= p->branch_lengths[static_cast<std::size_t>(b)]) {
        throw ScheduleError("advancing a finished branch");
      }
    }
    for (int b : slots) {
      emit_branch(b, now);
      if (branch_cursors_[static_cast<std::size_t>(b)] == p->branch_lengths[static_cast<std::size_t>(b)]) {
        events.push_back({LifecycleEvent::Kind::kBranchComplete, stage_index_, b});
      }
    }
    if (ready_branch_count() == 0) finish_part(events);
  }
  last_progress_time_ = now;
  return events;
}

std::vector<OutputToken> RequestRuntime::canonical_output() const {
  std::vector<OutputToken> out = output_log_;
  auto rank = [this](const OutputToken& t) -> std::int64_t {
    if (t.branch != kSerialSlot) return 1 + t.branch;
    const auto* p = std::get_if<ParallelStage>(&script_->stages[static_cast<std::size_t>(t.stage_index)]);
    if (p == nullptr || t.ordinal < p->header_tokens) return 0;
    return std::numeric_limits<std::int64_t>::max();
  };
  std::stable_sort(out.begin(), out.end(), [&](const OutputToken& a, const OutputToken& b) {
    if (a.stage_index != b.stage_index) return a.stage_index < b.stage_index;
    const auto ra = rank(a);
    const auto rb = rank(b);
    if (ra != rb) return ra < rb;
    return a.ordinal < b.ordinal;
  });
  for (auto& t : out) t.time = 0.0;
  return out;
}

std::vector<OutputToken> run_schedule(const RequestScript& script, const Schedule& schedule) {
  validate_script(script);
  RequestRuntime rt(script);
  rt.set_state(RequestState::kActive);
  Millis t = 0.0;
  for (const auto& step : schedule) {
    if (rt.state() == RequestState::kFinished) throw ScheduleError("schedule continues after the request finished");
    t += 1.0;
    rt.advance(step, t);
  }
  if (rt.state() != RequestState::kFinished) throw ScheduleError("schedule ends before the request finishes");
  return rt.canonical_output();
}

Schedule sequential_schedule(const RequestScript& script) {
  Schedule schedule;
  for (const auto& stage : script.stages) {
    if (const auto* s = std::get_if<SerialStage>(&stage)) {
      schedule.insert(schedule.end(), static_cast<std::size_t>(s->token_count), StepAdmission{kSerialSlot});
      continue;
    }
    const auto& p = std::get<ParallelStage>(stage);
    schedule.insert(schedule.end(), static_cast<std::size_t>(p.header_tokens), StepAdmission{kSerialSlot});
    for (int b = 0; b < p.fanout(); ++b) {
      schedule.insert(schedule.end(), static_cast<std::size_t>(p.branch_lengths[static_cast<std::size_t>(b)]),
                      StepAdmission{b});
    }
    schedule.insert(schedule.end(), static_cast<std::size_t>(p.reduce_tokens), StepAdmission{kSerialSlot});
  }
  return schedule;
}

bool check_schedule_invariance(const RequestScript& script, const Schedule& schedule_a,
                               const Schedule& schedule_b) {
  return run_schedule(script, schedule_a) == run_schedule(script, schedule_b);
}

}  // namespace taper
