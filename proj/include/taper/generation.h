// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "taper/workload.h"

namespace taper {

// Slot id for the single continuation of a serial stage, phase header or
// reduce segment. Branch slots are the branch indices 0..fanout-1.
inline constexpr int kSerialSlot = -1;

enum class RequestState { kWaiting, kPrefilling, kActive, kFinished };

struct OutputToken {
  int stage_index = 0;
  int branch = kSerialSlot;
  std::int64_t ordinal = 0;  // position within its (stage, branch) stream
  Millis time = 0.0;
  std::uint64_t value = 0;  // scripted token content, a function of the visible context only

  friend bool operator==(const OutputToken&, const OutputToken&) = default;
};

struct LifecycleEvent {
  enum class Kind { kBranchComplete, kPhaseComplete, kStageComplete, kRequestFinished };
  Kind kind;
  int stage_index = 0;
  int branch = kSerialSlot;

  friend bool operator==(const LifecycleEvent&, const LifecycleEvent&) = default;
};

// What a token may attend to. Sibling-branch tokens are never part of it.
struct VisibilityContext {
  std::int64_t prefix_len = 0;
  std::int64_t phase_header_len = 0;
  std::int64_t branch_header_len = 0;
  std::int64_t own_prior_tokens = 0;

  std::int64_t total() const { return prefix_len + phase_header_len + branch_header_len + own_prior_tokens; }
};

class ScheduleError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Live cursor state of one request. Holds a non-owning reference to its
// script, which must outlive the runtime.
class RequestRuntime {
 public:
  explicit RequestRuntime(const RequestScript& script);
  // The runtime refers to the script, which must outlive it.
  explicit RequestRuntime(RequestScript&&) = delete;

  const RequestScript& script() const { return *script_; }
  RequestId id() const { return script_->request_id; }

  RequestState state() const { return state_; }
  void set_state(RequestState state) { state_ = state; }

  int stage_index() const { return stage_index_; }
  // True while the branches of a parallel stage are open (barrier not reached).
  bool in_branch_phase() const { return part_ == Part::kBranches; }
  const ParallelStage* current_parallel_stage() const;

  // Branches with cursor < length while the phase is open; empty otherwise.
  std::vector<int> ready_branches() const;
  int ready_branch_count() const;
  // The protected pick: lowest incomplete branch in a phase, else the serial slot.
  int protected_slot() const;

  VisibilityContext visibility(int slot) const;
  // Attention context of the next token in `slot`, counting the token's own position.
  std::int64_t context_length(int slot) const { return visibility(slot).total() + 1; }

  // Emits one token for each admitted slot, ascending branch order.
  // Throws ScheduleError if the admission is not valid for the current state.
  std::vector<LifecycleEvent> advance(std::span<const int> admitted, Millis now);

  Millis last_progress_time() const { return last_progress_time_; }
  void set_last_progress_time(Millis t) { last_progress_time_ = t; }

  const std::vector<std::int64_t>& branch_cursors() const { return branch_cursors_; }
  std::int64_t serial_cursor() const { return serial_cursor_; }
  std::int64_t tokens_emitted() const { return tokens_emitted_; }
  // Tokens generated by serial segments (stages, headers, reduces) so far.
  std::int64_t serial_tokens_emitted() const { return serial_tokens_emitted_; }

  const std::vector<OutputToken>& output_log() const { return output_log_; }
  // Tokens grouped by stage: header, branches in index order, reduce; timestamps zeroed.
  std::vector<OutputToken> canonical_output() const;

 private:
  enum class Part { kSerial, kHeader, kBranches, kReduce, kDone };

  void enter_stage(std::vector<LifecycleEvent>& events);
  void finish_part(std::vector<LifecycleEvent>& events);
  void open_branches();
  void emit_serial(Millis now);
  void emit_branch(int branch, Millis now);

  const RequestScript* script_;
  RequestState state_ = RequestState::kWaiting;
  int stage_index_ = 0;
  Part part_ = Part::kSerial;
  std::int64_t serial_cursor_ = 0;
  std::int64_t stage_serial_ordinal_ = 0;
  std::vector<std::int64_t> branch_cursors_;
  std::int64_t tokens_before_phase_ = 0;
  std::int64_t tokens_emitted_ = 0;
  std::int64_t serial_tokens_emitted_ = 0;
  Millis last_progress_time_ = 0.0;

  std::uint64_t serial_hash_ = 0;
  std::uint64_t phase_hash_ = 0;
  std::vector<std::uint64_t> branch_hashes_;
  std::vector<OutputToken> output_log_;
};

using StepAdmission = std::vector<int>;
using Schedule = std::vector<StepAdmission>;

// Runs `schedule` to completion and returns the canonical output. Throws
// ScheduleError naming the violated validity clause.
std::vector<OutputToken> run_schedule(const RequestScript& script, const Schedule& schedule);

// All branches of each phase one after another, in index order.
Schedule sequential_schedule(const RequestScript& script);

bool check_schedule_invariance(const RequestScript& script, const Schedule& schedule_a,
                               const Schedule& schedule_b);

}  // namespace taper
