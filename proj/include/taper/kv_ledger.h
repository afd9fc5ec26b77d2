// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include "taper/workload.h"

namespace taper {

class KvError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Paged KV block accounting. A request owns one set of prefix blocks shared
// by all of its branches; every branch (and the serial stream) owns only the
// blocks holding its own generated tokens.
class KvLedger {
 public:
  static constexpr int kSerialStream = -1;
  static constexpr int kWholeRequest = -2;

  struct Mutation {
    RequestId request_id;
    int stage_index;
    int stream;  // branch index, kSerialStream or kWholeRequest
    std::int64_t block_delta;
  };

  KvLedger(std::int64_t capacity_blocks, std::int64_t block_size);

  std::int64_t capacity() const { return capacity_; }
  std::int64_t block_size() const { return block_size_; }
  std::int64_t free_blocks() const { return free_; }
  std::int64_t allocated_blocks() const { return capacity_ - free_; }
  std::int64_t blocks_for(std::int64_t tokens) const { return (tokens + block_size_ - 1) / block_size_; }

  bool holds(RequestId id) const { return entries_.count(id) != 0; }
  std::int64_t blocks_of(RequestId id) const;
  std::int64_t branch_blocks(RequestId id, int stage_index, int branch) const;

  // Blocks needed to (re)activate a request with the given progress.
  std::int64_t activation_blocks(std::int64_t prompt_tokens, std::int64_t serial_tokens,
                                 std::span<const std::int64_t> branch_tokens) const;
  // Charges prompt prefix blocks plus any already generated tokens
  // (branch_tokens are (stage, branch) -> count for resumed requests).
  void activate(RequestId id, std::int64_t prompt_tokens, std::int64_t serial_tokens,
                const std::map<std::pair<int, int>, std::int64_t>& branch_tokens);

  // 1 if the next token of this stream starts a new block, else 0.
  std::int64_t blocks_needed_for_token(RequestId id, int stage_index, int stream) const;
  void charge_token(RequestId id, int stage_index, int stream);
  void release(RequestId id);

  const std::vector<Mutation>& mutations() const { return mutations_; }
  void clear_mutations() { mutations_.clear(); }
  std::int64_t total_mutations() const { return total_mutations_; }

 private:
  struct Stream {
    std::int64_t tokens = 0;
    std::int64_t blocks = 0;
  };
  struct Entry {
    std::int64_t prefix_blocks = 0;
    Stream serial;
    std::map<std::pair<int, int>, Stream> branches;
  };

  void record(RequestId id, int stage, int stream, std::int64_t delta);
  Stream& stream_of(Entry& e, int stage_index, int stream);
  const Stream* find_stream(const Entry& e, int stage_index, int stream) const;

  std::int64_t capacity_;
  std::int64_t block_size_;
  std::int64_t free_;
  std::map<RequestId, Entry> entries_;
  std::vector<Mutation> mutations_;
  std::int64_t total_mutations_ = 0;
};

struct KvActivate {
  RequestId request_id;
  std::int64_t prompt_tokens;
};
struct KvToken {
  RequestId request_id;
  int stage_index;
  int stream;
};
struct KvFinish {
  RequestId request_id;
};
using KvEvent = std::variant<KvActivate, KvToken, KvFinish>;

struct VictimCandidate {
  RequestId request_id;
  Millis deadline;
};

// Applies the event, or leaves the ledger untouched and names the request to
// preempt (latest deadline, highest id on ties) when blocks are exhausted.
std::optional<RequestId> kv_account(KvLedger& ledger, const KvEvent& event,
                                    std::span<const VictimCandidate> candidates);

}  // namespace taper
