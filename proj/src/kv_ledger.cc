// Copyright 2026 The taper-sim Authors
// SPDX-License-Identifier: Apache-2.0

#include "taper/kv_ledger.h"

#include <algorithm>

namespace taper {

KvLedger::KvLedger(std::int64_t capacity_blocks, std::int64_t block_size)
    : capacity_(capacity_blocks), block_size_(block_size), free_(capacity_blocks) {
  if (capacity_blocks <= 0) throw std::invalid_argument("KV capacity must be positive");
  if (block_size <= 0) throw std::invalid_argument("KV block size must be >= 1");
}

std::int64_t KvLedger::blocks_of(RequestId id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) return 0;
  std::int64_t total = it->second.prefix_blocks + it->second.serial.blocks;
  for (const auto& [key, s] : it->second.branches) total += s.blocks;
  return total;
}

std::int64_t KvLedger::branch_blocks(RequestId id, int stage_index, int branch) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) return 0;
  const Stream* s = find_stream(it->second, stage_index, branch);
  return s ? s->blocks : 0;
}

std::int64_t KvLedger::activation_blocks(std::int64_t prompt_tokens, std::int64_t serial_tokens,
                                         std::span<const std::int64_t> branch_tokens) const {
  std::int64_t total = blocks_for(prompt_tokens) + blocks_for(serial_tokens);
  for (auto t : branch_tokens) total += blocks_for(t);
  return total;
}

void KvLedger::record(RequestId id, int stage, int stream, std::int64_t delta) {
  mutations_.push_back({id, stage, stream, delta});
  ++total_mutations_;
}

void KvLedger::activate(RequestId id, std::int64_t prompt_tokens, std::int64_t serial_tokens,
                        const std::map<std::pair<int, int>, std::int64_t>& branch_tokens) {
  if (holds(id)) throw KvError("request already holds KV blocks");
  Entry e;
  e.prefix_blocks = blocks_for(prompt_tokens);
  e.serial = {serial_tokens, blocks_for(serial_tokens)};
  std::int64_t need = e.prefix_blocks + e.serial.blocks;
  for (const auto& [key, tokens] : branch_tokens) {
    e.branches[key] = {tokens, blocks_for(tokens)};
    need += blocks_for(tokens);
  }
  if (need > free_) throw KvError("insufficient free blocks for activation");
  free_ -= need;
  entries_.emplace(id, std::move(e));
  record(id, 0, kWholeRequest, need);
}

KvLedger::Stream& KvLedger::stream_of(Entry& e, int stage_index, int stream) {
  if (stream == kSerialStream) return e.serial;
  return e.branches[{stage_index, stream}];
}

const KvLedger::Stream* KvLedger::find_stream(const Entry& e, int stage_index, int stream) const {
  if (stream == kSerialStream) return &e.serial;
  auto it = e.branches.find({stage_index, stream});
  return it == e.branches.end() ? nullptr : &it->second;
}

std::int64_t KvLedger::blocks_needed_for_token(RequestId id, int stage_index, int stream) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw KvError("token charged to a request without KV state");
  const Stream* s = find_stream(it->second, stage_index, stream);
  const std::int64_t tokens = s ? s->tokens : 0;
  return tokens % block_size_ == 0 ? 1 : 0;
}

void KvLedger::charge_token(RequestId id, int stage_index, int stream) {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw KvError("token charged to a request without KV state");
  Stream& s = stream_of(it->second, stage_index, stream);
  if (s.tokens % block_size_ == 0) {
    if (free_ < 1) throw KvError("negative free block count");
    --free_;
    ++s.blocks;
    record(id, stage_index, stream, 1);
  }
  ++s.tokens;
}

void KvLedger::release(RequestId id) {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw KvError("double free of request KV blocks");
  const std::int64_t blocks = blocks_of(id);
  free_ += blocks;
  entries_.erase(it);
  record(id, 0, kWholeRequest, -blocks);
  if (free_ > capacity_) throw KvError("free block count exceeds capacity");
}

std::optional<RequestId> kv_account(KvLedger& ledger, const KvEvent& event,
                                    std::span<const VictimCandidate> candidates) {
  auto pick_victim = [&]() -> std::optional<RequestId> {
    if (candidates.empty()) throw KvError("KV exhausted with no preemptible request");
    const auto it = std::max_element(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
      if (a.deadline != b.deadline) return a.deadline < b.deadline;
      return a.request_id < b.request_id;
    });
    return it->request_id;
  };
  if (const auto* a = std::get_if<KvActivate>(&event)) {
    if (ledger.blocks_for(a->prompt_tokens) > ledger.free_blocks()) return pick_victim();
    ledger.activate(a->request_id, a->prompt_tokens, 0, {});
    return std::nullopt;
  }
  if (const auto* t = std::get_if<KvToken>(&event)) {
    if (ledger.blocks_needed_for_token(t->request_id, t->stage_index, t->stream) > ledger.free_blocks()) {
      return pick_victim();
    }
    ledger.charge_token(t->request_id, t->stage_index, t->stream);
    return std::nullopt;
  }
  ledger.release(std::get<KvFinish>(event).request_id);
  return std::nullopt;
}

}  // namespace taper
