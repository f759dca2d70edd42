#pragma once

// Shared-memory request ring (bounded MPMC, safe across processes).
//
// Ring layout, offsets from the ring base:
//   0    char[8] magic "RPCRING1"
//   8    u32 capacity (power of two)
//   12   u32 slot size (64)
//   64   u64 enqueue position (own cache line)
//   128  u64 dequeue position (own cache line)
//   192  slots
//
// Slot layout (64 bytes):
//   0  u64 turn: equals the position when the slot is free for that
//         enqueue, position + 1 once the message is published
//   8  u64 sequence      16 u32 function id   20 u32 flags
//   24 u64 argument address
//   32 u64 scope start   40 u32 scope pages   44 u32 seal index
//   48 u64 seal epoch    56 u32 call slot     60 u32 reserved
//
// A producer claims a position with a CAS on the enqueue counter, fills the
// slot and publishes it by storing turn = position + 1 (release). A consumer
// claims with a CAS on the dequeue counter after observing that turn
// (acquire), copies the slot out and frees it with turn = position + capacity.
//
// Completions go to a call table of 32-byte entries owned by the caller:
//   0 u32 state (0 free, 1 pending, 2 running, 3 done)  4 u32 status
//   8 u64 return value   16 u64 sequence   24 u64 reserved

#include <cstddef>
#include <cstdint>
#include <mutex>
#include <optional>
#include <vector>

#include "rpcool/address_space.hpp"

namespace rpcool {

enum MessageFlags : uint32_t {
  kFlagSealed = 1u << 0,
  kFlagSandbox = 1u << 1,
};

struct RpcMessage {
  uint64_t sequence = 0;
  uint32_t function_id = 0;
  uint32_t flags = 0;
  uint64_t arg = 0;
  AddrRange scope;  // empty when the call has no argument scope
  uint32_t seal_index = 0xFFFFFFFFu;
  uint64_t seal_epoch = 0;
  uint32_t call_slot = 0;
};

class MessageRing {
 public:
  static constexpr uint32_t kSlotSize = 64;
  static constexpr uint32_t kHeaderSize = 192;

  static size_t bytes_for(uint32_t capacity) { return kHeaderSize + size_t{capacity} * kSlotSize; }
  /// Initializes a ring in `mem` (bytes_for(capacity) bytes).
  static MessageRing create(void* mem, uint32_t capacity);
  /// Attaches to an initialized ring; throws Errc::protocol_error otherwise.
  static MessageRing attach(void* mem);

  MessageRing() = default;
  bool try_push(const RpcMessage& m);
  /// Blocks (yielding) while the ring is full.
  void push(const RpcMessage& m);
  std::optional<RpcMessage> try_pop();
  uint32_t capacity() const { return capacity_; }
  size_t size_approx() const;
  void* base() const { return base_; }

 private:
  struct Slot;
  Slot* slot(uint64_t pos) const;
  uint8_t* base_ = nullptr;
  uint32_t capacity_ = 0;
};

enum class CallState : uint32_t { free = 0, pending = 1, running = 2, done = 3 };

struct CallEntry {
  uint32_t state;
  uint32_t status;
  uint64_t ret;
  uint64_t sequence;
  uint64_t reserved;
};
static_assert(sizeof(CallEntry) == 32);

/// Caller-side view of a call table; slots are handed out from a local pool.
class CallTable {
 public:
  CallTable() = default;
  CallTable(void* mem, uint32_t capacity, bool init);

  static size_t bytes_for(uint32_t capacity) { return size_t{capacity} * sizeof(CallEntry); }

  /// Blocks until a slot is free.
  uint32_t acquire(uint64_t sequence);
  void release(uint32_t slot);
  CallEntry& at(uint32_t slot) const { return entries_[slot]; }
  uint32_t capacity() const { return capacity_; }

  /// Publishes a completion (callee side).
  static void complete(CallEntry& e, uint32_t status, uint64_t ret);
  static bool is_done(const CallEntry& e);

 private:
  CallEntry* entries_ = nullptr;
  uint32_t capacity_ = 0;
  std::mutex mu_;
  std::vector<uint32_t> free_;
};

}  // namespace rpcool
