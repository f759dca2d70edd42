#pragma once

// Seal descriptor ring. Each slot is 32 bytes:
//
//   0  u64 start address
//   8  u64 length in bytes
//   16 u8  state (0 empty, 1 sealed, 2 completed, 3 released)
//   17 u8[7] padding
//   24 u64 epoch, bumped every time the slot is reused
//
// The sender's application maps the ring read-only; only its runtime writes
// descriptors (through a privileged alias). The receiver maps it read-write
// and may only move a descriptor from sealed to completed.

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "rpcool/address_space.hpp"
#include "rpcool/heap.hpp"

namespace rpcool {

enum class SealState : uint8_t { empty = 0, sealed = 1, completed = 2, released = 3 };

struct SealDescriptor {
  uint64_t start;
  uint64_t len;
  uint8_t state;
  uint8_t pad[7];
  uint64_t epoch;
};
static_assert(sizeof(SealDescriptor) == 32);

enum class SealRole { sender, receiver };

struct SealTicket {
  uint32_t index = 0;
  uint64_t epoch = 0;
  AddrRange range;
};

inline constexpr uint32_t kNoSeal = 0xFFFFFFFFu;

class SealRing {
 public:
  /// Ring stored in the pages at `ring` inside mapped heap `heap_id`.
  /// The sender's view of those pages becomes read-only.
  static std::unique_ptr<SealRing> in_heap(SealRole role, uint64_t heap_id, void* ring, uint32_t capacity);
  /// Ring in private memory (fallback transport: each side keeps a copy).
  /// `heap_id` names the heap whose pages get sealed.
  static std::unique_ptr<SealRing> local(SealRole role, uint64_t heap_id, uint32_t capacity);
  /// Bytes needed for `capacity` descriptors, rounded to whole pages.
  static uint64_t bytes_for(uint32_t capacity, uint64_t page_size);

  ~SealRing();
  SealRing(const SealRing&) = delete;
  SealRing& operator=(const SealRing&) = delete;

  SealRole role() const { return role_; }
  uint32_t capacity() const { return capacity_; }
  /// Read-only (sender) or read-write (receiver) view of the slots.
  const SealDescriptor* slots() const { return view_; }

  // Sender side.
  SealTicket seal(AddrRange range);
  /// Seals a scope's pages and marks the scope sealed in its heap.
  SealTicket seal(Scope& scope);
  void release(uint32_t index);
  /// Releases every listed completed seal with one permission sweep over the
  /// union of their pages. Returns the indices released; others are skipped.
  std::vector<uint32_t> release_batch(const std::vector<uint32_t>& indices);
  size_t active() const;

  // Receiver side.
  bool is_sealed(uint32_t index, uint64_t epoch, AddrRange expected) const;
  void mark_complete(uint32_t index, uint64_t epoch);

  /// Mirrors a descriptor written by the peer's runtime (fallback transport).
  void apply_remote(uint32_t index, const SealDescriptor& d);
  SealDescriptor read(uint32_t index) const;

 private:
  SealRing(SealRole role, uint64_t heap_id, uint32_t capacity);
  void check_index(uint32_t index) const;
  void write_state(uint32_t index, SealState s);
  void finish_release(uint32_t index);

  SealRole role_;
  uint64_t heap_id_;
  uint32_t capacity_;
  SealDescriptor* view_ = nullptr;  // what the role reads through
  SealDescriptor* rw_ = nullptr;    // privileged writable view
  void* owned_ro_ = nullptr;        // mappings this object created
  void* owned_rw_ = nullptr;
  uint64_t bytes_ = 0;
  AddrRange heap_pages_;            // ring pages inside the heap, if any

  mutable std::mutex mu_;
  uint32_t cursor_ = 0;
  std::map<uintptr_t, std::pair<uintptr_t, uint32_t>> active_;  // start -> (end, index)
  std::map<uint32_t, Scope> sealed_scopes_;
};

/// Pre-created scopes of one size whose seals are released in batches.
class ScopePool {
 public:
  ScopePool(Heap heap, SealRing& ring, size_t scope_bytes, size_t count, uint32_t threshold = 1024);
  ~ScopePool();

  /// A scope ready for argument construction; flushes when none is free.
  Scope acquire();
  SealTicket seal(Scope& s);
  /// Queues a sealed scope for release; flushes automatically when the
  /// pending list reaches the threshold.
  void defer_release(const Scope& s, const SealTicket& t);
  /// Releases every completed pending seal in one permission sweep and
  /// returns the scopes to the pool. Returns the number released.
  size_t flush();

  size_t pending() const { return pending_.size(); }
  size_t free_count() const { return free_.size(); }
  uint32_t threshold() const { return threshold_; }

 private:
  struct Pending {
    Scope scope;
    SealTicket ticket;
  };
  Heap heap_;
  SealRing& ring_;
  uint32_t threshold_;
  std::vector<Scope> free_;
  std::vector<Pending> pending_;
  std::vector<Scope> all_;
};

}  // namespace rpcool
