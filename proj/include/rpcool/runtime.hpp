#pragma once

// Trusted per-node runtime. It is the only layer that maps heaps into the
// process, keeps their leases alive, and changes page permissions on behalf
// of seals, sandboxes and the fallback transport.

#include <atomic>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

#include "rpcool/address_space.hpp"
#include "rpcool/config.hpp"
#include "rpcool/orch_client.hpp"

namespace rpcool {

class NodeRuntime;

/// Capability token for privileged runtime operations. Only the seal,
/// sandbox and fallback layers can construct one.
class Privileged {
  Privileged() = default;
  friend class NodeRuntime;
  friend class SealRing;
  friend class ScopePool;
  friend class SandboxManager;
  friend class FallbackSession;
  friend struct RuntimeTestAccess;
};

struct MappedHeap {
  HeapDescriptor desc;
  uint64_t lease_id = 0;
  bool mirror = false;  // private copy kept coherent by the fallback transport
  int fd = -1;
  uint64_t page_size = 4096;
  std::vector<Perm> perms;  // one entry per page
  std::atomic<int> active_seals{0};
  int refs = 0;

  uintptr_t base() const { return desc.base; }
  uint64_t size() const { return desc.size; }
  AddrRange range() const { return {desc.base, desc.size}; }
  uint64_t pages() const { return desc.size / page_size; }
  void* addr(uint64_t offset) const { return reinterpret_cast<void*>(desc.base + offset); }

 private:
  friend class NodeRuntime;
  void* alias_ = nullptr;
};

class NodeRuntime {
 public:
  using FailureFn = std::function<void(const FailureNotification&)>;

  explicit NodeRuntime(RuntimeConfig cfg);
  ~NodeRuntime();
  NodeRuntime(const NodeRuntime&) = delete;
  NodeRuntime& operator=(const NodeRuntime&) = delete;

  /// The live runtime of this process; throws Errc::unmapped if none.
  static NodeRuntime& current();
  static NodeRuntime* current_or_null();

  const RuntimeConfig& config() const { return cfg_; }
  const HolderId& self() const { return self_; }
  OrchestratorClient& orchestrator() { return *orch_; }

  /// Maps a heap the orchestrator already granted to this process.
  MappedHeap& map_granted(const HeapGrant& g);
  /// Leases an existing heap and maps it (or bumps the refcount if mapped).
  MappedHeap& map_heap(uint64_t heap_id);
  /// Allocates a fresh heap from the orchestrator and maps it.
  MappedHeap& allocate_heap(uint64_t size, uint64_t channel_id = 0);
  /// Maps a private, anonymous-file copy of `desc` at its fixed base. Used by
  /// the fallback transport on both ends; the caller passes the lease it
  /// obtained so quota and failure handling stay uniform (0: none).
  MappedHeap& map_mirror(const HeapDescriptor& desc, uint64_t lease_id);
  /// Drops one reference; the last one unmaps and releases the lease.
  /// Refused while seals rooted in the heap are outstanding.
  void unmap_heap(uint64_t heap_id);

  MappedHeap* find(uint64_t heap_id);
  MappedHeap* find_addr(uintptr_t addr);
  std::vector<uint64_t> mapped_heap_ids();

  /// Changes hardware permissions of whole pages and records them.
  void set_range_permission(Privileged, uint64_t heap_id, AddrRange pages, Perm mode);
  /// Same, over several ranges of one heap under a single lock acquisition.
  void set_ranges_permission(Privileged, uint64_t heap_id, const std::vector<AddrRange>& ranges, Perm mode);
  /// A read-write view of the whole heap at a kernel-chosen address.
  uint8_t* privileged_alias(Privileged, uint64_t heap_id);
  /// Serializes permission changes (portable sandboxes hold it while active).
  std::unique_lock<std::mutex> permission_lock(Privileged) { return std::unique_lock(perm_mu_); }
  std::vector<std::pair<AddrRange, Perm>> permission_runs(Privileged);
  /// Same, clipped to `within` (only the overlapping pages are scanned).
  std::vector<std::pair<AddrRange, Perm>> permission_runs(Privileged, AddrRange within);

  uint64_t add_failure_listener(FailureFn fn);
  void remove_failure_listener(uint64_t token);

  /// Renews every lease now (the background thread does this periodically).
  void renew_all();
  uint64_t lease_failures() const { return lease_failures_.load(); }

 private:
  MappedHeap& install(const HeapDescriptor& d, uint64_t lease_id, int fd, bool mirror);
  void renew_loop();
  void dispatch_failure(const FailureNotification& n);

  RuntimeConfig cfg_;
  HolderId self_;
  std::unique_ptr<OrchestratorClient> orch_;
  std::mutex mu_;       // heaps_
  std::mutex perm_mu_;  // hardware permission changes
  std::map<uint64_t, std::unique_ptr<MappedHeap>> heaps_;
  std::mutex listeners_mu_;
  std::map<uint64_t, FailureFn> listeners_;
  uint64_t next_listener_ = 1;
  std::atomic<bool> stopping_{false};
  std::mutex renew_mu_;
  std::condition_variable renew_cv_;
  std::thread renewer_;
  std::atomic<uint64_t> lease_failures_{0};
};

/// Identity of this process: node id, pid and start time as incarnation.
HolderId local_holder(uint32_t node_id);

}  // namespace rpcool
