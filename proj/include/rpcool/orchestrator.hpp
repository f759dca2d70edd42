#pragma once

// Global orchestrator: channel registry, cluster-unique heap address space,
// leases and quotas. Time is always passed in explicitly so the core can be
// driven by a simulated clock; OrchestratorServer feeds it wall-clock time.

#include <compare>
#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "rpcool/config.hpp"
#include "rpcool/error.hpp"

namespace rpcool {

/// Identity of a mapping process. A restarted process gets a new
/// incarnation and therefore is a distinct holder.
struct HolderId {
  uint32_t node = 0;
  uint32_t pid = 0;
  uint32_t incarnation = 0;

  auto operator<=>(const HolderId&) const = default;
  std::string str() const;
};

enum class HeapMode : uint8_t { per_connection = 0, channel_shared = 1 };

struct HeapDescriptor {
  uint64_t id = 0;
  uint64_t base = 0;
  uint64_t size = 0;
  std::string backing;  // "heap-<id>" inside the pool directory

  bool operator==(const HeapDescriptor&) const = default;
};

struct Lease {
  uint64_t id = 0;
  uint64_t heap_id = 0;
  HolderId holder;
  Nanos expiry{0};        // wall-clock deadline, ns since the epoch
  Nanos renew_period{0};  // amount each renewal extends the lease from "now"
};

struct ChannelRecord {
  std::string name;
  uint64_t id = 0;
  std::vector<HeapDescriptor> heaps;
  HolderId server;
  HeapMode mode = HeapMode::per_connection;
  std::string pool_id;            // identifies the shared pool the server maps from
  std::string fallback_endpoint;  // host:port of the server's fallback listener, may be empty
  std::vector<uint32_t> allow_nodes;  // empty admits every node
};

struct HeapGrant {
  HeapDescriptor heap;
  Lease lease;
};

struct RegisterResult {
  ChannelRecord record;
  Lease lease;
};

struct FailureNotification {
  HolderId recipient;
  HolderId failed;
  uint64_t heap_id = 0;
  std::vector<std::string> channels;
};

struct QuotaDecision {
  bool allowed = false;
  uint64_t mapped = 0;
  uint64_t limit = 0;
};

struct RegisterRequest {
  std::string name;
  HeapMode mode = HeapMode::per_connection;
  uint64_t initial_heap_size = 0;
  HolderId creator;
  std::string pool_id;
  std::string fallback_endpoint;
  std::vector<uint32_t> allow_nodes;
};

/// `/`-separated, non-empty segments, no trailing slash.
bool valid_channel_name(std::string_view name);

/// First-fit allocator over the pool's virtual address range.
class AddressPool {
 public:
  AddressPool(uint64_t base, uint64_t span, uint64_t page);

  /// Returns the base of a free range of `size` bytes (page multiple) or nullopt.
  std::optional<uint64_t> allocate(uint64_t size);
  void release(uint64_t base, uint64_t size);
  uint64_t free_bytes() const;
  size_t fragments() const { return free_.size(); }

 private:
  uint64_t page_;
  std::map<uint64_t, uint64_t> free_;  // start -> length
};

class Orchestrator {
 public:
  explicit Orchestrator(OrchestratorConfig cfg);

  const OrchestratorConfig& config() const { return cfg_; }

  RegisterResult register_channel(const RegisterRequest& req, Nanos now);
  std::optional<ChannelRecord> lookup_channel(std::string_view name) const;
  /// Only the creating holder may close. Heaps stay alive until released.
  void close_channel(std::string_view name, const HolderId& holder);

  /// New heap leased to `holder`. `channel_id` (0 = none) attaches it to a channel.
  HeapGrant allocate_heap(uint64_t size, const HolderId& holder, Nanos now, uint64_t channel_id = 0);
  /// Lease an existing heap to another mapper; charges its quota. Returns the
  /// existing lease when the holder already has one.
  HeapGrant attach_heap(uint64_t heap_id, const HolderId& holder, Nanos now);
  /// Drops the holder's lease; reclaims the heap when it was the last holder.
  void release_heap(uint64_t heap_id, const HolderId& holder);

  Nanos renew_lease(uint64_t lease_id, Nanos now);
  std::vector<FailureNotification> expire_sweep(Nanos now);

  QuotaDecision check_quota(const HolderId& holder, uint64_t additional);
  void set_quota(const HolderId& holder, uint64_t bytes);

  // Introspection, mostly for tests and the audit tooling.
  std::vector<HeapDescriptor> live_heaps() const;
  std::vector<HolderId> holders_of(uint64_t heap_id) const;
  std::optional<Lease> lease(uint64_t lease_id) const;
  std::optional<Lease> lease_of(uint64_t heap_id, const HolderId& holder) const;
  uint64_t mapped_bytes(const HolderId& holder) const;
  uint64_t pool_free_bytes() const;

 private:
  struct HeapState {
    HeapDescriptor desc;
    std::map<HolderId, uint64_t> holders;  // holder -> lease id
    std::set<uint64_t> channels;
  };
  struct ChannelState {
    ChannelRecord record;  // `heaps` is rebuilt from heap_ids on read
    std::vector<uint64_t> heap_ids;
  };
  struct LedgerEntry {
    uint64_t quota = 0;
    uint64_t mapped = 0;
  };

  LedgerEntry& ledger(const HolderId& h);
  uint64_t default_quota_for(const HolderId& h) const;
  HeapGrant new_heap(uint64_t size, const HolderId& holder, Nanos now, uint64_t channel_id);
  Lease new_lease(uint64_t heap_id, const HolderId& holder, Nanos now);
  void drop_lease(uint64_t lease_id);
  void reclaim(uint64_t heap_id);
  ChannelRecord materialize(const ChannelState& ch) const;
  void journal(const std::string& line);

  OrchestratorConfig cfg_;
  mutable std::mutex mu_;
  AddressPool pool_;
  std::map<std::string, ChannelState, std::less<>> channels_;
  std::map<uint64_t, std::string> channel_names_;
  std::map<uint64_t, HeapState> heaps_;
  std::map<uint64_t, Lease> leases_;
  std::map<HolderId, LedgerEntry> ledger_;
  uint64_t next_channel_id_ = 1;
  uint64_t next_heap_id_ = 1;
  uint64_t next_lease_id_ = 1;
  std::ofstream journal_;
};

}  // namespace rpcool
