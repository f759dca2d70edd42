#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <map>
#include <random>
#include <set>
#include <sys/mman.h>

#include "probes.hpp"
#include "rpcool/orch_client.hpp"
#include "rpcool/orchestrator.hpp"
#include "rpcool/runtime.hpp"
#include "support.hpp"

using namespace rpcool;
using namespace std::chrono_literals;
using rpcool::testing::Child;
using rpcool::testing::LocalCluster;

namespace {

OrchestratorConfig small_pool() {
  OrchestratorConfig c;
  c.pool_base = 0x7C0000000000ull;
  c.pool_span = 256 * MiB;
  c.default_quota = 64 * MiB;
  c.renew_interval = 1s;
  c.missed_renewals = 3;
  return c;
}

HolderId holder(uint32_t node, uint32_t pid) { return {node, pid, 1}; }

RegisterRequest reg(std::string name, HolderId h, uint64_t heap = 4 * MiB) {
  RegisterRequest r;
  r.name = std::move(name);
  r.creator = h;
  r.initial_heap_size = heap;
  return r;
}

}  // namespace

TEST(ChannelNames, Validation) {
  EXPECT_TRUE(valid_channel_name("/a"));
  EXPECT_TRUE(valid_channel_name("/svc/db-1/shard_2"));
  for (const char* bad : {"", "/", "a/b", "/a/", "//a", "/a//b"}) EXPECT_FALSE(valid_channel_name(bad)) << bad;
}

TEST(AddressPool, FirstFitAndCoalescing) {
  AddressPool p(0x10000, 16 * 4096, 4096);
  auto a = p.allocate(4 * 4096), b = p.allocate(4 * 4096), c = p.allocate(8 * 4096);
  ASSERT_TRUE(a && b && c);
  EXPECT_EQ(*a, 0x10000u);
  EXPECT_EQ(*b, 0x10000u + 4 * 4096);
  EXPECT_FALSE(p.allocate(4096));
  EXPECT_FALSE(p.allocate(100));
  p.release(*b, 4 * 4096);
  p.release(*a, 4 * 4096);
  EXPECT_EQ(p.fragments(), 1u);
  EXPECT_EQ(p.free_bytes(), 8u * 4096);
  EXPECT_THROW(p.release(*a, 4 * 4096), Error);
  p.release(*c, 8 * 4096);
  EXPECT_EQ(p.fragments(), 1u);
}

TEST(Orchestrator, ChannelRegistry) {
  Orchestrator o(small_pool());
  auto a = holder(1, 10), b = holder(2, 20);
  auto r = o.register_channel(reg("/kv/main", a), 0ns);
  EXPECT_EQ(r.record.heaps.size(), 1u);
  EXPECT_EQ(r.lease.holder, a);
  try {
    o.register_channel(reg("/kv/main", b), 0ns);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::duplicate_name);
  }
  try {
    o.register_channel(reg("kv", b), 0ns);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::malformed_name);
  }
  auto found = o.lookup_channel("/kv/main");
  ASSERT_TRUE(found);
  EXPECT_EQ(found->server, a);
  EXPECT_FALSE(o.lookup_channel("/kv/other"));
  try {
    o.close_channel("/kv/main", b);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::acl_denied);
  }
  o.close_channel("/kv/main", a);
  EXPECT_FALSE(o.lookup_channel("/kv/main"));
  // The heap outlives the channel until its holder releases it.
  EXPECT_EQ(o.live_heaps().size(), 1u);
  o.release_heap(r.record.heaps[0].id, a);
  EXPECT_TRUE(o.live_heaps().empty());
}

TEST(Orchestrator, HeapsAreDisjointAndPageAligned) {
  Orchestrator o(small_pool());
  auto a = holder(1, 1);
  std::vector<HeapDescriptor> got;
  for (uint64_t sz : {1u, 4096u, 5000u, 1u << 20}) got.push_back(o.allocate_heap(sz, a, 0ns).heap);
  for (size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i].base % 4096, 0u);
    EXPECT_EQ(got[i].size % 4096, 0u);
    EXPECT_GE(got[i].base, 0x7C0000000000ull);
    for (size_t j = 0; j < i; ++j) {
      AddrRange x{got[i].base, got[i].size}, y{got[j].base, got[j].size};
      EXPECT_FALSE(x.overlaps(y));
    }
  }
  EXPECT_THROW(o.allocate_heap(0, a, 0ns), Error);
}

TEST(Orchestrator, QuotaChargedPerHolder) {
  Orchestrator o(small_pool());
  auto a = holder(1, 1), b = holder(2, 2);
  auto g = o.allocate_heap(48 * MiB, a, 0ns);
  try {
    o.allocate_heap(32 * MiB, a, 0ns);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::quota_exceeded);
  }
  EXPECT_EQ(o.mapped_bytes(a), 48 * MiB);
  o.set_quota(b, 32 * MiB);
  try {
    o.attach_heap(g.heap.id, b, 0ns);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::quota_exceeded);
  }
  o.set_quota(b, 64 * MiB);
  auto gb = o.attach_heap(g.heap.id, b, 0ns);
  EXPECT_EQ(o.attach_heap(g.heap.id, b, 0ns).lease.id, gb.lease.id);
  EXPECT_EQ(o.mapped_bytes(b), 48 * MiB);
  EXPECT_FALSE(o.check_quota(b, 17 * MiB).allowed);
  EXPECT_TRUE(o.check_quota(b, 16 * MiB).allowed);
  o.release_heap(g.heap.id, a);
  EXPECT_EQ(o.mapped_bytes(a), 0u);
  EXPECT_EQ(o.live_heaps().size(), 1u);
  o.release_heap(g.heap.id, b);
  EXPECT_TRUE(o.live_heaps().empty());
  EXPECT_EQ(o.pool_free_bytes(), 256 * MiB);
}

TEST(Orchestrator, PerNodeAndPerProcessQuotaOverrides) {
  auto cfg = small_pool();
  cfg.node_quota[5] = 8 * MiB;
  cfg.process_quota[{5, 9}] = 12 * MiB;
  Orchestrator o(cfg);
  EXPECT_EQ(o.check_quota(holder(5, 1), 0).limit, 8 * MiB);
  EXPECT_EQ(o.check_quota(holder(5, 9), 0).limit, 12 * MiB);
  EXPECT_EQ(o.check_quota(holder(6, 1), 0).limit, 64 * MiB);
}

TEST(Orchestrator, LeaseRenewalAndExpiry) {
  Orchestrator o(small_pool());
  auto a = holder(1, 1), b = holder(2, 2);
  auto r = o.register_channel(reg("/svc", a), 0ns);
  const uint64_t heap = r.record.heaps[0].id;
  auto gb = o.attach_heap(heap, b, 0ns);
  const Nanos term = o.config().lease_term();

  // a renews, b does not.
  Nanos t = 0ns;
  for (int i = 0; i < 5; ++i) {
    t += 1s;
    o.renew_lease(r.lease.id, t);
    auto notes = o.expire_sweep(t);
    if (t <= term) {
      EXPECT_TRUE(notes.empty());
    }
  }
  // b lapsed: a is told about it, b's lease is gone, the heap survives.
  EXPECT_FALSE(o.lease(gb.lease.id));
  EXPECT_EQ(o.holders_of(heap), std::vector<HolderId>{a});
  EXPECT_THROW(o.renew_lease(gb.lease.id, t), Error);

  // Now a stops renewing too: the orphan heap and its channel are reclaimed.
  auto notes = o.expire_sweep(t + term + 1ns);
  EXPECT_TRUE(notes.empty());
  EXPECT_TRUE(o.live_heaps().empty());
  EXPECT_FALSE(o.lookup_channel("/svc"));
}

TEST(Orchestrator, ExpiryNotifiesEveryCoHolder) {
  Orchestrator o(small_pool());
  auto dead = holder(9, 9);
  auto g = o.allocate_heap(MiB, dead, 0ns);
  std::vector<HolderId> others{holder(1, 1), holder(2, 2), holder(3, 3)};
  std::vector<uint64_t> leases;
  for (auto& h : others) leases.push_back(o.attach_heap(g.heap.id, h, 0ns).lease.id);
  const Nanos t = o.config().lease_term() + 1ns;
  for (auto id : leases) o.renew_lease(id, t - 1ns);
  auto notes = o.expire_sweep(t);
  ASSERT_EQ(notes.size(), others.size());
  std::set<HolderId> told;
  for (auto& n : notes) {
    EXPECT_EQ(n.failed, dead);
    EXPECT_EQ(n.heap_id, g.heap.id);
    told.insert(n.recipient);
  }
  EXPECT_EQ(told, std::set<HolderId>(others.begin(), others.end()));
  EXPECT_EQ(o.live_heaps().size(), 1u);
}

TEST(Orchestrator, ExpiredLeaseCannotBeRenewed) {
  Orchestrator o(small_pool());
  auto g = o.allocate_heap(MiB, holder(1, 1), 0ns);
  try {
    o.renew_lease(g.lease.id, o.config().lease_term() + 1s);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::lease_expired);
  }
}

// Randomized map/unmap traces against a bookkeeping oracle.
TEST(Orchestrator, RandomTracesRespectQuota) {
  auto r = probes::quota_traces(20, 2000);
  EXPECT_EQ(r.steps, 40000u);
  EXPECT_EQ(r.over_quota, 0u);
  EXPECT_EQ(r.mismatches, 0u);
}

TEST(Orchestrator, OrphanReclaimedOnNextSweep) {
  auto r = probes::orphan_reclaim();
  EXPECT_TRUE(r.notified_before);
  EXPECT_TRUE(r.reclaimed_next_sweep);
  EXPECT_TRUE(r.pool_restored);
}

// Over the network ---------------------------------------------------------------

TEST(OrchestratorServer, ClientRoundTrip) {
  LocalCluster cluster;
  OrchestratorClient c(wire::Endpoint::parse(cluster.server().endpoint().str()), holder(1, static_cast<uint32_t>(::getpid())));
  auto r = c.register_channel("/net/a", HeapMode::channel_shared, 2 * MiB, "pool", "127.0.0.1:1");
  EXPECT_EQ(r.record.mode, HeapMode::channel_shared);
  auto found = c.lookup_channel("/net/a");
  EXPECT_EQ(found.id, r.record.id);
  EXPECT_EQ(found.pool_id, "pool");
  EXPECT_EQ(found.fallback_endpoint, "127.0.0.1:1");
  try {
    c.lookup_channel("/net/missing");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::unknown_channel);
  }
  auto g = c.allocate_heap(MiB);
  EXPECT_GT(c.renew_lease(g.lease.id).count(), 0);
  EXPECT_TRUE(c.check_quota(MiB).allowed);
  c.release_heap(g.heap.id);
  c.close_channel("/net/a");
  EXPECT_THROW(c.lookup_channel("/net/a"), Error);
}

// A crashed co-holder is reported to every survivor within twice the lease
// term, and the heap is reclaimed once the survivors let go.
TEST(OrchestratorServer, CrashNotificationWithinTwoLeasePeriods) {
  LocalCluster cluster;
  NodeRuntime rt(cluster.runtime(1));
  auto r = probes::crash_notification(cluster, 3);
  EXPECT_TRUE(r.all_notified);
  ASSERT_EQ(r.latencies.size(), 3u);
  for (auto l : r.latencies) EXPECT_LT(l, 2 * r.lease_term) << l.count() / 1000000 << " ms";
  EXPECT_TRUE(r.reclaimed);
}

TEST(OrchestratorServer, OrphanReclaimedOnSweep) {
  LocalCluster cluster;
  auto* shared_id = static_cast<std::atomic<uint64_t>*>(
      ::mmap(nullptr, 4096, PROT_READ | PROT_WRITE, MAP_SHARED | MAP_ANONYMOUS, -1, 0));
  shared_id->store(0);
  auto cfg = cluster.runtime(3);
  Child a([cfg, shared_id] {
    NodeRuntime crt(cfg);
    shared_id->store(crt.allocate_heap(MiB).desc.id);
    for (;;) ::pause();
    return 0;
  });
  ASSERT_TRUE(rpcool::testing::eventually([&] { return shared_id->load() != 0; }));
  const uint64_t id = shared_id->load();
  a.kill();
  const auto term = cluster.core().config().lease_term();
  ASSERT_TRUE(rpcool::testing::eventually([&] { return cluster.core().live_heaps().empty(); },
                                          std::chrono::duration_cast<std::chrono::milliseconds>(4 * term)));
  EXPECT_FALSE(std::filesystem::exists(cluster.pool_dir() + "/heap-" + std::to_string(id)));
  ::munmap(shared_id, 4096);
}
