#include "probes.hpp"

#include <sys/mman.h>
#include <sys/socket.h>

#include <atomic>
#include <cstdio>
#include <map>
#include <optional>
#include <random>
#include <set>

#include "rpcool/cooldb.hpp"
#include "rpcool/fallback.hpp"
#include "rpcool/fault.hpp"

namespace rpcool::probes {

SealBench::SealBench(NodeRuntime& rt, uint64_t heap_bytes, uint32_t ring_capacity) {
  MappedHeap& mh = rt.allocate_heap(heap_bytes);
  heap = Heap::format(mh.addr(0), mh.size(), mh.page_size);
  heap_id = mh.desc.id;
  page = mh.page_size;
  void* ring = heap.allocate_pages(SealRing::bytes_for(ring_capacity, page) / page);
  sender = SealRing::in_heap(SealRole::sender, heap_id, ring, ring_capacity);
  receiver = SealRing::in_heap(SealRole::receiver, heap_id, ring, ring_capacity);
}

SealProbeResult probe_seal(SealBench& b, uint64_t pages, int cycles) {
  SealProbeResult r;
  Scope s = b.heap.create_scope(pages * b.page - kScopeHeader);
  auto* base = reinterpret_cast<uint8_t*>(s.range().start);
  for (int c = 0; c < cycles; ++c) {
    std::memset(base + kScopeHeader, c & 0xFF, pages * b.page - kScopeHeader);
    SealTicket t = b.sender->seal(s);
    for (uint64_t p = 0; p < pages; ++p) {
      for (uint64_t off : {uint64_t{0}, b.page / 2, b.page - 1}) {
        uint8_t* at = base + p * b.page + off;
        const uint8_t before = *at;
        ++r.stores;
        if (!probe_write(at, static_cast<uint8_t>(before ^ 0xFF))) ++r.faulted;
        if (*at != before) ++r.took_effect;
      }
    }
    ++r.early_releases;
    try {
      b.sender->release(t.index);
    } catch (const Error& e) {
      if (e.code() == Errc::not_complete) ++r.refused;
    }
    b.receiver->mark_complete(t.index, t.epoch);
    b.sender->release(t.index);
    for (uint64_t p = 0; p < pages; ++p) {
      ++r.probes_after;
      if (probe_write(base + p * b.page + b.page - 1, 0x11)) ++r.writable_after;
    }
  }
  s.destroy();
  return r;
}

}  // namespace rpcool::probes

namespace rpcool::probes {

namespace {

constexpr uint64_t kCohPages = 6;
constexpr uint64_t kCohFirstPage = 2;
constexpr uint64_t kRaceWrites = 8;  // per node per race round

enum class OpKind : uint8_t { write, read, race };

struct CohOp {
  OpKind kind;
  int node;       // 0 server, 1 client (sequential ops)
  uint64_t page;  // 0..kCohPages-1
  uint64_t word;  // word index inside the page
  uint64_t value;
};

std::vector<CohOp> schedule(int ops, uint64_t seed, uint64_t words_per_page) {
  std::mt19937_64 rng(seed);
  std::vector<CohOp> out;
  out.reserve(static_cast<size_t>(ops));
  for (int i = 0; i < ops; ++i) {
    CohOp op{};
    const uint64_t roll = rng() % 100;
    op.kind = roll < 10 ? OpKind::race : roll < 55 ? OpKind::write : OpKind::read;
    op.node = static_cast<int>(rng() % 2);
    op.page = rng() % kCohPages;
    op.word = rng() % words_per_page;
    op.value = rng();
    out.push_back(op);
  }
  return out;
}

// Word written by `node` in race write `k` of a round. Nodes use disjoint
// (even/odd) words so the final contents do not depend on interleaving.
uint64_t race_word(const CohOp& op, int node, uint64_t k, uint64_t words_per_page) {
  return ((op.word + 2 * k) * 2 + static_cast<uint64_t>(node)) % words_per_page;
}
uint64_t race_value(const CohOp& op, int node, uint64_t k) { return op.value ^ (k * 0x9E3779B97F4A7C15ull) ^ static_cast<uint64_t>(node + 1); }

struct CohShared {
  std::atomic<uint64_t> turn;
  std::atomic<uint64_t> race_done;
  std::atomic<int> ready;
  std::atomic<bool> abort;
  uint64_t reads[2];
  uint64_t divergences[2];
  uint64_t faults[2];
};

bool spin_until(const std::function<bool()>& pred, CohShared* sh, std::chrono::seconds limit = std::chrono::seconds(30)) {
  const auto deadline = std::chrono::steady_clock::now() + limit;
  while (!pred()) {
    if (sh->abort.load() || std::chrono::steady_clock::now() > deadline) {
      sh->abort = true;
      return false;
    }
    std::this_thread::yield();
  }
  return true;
}

// One node's part of the workload. Returns false if it stalled.
bool coherence_node(int me, const std::vector<CohOp>& sched, uint64_t* words, uint64_t wpp, CohShared* sh) {
  std::vector<uint64_t> model(kCohPages * wpp, 0);
  auto at = [&](uint64_t page, uint64_t word) -> volatile uint64_t& { return words[page * wpp + word]; };
  uint64_t races = 0;
  for (size_t i = 0; i < sched.size(); ++i) {
    const CohOp& op = sched[i];
    if (op.kind == OpKind::race) {
      if (!spin_until([&] { return sh->turn.load() == i; }, sh)) return false;
      for (uint64_t k = 0; k < kRaceWrites; ++k) {
        uint64_t page = (op.page + k / 4) % kCohPages;
        at(page, race_word(op, me, k, wpp)) = race_value(op, me, k);
      }
      ++races;
      sh->race_done.fetch_add(1);
      if (me == 0) {
        if (!spin_until([&] { return sh->race_done.load() == 2 * races; }, sh)) return false;
        sh->turn.store(i + 1);
      }
      for (int node = 0; node < 2; ++node)
        for (uint64_t k = 0; k < kRaceWrites; ++k)
          model[((op.page + k / 4) % kCohPages) * wpp + race_word(op, node, k, wpp)] = race_value(op, node, k);
      continue;
    }
    if (op.node == me) {
      if (!spin_until([&] { return sh->turn.load() == i; }, sh)) return false;
      if (op.kind == OpKind::write) {
        at(op.page, op.word) = op.value;
      } else {
        ++sh->reads[me];
        if (at(op.page, op.word) != model[op.page * wpp + op.word]) ++sh->divergences[me];
      }
      sh->turn.store(i + 1);
    }
    if (op.kind == OpKind::write) model[op.page * wpp + op.word] = op.value;
  }
  // Final dump, one node at a time.
  const uint64_t n = sched.size();
  if (!spin_until([&] { return sh->turn.load() == n + static_cast<uint64_t>(me); }, sh)) return false;
  for (uint64_t w = 0; w < model.size(); ++w) {
    ++sh->reads[me];
    if (words[w] != model[w]) ++sh->divergences[me];
  }
  sh->turn.store(n + static_cast<uint64_t>(me) + 1);
  return true;
}

}  // namespace

CoherenceResult run_coherence(LocalCluster& cluster, int ops, uint64_t seed) {
  CoherenceResult res;
  res.ops = static_cast<uint64_t>(ops);
  const auto t0 = std::chrono::steady_clock::now();

  // The grant is obtained without mapping so both processes can map their
  // mirror at the fixed base after the fork.
  OrchestratorClient orch(wire::Endpoint::parse(cluster.server().endpoint().str()), local_holder(1));
  HeapGrant g = orch.allocate_heap(1 * MiB);
  const uint64_t page = host_page_size();
  const uint64_t wpp = page / sizeof(uint64_t);
  const auto sched = schedule(ops, seed, wpp);
  for (const auto& op : sched) res.race_rounds += op.kind == OpKind::race;

  auto* sh = static_cast<CohShared*>(::mmap(nullptr, sizeof(CohShared), PROT_READ | PROT_WRITE, MAP_SHARED | MAP_ANONYMOUS, -1, 0));
  if (sh == MAP_FAILED) throw Error(Errc::bench_failed, "shared state mmap failed");
  new (sh) CohShared{};
  int sv[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0) throw Error(Errc::bench_failed, "socketpair failed");

  auto run_side = [&](int me, int fd, uint32_t node) -> bool {
    NodeRuntime rt(cluster.runtime(node, false));
    MappedHeap& mh = rt.map_mirror(g.heap, 0);
    FallbackSession s(me == 0 ? FallbackSession::Role::server : FallbackSession::Role::client, wire::Fd(fd), mh);
    s.on_request([](const RpcMessage&) {});
    s.on_response([](uint32_t, uint32_t, uint64_t, uint32_t) {});
    s.on_seal_info([](uint32_t, const SealDescriptor&) {});
    s.on_close([] {});
    s.start();
    sh->ready.fetch_add(1);
    bool ok = spin_until([&] { return sh->ready.load() == 2; }, sh);
    auto* words = reinterpret_cast<uint64_t*>(mh.base() + kCohFirstPage * page);
    ok = ok && coherence_node(me, sched, words, wpp, sh);
    // Keep serving the peer's page requests until it is done too.
    sh->ready.fetch_add(1);
    ok = spin_until([&] { return sh->ready.load() == 4; }, sh) && ok;
    sh->faults[me] = s.stats().faults;
    s.close();
    return ok;
  };

  Child peer([&, fd = sv[1], c = sv[0]] {
    ::close(c);
    try {
      return run_side(1, fd, 2) ? 0 : 1;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "coherence peer: %s\n", e.what());
      sh->abort = true;
      return 2;
    }
  });
  ::close(sv[1]);
  bool ok = false;
  try {
    ok = run_side(0, sv[0], 1);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "coherence node: %s\n", e.what());
    sh->abort = true;
  }
  const int rc = peer.wait(std::chrono::seconds(60));
  res.completed = ok && rc == 0 && !sh->abort.load();
  res.reads_checked = sh->reads[0] + sh->reads[1];
  res.divergences = sh->divergences[0] + sh->divergences[1];
  res.faults = sh->faults[0] + sh->faults[1];
  ::munmap(sh, sizeof(CohShared));
  try {
    orch.release_heap(g.heap.id);
  } catch (const Error&) {
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace rpcool::probes

namespace rpcool::probes {

namespace {

class IntervalOracle {
 public:
  bool insert(uintptr_t start, uintptr_t end) {
    auto it = live_.upper_bound(start);
    if (it != live_.end() && it->first < end) return false;
    if (it != live_.begin() && std::prev(it)->second > start) return false;
    live_[start] = end;
    return true;
  }
  void erase(uintptr_t start) { live_.erase(start); }

 private:
  std::map<uintptr_t, uintptr_t> live_;
};

struct Live {
  uintptr_t start;
  uint64_t bytes;
  uint8_t tag;
  bool pages;
};

bool intact(const Live& l) {
  auto* p = reinterpret_cast<const uint8_t*>(l.start);
  for (uint64_t i = 0; i < l.bytes; ++i)
    if (p[i] != l.tag) return false;
  return true;
}

template <class T>
T* shared_block(size_t n = 1) {
  void* p = ::mmap(nullptr, sizeof(T) * n, PROT_READ | PROT_WRITE, MAP_SHARED | MAP_ANONYMOUS, -1, 0);
  if (p == MAP_FAILED) throw Error(Errc::bench_failed, "shared mmap failed");
  return new (p) T[n]();
}

}  // namespace

uint64_t heap_trace(Heap heap, uint64_t seed, int ops, std::vector<std::pair<uintptr_t, uintptr_t>>* survivors) {
  std::mt19937_64 rng(seed);
  const uint64_t ps = heap.page_size();
  std::vector<Live> live;
  IntervalOracle oracle;
  uint64_t problems = 0;
  for (int i = 0; i < ops; ++i) {
    const bool grow = live.empty() || (rng() % 100) < (live.size() < 200 ? 60u : 40u);
    if (grow) {
      Live l{};
      const uint32_t kind = static_cast<uint32_t>(rng() % 10);
      try {
        if (kind == 0) {
          uint64_t pages = 1 + rng() % 4;
          l.start = reinterpret_cast<uintptr_t>(heap.allocate_pages(pages));
          l.bytes = pages * ps;
          l.pages = true;
        } else {
          size_t n = kind < 7 ? 1 + rng() % 2048 : 2049 + rng() % (3 * ps);
          size_t align = size_t{16} << (rng() % 3);
          l.start = reinterpret_cast<uintptr_t>(heap.allocate(n, align));
          if (l.start % align) ++problems;
          l.bytes = n;
          if (heap.usable_size(reinterpret_cast<void*>(l.start)) < n) ++problems;
        }
      } catch (const Error& e) {
        if (e.code() != Errc::out_of_space) ++problems;
        continue;
      }
      if (!heap.contains(reinterpret_cast<void*>(l.start), l.bytes)) ++problems;
      if (!oracle.insert(l.start, l.start + l.bytes)) ++problems;
      l.tag = static_cast<uint8_t>(1 + rng() % 255);
      std::memset(reinterpret_cast<void*>(l.start), l.tag, l.bytes);
      live.push_back(l);
    } else {
      size_t k = rng() % live.size();
      Live l = live[k];
      live[k] = live.back();
      live.pop_back();
      if (!intact(l)) ++problems;
      oracle.erase(l.start);
      if (l.pages) {
        heap.free_pages(reinterpret_cast<void*>(l.start));
      } else {
        heap.deallocate(reinterpret_cast<void*>(l.start));
      }
    }
  }
  for (const auto& l : live) {
    if (!intact(l)) ++problems;
    if (survivors) survivors->push_back({l.start, l.start + l.bytes});
  }
  return problems;
}

AllocatorResult cross_process_allocator(LocalCluster& cluster, int procs, int total_ops, uint64_t seed) {
  static constexpr size_t kMaxLive = 1 << 16;
  struct Slot {
    uint64_t problems;
    uint64_t count;
    int done;
    std::pair<uintptr_t, uintptr_t> live[kMaxLive];
  };
  AllocatorResult res;
  res.ops = static_cast<uint64_t>(total_ops);
  NodeRuntime& rt = NodeRuntime::current();
  MappedHeap& mh = rt.allocate_heap(64 * MiB);
  Heap heap = Heap::format(mh.addr(0), mh.size(), mh.page_size);
  const uint64_t id = mh.desc.id;
  auto* slots = shared_block<Slot>(static_cast<size_t>(procs));

  std::vector<std::unique_ptr<Child>> kids;
  for (int p = 0; p < procs; ++p) {
    auto cfg = cluster.runtime(static_cast<uint32_t>(10 + p));
    const int ops = total_ops / procs + (p < total_ops % procs ? 1 : 0);
    kids.push_back(std::make_unique<Child>([cfg, id, slots, p, ops, seed] {
      NodeRuntime crt(cfg);
      MappedHeap& m = crt.map_heap(id);
      std::vector<std::pair<uintptr_t, uintptr_t>> out;
      Slot& s = slots[p];
      s.problems = heap_trace(Heap(m.addr(0)), seed * 1000 + static_cast<uint64_t>(p), ops, &out);
      s.count = std::min(out.size(), kMaxLive);
      std::copy_n(out.begin(), s.count, s.live);
      s.done = 1;
      return 0;
    }));
  }
  bool ok = true;
  for (auto& k : kids) ok &= k->wait(std::chrono::seconds(120)) == 0;

  IntervalOracle all;
  for (int p = 0; p < procs; ++p) {
    ok &= slots[p].done == 1;
    res.problems += slots[p].problems;
    for (size_t i = 0; i < slots[p].count; ++i) {
      if (!all.insert(slots[p].live[i].first, slots[p].live[i].second)) ++res.overlaps;
      ++res.survivors;
    }
  }
  res.accounted = heap.allocation_count() == res.survivors;
  res.completed = ok;
  ::munmap(slots, sizeof(Slot) * static_cast<size_t>(procs));
  rt.unmap_heap(id);
  return res;
}

ScopeResult scope_trace(Heap heap, uint64_t seed, int rounds) {
  ScopeResult r;
  std::mt19937_64 rng(seed);
  for (int round = 0; round < rounds; ++round) {
    Scope s = heap.create_scope(1 + rng() % (64 * 1024));
    const AddrRange range = s.range();
    IntervalOracle o;
    for (;;) {
      const size_t n = 1 + rng() % 700;
      const size_t align = size_t{1} << (rng() % 7);
      void* p;
      try {
        p = s.allocate(n, align);
      } catch (const Error& e) {
        if (e.code() != Errc::scope_exhausted) ++r.escapes;
        break;
      }
      ++r.allocations;
      const auto u = reinterpret_cast<uintptr_t>(p);
      if (!range.contains(u, n) || u < range.start + kScopeHeader || u % align != 0 || !o.insert(u, u + n)) ++r.escapes;
    }
    if (s.used() > range.len) ++r.escapes;
    s.destroy();
  }
  return r;
}

QuotaTraceResult quota_traces(int seeds, int steps) {
  QuotaTraceResult res;
  for (int seed = 1; seed <= seeds; ++seed) {
    OrchestratorConfig cfg;
    cfg.pool_base = 0x7C0000000000ull;
    cfg.pool_span = 1 * GiB;
    cfg.default_quota = 64 * MiB;
    Orchestrator o(cfg);
    std::mt19937_64 rng(static_cast<uint64_t>(seed));
    std::vector<HolderId> hs;
    std::map<HolderId, uint64_t> quota;
    for (uint32_t i = 0; i < 6; ++i) {
      hs.push_back({i + 1, 100 + i, 1});
      quota[hs.back()] = (8 + rng() % 56) * MiB;
      o.set_quota(hs.back(), quota[hs.back()]);
    }
    std::map<HolderId, std::set<uint64_t>> holds;
    std::map<uint64_t, uint64_t> sizes;
    auto charged = [&](const HolderId& h) {
      uint64_t s = 0;
      for (auto id : holds[h]) s += sizes[id];
      return s;
    };
    for (int step = 0; step < steps; ++step) {
      ++res.steps;
      const HolderId& h = hs[rng() % hs.size()];
      const int op = static_cast<int>(rng() % 3);
      if (op == 0) {
        const uint64_t sz = (1 + rng() % 16) * MiB;
        const bool fits = charged(h) + sz <= quota[h];
        try {
          auto g = o.allocate_heap(sz, h, Nanos{0});
          if (!fits) ++res.mismatches;
          sizes[g.heap.id] = g.heap.size;
          holds[h].insert(g.heap.id);
        } catch (const Error& e) {
          if (e.code() == Errc::quota_exceeded ? fits : e.code() != Errc::pool_exhausted) ++res.mismatches;
        }
      } else if (op == 1 && !sizes.empty()) {
        auto it = sizes.begin();
        std::advance(it, static_cast<long>(rng() % sizes.size()));
        if (holds[h].count(it->first)) continue;
        const bool fits = charged(h) + it->second <= quota[h];
        try {
          o.attach_heap(it->first, h, Nanos{0});
          if (!fits) ++res.mismatches;
          holds[h].insert(it->first);
        } catch (const Error& e) {
          if (e.code() != Errc::quota_exceeded || fits) ++res.mismatches;
        }
      } else if (!holds[h].empty()) {
        auto it = holds[h].begin();
        std::advance(it, static_cast<long>(rng() % holds[h].size()));
        const uint64_t id = *it;
        o.release_heap(id, h);
        holds[h].erase(id);
        const bool orphan = std::none_of(hs.begin(), hs.end(), [&](const HolderId& x) { return holds[x].count(id) > 0; });
        if (orphan) sizes.erase(id);
      }
      for (const auto& x : hs) {
        if (o.mapped_bytes(x) > quota[x]) ++res.over_quota;
        if (o.mapped_bytes(x) != charged(x)) ++res.mismatches;
      }
      if (o.live_heaps().size() != sizes.size()) ++res.mismatches;
    }
  }
  return res;
}

CrashResult crash_notification(LocalCluster& cluster, int survivors) {
  struct Shared {
    std::atomic<uint64_t> heap_id;
    std::atomic<int> mapped;
    std::atomic<int64_t> killed_at;
    std::atomic<int64_t> heard_at[16];
    std::atomic<int> release;
  };
  using Clock = std::chrono::steady_clock;
  auto now_ns = [] { return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now().time_since_epoch()).count(); };
  CrashResult res;
  res.lease_term = cluster.core().config().lease_term();
  res.survivors = static_cast<uint64_t>(survivors);
  if (survivors < 1 || survivors > 16) throw Error(Errc::invalid_argument, "1..16 survivors");
  auto* sh = shared_block<Shared>();
  NodeRuntime& rt = NodeRuntime::current();

  auto victim_cfg = cluster.runtime(20);
  Child victim([victim_cfg, sh] {
    NodeRuntime crt(victim_cfg);
    sh->heap_id = crt.allocate_heap(MiB).desc.id;
    for (;;) ::pause();
    return 0;
  });
  const auto wait_for = [](const std::function<bool()>& pred, std::chrono::milliseconds limit) {
    const auto deadline = Clock::now() + limit;
    while (!pred()) {
      if (Clock::now() > deadline) return false;
      std::this_thread::sleep_for(std::chrono::microseconds(200));
    }
    return true;
  };
  if (!wait_for([&] { return sh->heap_id.load() != 0; }, std::chrono::seconds(10))) {
    ::munmap(sh, sizeof(Shared));
    return res;
  }
  const uint64_t heap_id = sh->heap_id.load();

  // Survivor 0 is this process; the others are forked peers.
  std::vector<std::unique_ptr<Child>> peers;
  for (int i = 1; i < survivors; ++i) {
    auto cfg = cluster.runtime(static_cast<uint32_t>(20 + i));
    peers.push_back(std::make_unique<Child>([cfg, sh, heap_id, i, now_ns] {
      NodeRuntime prt(cfg);
      prt.add_failure_listener([&](const FailureNotification& n) {
        if (n.heap_id == heap_id) sh->heard_at[i] = now_ns();
      });
      prt.map_heap(heap_id);
      sh->mapped.fetch_add(1);
      while (sh->release.load() == 0) std::this_thread::sleep_for(std::chrono::milliseconds(1));
      prt.unmap_heap(heap_id);
      return 0;
    }));
  }
  uint64_t token = rt.add_failure_listener([&](const FailureNotification& n) {
    if (n.heap_id == heap_id) sh->heard_at[0] = now_ns();
  });
  rt.map_heap(heap_id);
  sh->mapped.fetch_add(1);
  wait_for([&] { return sh->mapped.load() == survivors; }, std::chrono::seconds(10));

  sh->killed_at = now_ns();
  victim.kill();
  const auto limit = std::chrono::duration_cast<std::chrono::milliseconds>(4 * res.lease_term) + std::chrono::milliseconds(100);
  wait_for([&] {
    for (int i = 0; i < survivors; ++i)
      if (sh->heard_at[i].load() == 0) return false;
    return true;
  }, limit);
  res.all_notified = true;
  for (int i = 0; i < survivors; ++i) {
    const int64_t t = sh->heard_at[i].load();
    if (t == 0) {
      res.all_notified = false;
      continue;
    }
    res.latencies.push_back(std::chrono::nanoseconds(t - sh->killed_at.load()));
  }
  rt.remove_failure_listener(token);
  sh->release = 1;
  for (auto& p : peers) p->wait(std::chrono::seconds(10));
  rt.unmap_heap(heap_id);
  res.reclaimed = wait_for([&] {
    auto live = cluster.core().live_heaps();
    return std::none_of(live.begin(), live.end(), [&](const HeapDescriptor& d) { return d.id == heap_id; });
  }, std::chrono::seconds(5));
  ::munmap(sh, sizeof(Shared));
  return res;
}

OrphanResult orphan_reclaim() {
  OrchestratorConfig cfg;
  cfg.pool_base = 0x7C0000000000ull;
  cfg.pool_span = 256 * MiB;
  cfg.renew_interval = std::chrono::seconds(1);
  cfg.missed_renewals = 3;
  Orchestrator o(cfg);
  const HolderId a{1, 1, 1}, b{2, 2, 1};
  const Nanos term = o.config().lease_term();
  RegisterRequest req;
  req.name = "/orphan";
  req.creator = a;
  req.initial_heap_size = 8 * MiB;
  auto reg = o.register_channel(req, Nanos{0});
  const uint64_t heap = reg.record.heaps[0].id;
  auto gb = o.attach_heap(heap, b, Nanos{0});

  OrphanResult r;
  // a lapses while b renews: b is told, the heap stays.
  o.renew_lease(gb.lease.id, term);
  auto notes = o.expire_sweep(term + Nanos{1});
  r.notified_before = notes.size() == 1 && notes[0].recipient == b && notes[0].failed == a && o.live_heaps().size() == 1;
  // b lapses too: the very next sweep reclaims heap and channel.
  o.expire_sweep(2 * term + Nanos{1});
  r.reclaimed_next_sweep = o.live_heaps().empty() && !o.lookup_channel("/orphan");
  r.pool_restored = o.pool_free_bytes() == cfg.pool_span;
  return r;
}

uint64_t list_checksum(const ListNode* n) {
  uint64_t h = 1469598103934665603ull;
  for (; n; n = n->next) h = (h ^ n->value) * 1099511628211ull;
  return h;
}

RoundTripResult list_round_trip(LocalCluster& cluster, Transport t, uint32_t flags, int nodes) {
  static std::atomic<int> counter{0};
  const std::string name = "/probe/list-" + std::to_string(::getpid()) + "-" + std::to_string(counter++);
  constexpr uint32_t kSum = function_id("probe.checksum");
  auto ch = Channel::create(name);
  ch->register_handler(kSum, [](CallContext& ctx) { ctx.respond(0, list_checksum(ctx.arg_as<ListNode>())); });
  ch->start();

  struct Shared {
    RoundTripResult r;
  };
  auto* sh = shared_block<Shared>();
  auto cfg = cluster.runtime(30, t == Transport::shared_memory);
  Child client([cfg, sh, name, flags, nodes, t] {
    NodeRuntime crt(cfg);
    auto c = Connection::connect(name);
    sh->r.transport_ok = c->transport() == t;
    Scope s = c->heap().create_scope(static_cast<size_t>(nodes) * sizeof(ListNode) + 4096);
    ListNode* head = nullptr;
    std::mt19937_64 rng(static_cast<uint64_t>(nodes));
    for (int i = 0; i < nodes; ++i) head = s.make<ListNode>(ListNode{rng(), head});
    sh->r.client = list_checksum(head);
    Response r = c->call(kSum, s, head, flags);
    sh->r.status = r.status;
    sh->r.server = r.ret;
    sh->r.completed = true;
    c->close();
    return 0;
  });
  const int rc = client.wait(std::chrono::seconds(60));
  RoundTripResult res = sh->r;
  res.completed = res.completed && rc == 0;
  ::munmap(sh, sizeof(Shared));
  ch->stop();
  return res;
}

SearchOracleResult cooldb_search_oracle(LocalCluster& cluster, uint64_t docs, int queries, uint64_t seed) {
  (void)cluster;
  using cooldb::json;
  static std::atomic<int> counter{0};
  const std::string name = "/probe/cooldb-" + std::to_string(::getpid()) + "-" + std::to_string(counter++);
  ChannelOptions co;
  co.heap_mode = HeapMode::channel_shared;
  co.heap_size = std::max<uint64_t>(256 * MiB, docs * 16 * KiB);
  auto ch = Channel::create(name, co);
  cooldb::Server server(*ch);
  ch->start();
  auto conn = Connection::connect(name);
  cooldb::Client c(*conn);

  SearchOracleResult res;
  res.docs = docs;
  std::vector<json> all;
  all.reserve(docs);
  for (uint64_t i = 0; i < docs; ++i) {
    all.push_back(cooldb::nobench_doc(i, docs, seed));
    c.put(cooldb::nobench_key(i), all.back());
  }
  if (c.count() != docs) ++res.mismatches;

  // Flat scan over the source documents, independent of the store's parser.
  auto lookup = [](const json& d, const std::vector<std::string>& path) -> std::optional<double> {
    const json* n = &d;
    for (const auto& p : path) {
      if (!n->is_object() || !n->contains(p)) return std::nullopt;
      n = &(*n)[p];
    }
    if (!n->is_number()) return std::nullopt;
    return n->get<double>();
  };
  const std::vector<std::vector<std::string>> fields{{"num"}, {"nested_obj", "num"}, {"thousandth"}, {"dyn1"}, {"missing"}};
  std::mt19937_64 rng(seed ^ 0xC001DBull);
  for (int q = 0; q < queries; ++q) {
    const auto& path = fields[rng() % fields.size()];
    const bool inclusive = q % 2 == 0;
    const auto lo = static_cast<int64_t>(rng() % docs);
    const auto hi = lo + static_cast<int64_t>(1 + rng() % 200);
    std::string f = path[0];
    for (size_t i = 1; i < path.size(); ++i) f += "." + path[i];
    const std::string text = inclusive ? f + " between " + std::to_string(lo) + " and " + std::to_string(hi)
                                       : f + " >= " + std::to_string(lo) + " and " + f + " < " + std::to_string(hi);
    std::set<std::string> want;
    for (uint64_t i = 0; i < docs; ++i) {
      auto v = lookup(all[i], path);
      if (v && *v >= static_cast<double>(lo) && (inclusive ? *v <= static_cast<double>(hi) : *v < static_cast<double>(hi)))
        want.insert(cooldb::nobench_key(i));
    }
    auto got = c.search(text);
    std::set<std::string> got_set(got.begin(), got.end());
    ++res.queries;
    if (got.size() != got_set.size() || got_set != want) ++res.mismatches;
    res.hits += want.size();
  }
  conn->close();
  ch->stop();
  return res;
}

}  // namespace rpcool::probes
