// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "probes.hpp"
#include "rpcool/bench.hpp"
#include "rpcool/busy_wait.hpp"

using namespace rpcool;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned limits.
constexpr double kSealSeconds = 60;
constexpr double kSecuritySeconds = 120;
constexpr double kCoherenceSeconds = 120;
constexpr uint64_t kHostileCalls = 1000;
constexpr double kCachedVsUncached = 5;   // cached median * 5 < uncached median
constexpr double kCachedSizeSpread = 2;   // 1 vs 1024 pages within 2x
constexpr double kSealVsCopy = 0.5;       // seal 1024 < 0.5 x copy 1024
constexpr int kCoherenceOps = 10000;
constexpr int kAllocatorOps = 100000;
constexpr int kListNodes = 1000;
constexpr uint64_t kSearchDocs = 10000;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Outcome seal_safety() {
  const auto t0 = Clock::now();
  LocalCluster cluster;
  NodeRuntime rt(cluster.runtime(1));
  probes::SealBench b(rt, 64 * MiB);
  bool pass = true;
  std::string d;
  for (uint64_t pages : {1, 2, 16, 1024}) {
    auto r = probes::probe_seal(b, pages, pages >= 1024 ? 5 : 50);
    pass &= r.stores > 0 && r.faulted == r.stores && r.took_effect == 0 && r.refused == r.early_releases &&
            r.writable_after == r.probes_after;
    d += fmt("%lup: %lu/%lu stores faulted, %lu took effect, %lu/%lu early releases refused; ", pages, r.faulted,
             r.stores, r.took_effect, r.refused, r.early_releases);
  }
  const double s = seconds_since(t0);
  pass &= s < kSealSeconds;
  return {pass, d + fmt("%.2fs", s)};
}

Outcome sandbox_confinement() {
  auto r = bench::bench_security(kHostileCalls, 1);
  bool pass = r.attempts == kHostileCalls && r.violations == kHostileCalls && r.leaks == 0 && r.other == 0 &&
              r.benign_ok && r.seconds < kSecuritySeconds;
  return {pass, fmt("%lu/%lu violations, %lu leaks, %lu other, benign call %s, %.2fs", r.violations, r.attempts,
                    r.leaks, r.other, r.benign_ok ? "ok" : "FAILED", r.seconds)};
}

const bench::Row& row(const bench::Report& r, std::string_view name) {
  const bench::Row* x = r.find(name);
  if (x == nullptr) throw Error(Errc::bench_failed, "missing row " + std::string(name));
  return *x;
}

Outcome cached_sandbox(const bench::Report& micro) {
  const double c1 = row(micro, bench::kSandboxCached1).p50_us;
  const double c1024 = row(micro, bench::kSandboxCached1024).p50_us;
  const double un = row(micro, bench::kSandboxUncached).p50_us;
  const double spread = std::max(c1, c1024) / std::min(c1, c1024);
  bool pass = c1 * kCachedVsUncached < un && c1024 * kCachedVsUncached < un && spread <= kCachedSizeSpread;
  return {pass, fmt("cached p50 %.3fus (1p) %.3fus (1024p), uncached %.3fus, ratio %.1fx, size spread %.2fx", c1, c1024,
                    un, un / std::max(c1, c1024), spread)};
}

Outcome seal_vs_copy(const bench::Report& micro) {
  const double seal = row(micro, bench::kSealStandard1024).p50_us;
  const double copy = row(micro, bench::kCopy1024).p50_us;
  const double std1 = row(micro, bench::kSealStandard1).p50_us;
  const double batch1 = row(micro, bench::kSealBatch1).p50_us;
  const double std1024 = row(micro, bench::kSealStandard1024).p50_us / 1024;
  const double batch1024 = row(micro, bench::kSealBatch1024).p50_us / 1024;
  bool pass = seal < kSealVsCopy * copy && batch1 < std1;
  return {pass, fmt("seal+release 1024p %.2fus vs copy %.2fus (%.3fx); per-page release 1p batch %.3fus vs standard "
                    "%.3fus (1024p rows: batch %.4fus vs standard %.4fus)",
                    seal, copy, seal / copy, batch1, std1, batch1024, std1024)};
}

Outcome transport_ordering(uint64_t samples) {
  auto run = [&](Transport t, bool secure) {
    bench::NoopOptions o;
    o.samples = samples;
    o.min_samples = samples;
    o.transport = t;
    o.secure = secure;
    auto r = bench::bench_noop(o);
    return r.rows.at(0).p50_us;
  };
  const double shm = run(Transport::shared_memory, false);
  const double fb = run(Transport::fallback, false);
  const double sec = run(Transport::shared_memory, true);
  bool pass = shm < fb && sec > shm;
  return {pass, fmt("noop p50: shm %.2fus, fallback %.2fus, shm secure %.2fus", shm, fb, sec)};
}

Outcome coherence() {
  LocalCluster cluster;
  auto r = probes::run_coherence(cluster, kCoherenceOps, 20241019);
  bool pass = r.completed && r.divergences == 0 && r.race_rounds > 0 && r.seconds < kCoherenceSeconds;
  return {pass, fmt("%lu ops, %lu race rounds, %lu reads checked, %lu divergences, %lu page faults, %.2fs", r.ops,
                    r.race_rounds, r.reads_checked, r.divergences, r.faults, r.seconds)};
}

Outcome governance() {
  LocalCluster cluster;
  NodeRuntime rt(cluster.runtime(1));
  auto crash = probes::crash_notification(cluster, 3);
  bool in_time = crash.all_notified && crash.latencies.size() == crash.survivors;
  double worst = 0;
  for (auto l : crash.latencies) {
    in_time &= l < 2 * crash.lease_term;
    worst = std::max(worst, std::chrono::duration<double, std::milli>(l).count());
  }
  auto q = probes::quota_traces(20, 2000);
  auto o = probes::orphan_reclaim();
  bool pass = in_time && crash.reclaimed && q.over_quota == 0 && q.mismatches == 0 && o.notified_before &&
              o.reclaimed_next_sweep && o.pool_restored;
  return {pass, fmt("%lu co-holders notified, worst %.0fms vs limit %.0fms; quota: %lu steps, %lu over, %lu oracle "
                    "mismatches; orphan reclaimed on next sweep: %s",
                    crash.latencies.size(), worst, 2 * std::chrono::duration<double, std::milli>(crash.lease_term).count(),
                    q.steps, q.over_quota, q.mismatches, o.reclaimed_next_sweep && o.pool_restored ? "yes" : "no")};
}

Outcome allocator() {
  LocalCluster cluster;
  NodeRuntime rt(cluster.runtime(1));
  auto a = probes::cross_process_allocator(cluster, 4, kAllocatorOps, 11);
  MappedHeap& mh = rt.allocate_heap(32 * MiB);
  Heap h = Heap::format(mh.addr(0), mh.size(), mh.page_size);
  auto s = probes::scope_trace(h, 13, 300);
  bool pass = a.completed && a.problems == 0 && a.overlaps == 0 && a.accounted && s.escapes == 0 && s.allocations > 0;
  return {pass, fmt("%lu ops in 4 processes: %lu overlaps, %lu oracle failures, %lu survivors accounted %s; scopes: "
                    "%lu allocations, %lu escapes",
                    a.ops, a.overlaps, a.problems, a.survivors, a.accounted ? "yes" : "no", s.allocations, s.escapes)};
}

Outcome end_to_end() {
  LocalCluster cluster;
  NodeRuntime rt(cluster.runtime(1));
  bool pass = true;
  std::string d;
  for (auto t : {Transport::shared_memory, Transport::fallback}) {
    for (uint32_t flags : {0u, uint32_t{kFlagSealed | kFlagSandbox}}) {
      auto r = probes::list_round_trip(cluster, t, flags, kListNodes);
      const bool ok = r.completed && r.transport_ok && r.status == 0 && r.client == r.server;
      pass &= ok;
      d += fmt("%s%s %s; ", t == Transport::shared_memory ? "shm" : "fallback", flags ? " secure" : "", ok ? "match" : "MISMATCH");
    }
  }
  auto s = probes::cooldb_search_oracle(cluster, kSearchDocs, 100, 2024);
  pass &= s.mismatches == 0 && s.queries == 100 && s.hits > 0;
  return {pass, d + fmt("CoolDB %lu docs: %lu/%lu queries match the flat scan (%lu hits)", s.docs, s.queries - s.mismatches,
                        s.queries, s.hits)};
}

Outcome busy_wait() {
  using std::chrono::microseconds;
  const auto a = next_sleep(0.20), b = next_sleep(0.40), c = next_sleep(0.75);
  bool pass = a == microseconds(0) && b == microseconds(5) && c == microseconds(150);
  return {pass, fmt("0.20 -> %ldus, 0.40 -> %ldus, 0.75 -> %ldus", static_cast<long>(a.count()),
                    static_cast<long>(b.count()), static_cast<long>(c.count()))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  uint64_t samples = 100000;
  std::set<int> only;
  app.add_option("--samples", samples, "Measured operations per benchmark row");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"seal safety", seal_safety},
      {"sandbox confinement", sandbox_confinement},
      {"cached sandbox economics", nullptr},
      {"seal vs copy", nullptr},
      {"transport ordering", [&] { return transport_ordering(samples); }},
      {"coherence oracle", coherence},
      {"lease and quota governance", governance},
      {"allocator soundness", allocator},
      {"end-to-end round trip", end_to_end},
      {"busy-wait policy", busy_wait},
  };
  std::optional<bench::Report> micro;
  auto micro_report = [&]() -> const bench::Report& {
    if (!micro) {
      bench::SuiteOptions o;
      o.samples = samples;
      o.min_samples = samples;
      micro = bench::bench_micro(o);
    }
    return *micro;
  };

  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(n)) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      if (n == 3) o = cached_sandbox(micro_report());
      else if (n == 4) o = seal_vs_copy(micro_report());
      else o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", n, criteria[i].first.c_str(), o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
