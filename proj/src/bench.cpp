#include "rpcool/bench.hpp"

#include <sys/mman.h>
#include <sys/utsname.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "rpcool/cluster.hpp"
#include "rpcool/sandbox.hpp"
#include "rpcool/seal.hpp"

namespace rpcool::bench {

using Clock = std::chrono::steady_clock;

namespace {

double us_since(Clock::time_point t0, Clock::time_point t1) {
  return std::chrono::duration<double, std::micro>(t1 - t0).count();
}

double percentile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return 0;
  auto rank = static_cast<size_t>(std::ceil(p * static_cast<double>(sorted.size())));
  return sorted[std::clamp<size_t>(rank, 1, sorted.size()) - 1];
}

/// Runs `op` n/10 times unmeasured, then n times measured.
/// `phase`, when given, receives the start and end of the measured part.
template <class F>
std::vector<double> measure(uint64_t n, F&& op, std::pair<Clock::time_point, Clock::time_point>* phase = nullptr) {
  for (uint64_t i = 0; i < n / 10; ++i) op();
  std::vector<double> out;
  out.reserve(n);
  const auto begin = Clock::now();
  for (uint64_t i = 0; i < n; ++i) {
    auto t0 = Clock::now();
    op();
    out.push_back(us_since(t0, Clock::now()));
  }
  if (phase) *phase = {begin, Clock::now()};
  return out;
}

void require_samples(const SuiteOptions& o) {
  if (o.samples < o.min_samples)
    throw Error(Errc::invalid_argument,
                "samples " + std::to_string(o.samples) + " below the minimum " + std::to_string(o.min_samples));
}

/// Orchestrator for a run: the one named by RPCOOL_ORCH, else an in-process one.
class Harness {
 public:
  Harness() {
    if (env("RPCOOL_ORCH")) {
      base_ = RuntimeConfig::from_env();
    } else {
      local_ = std::make_unique<LocalCluster>();
      base_ = local_->runtime();
    }
  }
  RuntimeConfig runtime(uint32_t node, bool pool_access) const {
    RuntimeConfig r = base_;
    r.node_id = node;
    r.pool_access = pool_access;
    return r;
  }

 private:
  std::unique_ptr<LocalCluster> local_;
  RuntimeConfig base_;
};

std::string unique_name(std::string_view stem) {
  static std::atomic<uint32_t> n{0};
  return "/bench/" + std::string(stem) + "-" + std::to_string(::getpid()) + "-" + std::to_string(n++);
}

void write_all(int fd, const std::string& s) {
  size_t off = 0;
  while (off < s.size()) {
    ssize_t w = ::write(fd, s.data() + off, s.size() - off);
    if (w < 0 && errno == EINTR) continue;
    if (w <= 0) return;
    off += static_cast<size_t>(w);
  }
}

std::string read_all(int fd) {
  std::string out;
  char buf[4096];
  for (;;) {
    ssize_t r = ::read(fd, buf, sizeof buf);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) break;
    out.append(buf, static_cast<size_t>(r));
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::string fixed(double v, int digits = 3) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace

Row summarize(std::string name, const std::vector<double>& samples_us, std::string transport, std::string flags,
              double wall_seconds) {
  Row r{std::move(name), 0, 0, 0, 0, std::move(transport), std::move(flags), samples_us.size()};
  if (samples_us.empty()) return r;
  std::vector<double> s = samples_us;
  std::sort(s.begin(), s.end());
  r.mean_us = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  r.p50_us = percentile(s, 0.50);
  r.p99_us = percentile(s, 0.99);
  if (wall_seconds > 0) r.throughput = static_cast<double>(s.size()) / wall_seconds;
  return r;
}

const Row* Report::find(std::string_view name, std::string_view transport, std::string_view flags) const {
  for (const auto& r : rows)
    if (r.name == name && (transport.empty() || r.transport == transport) && (flags.empty() || r.flags == flags))
      return &r;
  return nullptr;
}

void Report::append(const Report& other) {
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
  for (const auto& [k, v] : other.metadata) metadata[k] = v;
}

std::map<std::string, std::string> host_metadata() {
  std::map<std::string, std::string> m;
  utsname u{};
  if (::uname(&u) == 0) {
    m["host"] = u.nodename;
    m["kernel"] = std::string(u.sysname) + " " + u.release;
    m["machine"] = u.machine;
  }
  m["cpus"] = std::to_string(std::thread::hardware_concurrency());
  m["page_size"] = std::to_string(host_page_size());
  m["sandbox_mode"] = std::string(to_string(SandboxManager::instance().mode()));
  return m;
}

json to_json(const Report& r) {
  json rows = json::array();
  for (const auto& x : r.rows)
    rows.push_back({{"name", x.name},
                    {"mean_us", x.mean_us},
                    {"p50_us", x.p50_us},
                    {"p99_us", x.p99_us},
                    {"throughput_ops", x.throughput},
                    {"transport", x.transport},
                    {"flags", x.flags},
                    {"samples", x.samples}});
  return {{"rows", rows}, {"metadata", r.metadata}};
}

Report report_from_json(const json& j) {
  Report r;
  try {
    for (const auto& x : j.at("rows"))
      r.rows.push_back(Row{x.at("name").get<std::string>(), x.at("mean_us").get<double>(), x.at("p50_us").get<double>(),
                           x.at("p99_us").get<double>(), x.at("throughput_ops").get<double>(),
                           x.at("transport").get<std::string>(), x.at("flags").get<std::string>(),
                           x.at("samples").get<uint64_t>()});
    if (j.contains("metadata")) r.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("bad report: ") + e.what());
  }
  return r;
}

Format parse_format(std::string_view s) {
  if (s == "csv") return Format::csv;
  if (s == "md" || s == "markdown") return Format::markdown;
  throw Error(Errc::invalid_argument, "format must be csv or md");
}

std::string render_csv(const Report& r) {
  std::string out = "name,mean_us,p50_us,p99_us,throughput_ops,transport,flags,samples\n";
  for (const auto& x : r.rows)
    out += csv_field(x.name) + "," + fixed(x.mean_us) + "," + fixed(x.p50_us) + "," + fixed(x.p99_us) + "," +
           fixed(x.throughput, 1) + "," + csv_field(x.transport) + "," + csv_field(x.flags) + "," +
           std::to_string(x.samples) + "\n";
  return out;
}

std::string render_markdown(const Report& r) {
  std::string out =
      "| Operation | Mean (us) | p50 (us) | p99 (us) | Throughput (ops/s) | Transport | Mode | Samples |\n"
      "|---|---:|---:|---:|---:|---|---|---:|\n";
  for (const auto& x : r.rows)
    out += "| " + x.name + " | " + fixed(x.mean_us) + " | " + fixed(x.p50_us) + " | " + fixed(x.p99_us) + " | " +
           (x.throughput > 0 ? fixed(x.throughput, 1) : std::string("-")) + " | " + x.transport + " | " + x.flags +
           " | " + std::to_string(x.samples) + " |\n";
  if (!r.metadata.empty()) {
    out += "\n";
    for (const auto& [k, v] : r.metadata) out += "- " + k + ": " + v + "\n";
  }
  return out;
}

void emit(const Report& r, Format f, const std::string& path, bool allow_empty) {
  if (r.rows.empty() && !allow_empty) throw Error(Errc::empty_report, "report has no rows");
  const std::string text = f == Format::csv ? render_csv(r) : render_markdown(r);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::unwritable_path, "cannot open " + path);
  out << text;
  out.flush();
  if (!out) throw Error(Errc::unwritable_path, "cannot write " + path);
}

// No-op RPCs ---------------------------------------------------------------------

namespace {

constexpr uint32_t kNoopFid = function_id("bench.noop");

Row noop_client(const NoopOptions& o, const std::string& channel) {
  ConnectOptions co;
  co.transport = o.transport;
  auto c = Connection::connect(channel, co);
  const uint32_t clients = std::max<uint32_t>(o.clients, 1);
  std::vector<std::vector<double>> per(clients);
  std::vector<std::pair<Clock::time_point, Clock::time_point>> phase(clients);
  auto worker = [&](uint32_t k) {
    const uint64_t n = o.samples / clients + (k < o.samples % clients ? 1 : 0);
    if (o.secure) {
      Scope s = c->heap().create_scope(64);
      auto* arg = s.make<uint64_t>(k);
      per[k] = measure(n, [&] {
        Response r = c->call(kNoopFid, s, arg, kFlagSealed | kFlagSandbox);
        if (!r.ok()) throw Error(Errc::handler_failed, "noop failed with status " + std::to_string(r.status));
      }, &phase[k]);
      s.destroy();
    } else {
      per[k] = measure(n, [&] {
        Response r = c->call(kNoopFid);
        if (!r.ok()) throw Error(Errc::handler_failed, "noop failed with status " + std::to_string(r.status));
      }, &phase[k]);
    }
  };
  if (clients == 1) {
    worker(0);
  } else {
    std::vector<std::thread> ts;
    for (uint32_t k = 0; k < clients; ++k) ts.emplace_back(worker, k);
    for (auto& t : ts) t.join();
  }
  std::vector<double> all;
  auto first = phase[0].first, last = phase[0].second;
  for (uint32_t k = 0; k < clients; ++k) {
    all.insert(all.end(), per[k].begin(), per[k].end());
    first = std::min(first, phase[k].first);
    last = std::max(last, phase[k].second);
  }
  Row row = summarize(std::string(kNoop), all, o.transport == Transport::shared_memory ? "shm" : "fallback",
                      o.secure ? "secure" : "plain", us_since(first, last) / 1e6);
  c->close();
  return row;
}

}  // namespace

Report bench_noop(const NoopOptions& o) {
  Report rep;
  if (o.samples == 0) return rep;
  require_samples(o);
  Harness h;
  NodeRuntime rt(h.runtime(1, true));
  const std::string name = unique_name("noop");
  auto ch = Channel::create(name);
  ch->register_handler(kNoopFid, [](CallContext&) {});
  ch->start();

  int fds[2];
  if (::pipe(fds) != 0) throw_errno(Errc::bench_failed, "pipe");
  const RuntimeConfig ccfg = h.runtime(2, o.transport == Transport::shared_memory);
  Child child([&, ccfg] {
    ::close(fds[0]);
    json out;
    try {
      NodeRuntime crt(ccfg);
      Row r = noop_client(o, name);
      Report one;
      one.rows.push_back(r);
      out = to_json(one);
    } catch (const std::exception& e) {
      out = {{"error", e.what()}};
    }
    write_all(fds[1], out.dump());
    ::close(fds[1]);
    return 0;
  });
  ::close(fds[1]);
  const std::string text = read_all(fds[0]);
  ::close(fds[0]);
  const int rc = child.wait(std::chrono::hours(1));
  ch->stop();
  json j = json::parse(text, nullptr, false);
  if (rc != 0 || j.is_discarded()) throw Error(Errc::bench_failed, "noop client exited with " + std::to_string(rc));
  if (j.contains("error")) throw Error(Errc::bench_failed, "noop client: " + j["error"].get<std::string>());
  rep = report_from_json(j);
  rep.metadata = host_metadata();
  rep.metadata["noop_clients"] = std::to_string(std::max<uint32_t>(o.clients, 1));
  rep.metadata["noop_outstanding_per_client"] = "1";
  return rep;
}

// Micro suite --------------------------------------------------------------------

Report bench_micro(const SuiteOptions& o) {
  require_samples(o);
  Harness h;
  NodeRuntime rt(h.runtime(1, true));
  const uint64_t ps = host_page_size();
  constexpr uint64_t kBig = 1024;
  constexpr uint32_t kBatchSmall = 1024;
  constexpr uint32_t kBatchBig = 16;
  MappedHeap& mh = rt.allocate_heap(round_up(kBig * ps * (kBatchBig + 4) + 64 * MiB, 64 * MiB));
  Heap heap = Heap::format(mh.addr(0), mh.size(), mh.page_size);
  const uint64_t heap_id = mh.desc.id;

  const uint32_t ring_cap = 4096;
  void* ring_pages = heap.allocate_pages(SealRing::bytes_for(ring_cap, ps) / ps);
  auto sender = SealRing::in_heap(SealRole::sender, heap_id, ring_pages, ring_cap);
  auto receiver = SealRing::in_heap(SealRole::receiver, heap_id, ring_pages, ring_cap);

  Report rep;
  rep.metadata = host_metadata();
  rep.metadata["batch_threshold_1_page"] = std::to_string(kBatchSmall);
  rep.metadata["batch_threshold_1024_pages"] = std::to_string(kBatchBig);
  auto add = [&](std::string_view name, const std::vector<double>& s) {
    rep.rows.push_back(summarize(std::string(name), s, "local", "-"));
  };
  auto touch = [&](void* p, uint64_t bytes) { std::memset(p, 0x5A, bytes); };

  // Cached sandboxes: after the first use the slot stays bound to the range.
  for (auto [name, pages] : {std::pair{kSandboxCached1, uint64_t{1}}, std::pair{kSandboxCached1024, kBig}}) {
    void* p = heap.allocate_pages(pages);
    touch(p, pages * ps);
    AddrRange r{reinterpret_cast<uintptr_t>(p), pages * ps};
    Sandbox::begin(r).end();
    const uint64_t fast0 = SandboxManager::instance().fast_acquisitions();
    add(name, measure(o.samples, [&] { Sandbox::begin(r).end(); }));
    if (SandboxManager::instance().fast_acquisitions() - fast0 < o.samples)
      throw Error(Errc::sandbox_unavailable, "cached sandbox was evicted during measurement");
  }

  // Uncached: cycle through more ranges than there are slots.
  {
    std::vector<AddrRange> ranges;
    for (uint32_t i = 0; i < 2 * SandboxManager::instance().cached_slots() + 4; ++i) {
      void* p = heap.allocate_pages(1);
      touch(p, ps);
      ranges.push_back({reinterpret_cast<uintptr_t>(p), ps});
    }
    size_t next = 0;
    const uint64_t slow0 = SandboxManager::instance().slow_acquisitions();
    add(kSandboxUncached, measure(o.samples, [&] {
          Sandbox::begin(ranges[next]).end();
          next = (next + 1) % ranges.size();
        }));
    if (SandboxManager::instance().slow_acquisitions() - slow0 < o.samples)
      throw Error(Errc::sandbox_unavailable, "uncached sandbox hit a cached slot");
  }

  // Standard seal + release, one permission change each way.
  for (auto [name, pages] : {std::pair{kSealStandard1, uint64_t{1}}, std::pair{kSealStandard1024, kBig}}) {
    Scope s = heap.create_scope(pages * ps - kScopeHeader);
    if (s.pages() != pages) throw Error(Errc::bench_failed, "unexpected scope size");
    touch(reinterpret_cast<void*>(s.range().start + kScopeHeader), pages * ps - kScopeHeader);
    add(name, measure(o.samples, [&] {
          SealTicket t = sender->seal(s);
          receiver->mark_complete(t.index, t.epoch);
          sender->release(t.index);
        }));
    s.destroy();
  }

  // Batched release: each sample is its batch's cost divided by the batch size.
  for (auto [name, pages, threshold] :
       {std::tuple{kSealBatch1, uint64_t{1}, kBatchSmall}, std::tuple{kSealBatch1024, kBig, kBatchBig}}) {
    ScopePool pool(heap, *sender, pages * ps - kScopeHeader, threshold, threshold);
    auto one = [&](bool first) {
      Scope s = pool.acquire();
      if (first) touch(reinterpret_cast<void*>(s.range().start + kScopeHeader), s.range().len - kScopeHeader);
      SealTicket t = pool.seal(s);
      receiver->mark_complete(t.index, t.epoch);
      pool.defer_release(s, t);
    };
    for (uint32_t i = 0; i < threshold; ++i) one(true);  // warmup batch, populates every scope
    pool.flush();
    std::vector<double> samples;
    samples.reserve(o.samples);
    while (samples.size() < o.samples) {
      auto t0 = Clock::now();
      for (uint32_t i = 0; i < threshold; ++i) one(false);
      pool.flush();
      const double per = us_since(t0, Clock::now()) / threshold;
      for (uint32_t i = 0; i < threshold && samples.size() < o.samples; ++i) samples.push_back(per);
    }
    add(name, samples);
  }

  // Byte copy of the same amount of data into the heap.
  for (auto [name, pages] : {std::pair{kCopy1, uint64_t{1}}, std::pair{kCopy1024, kBig}}) {
    std::vector<uint8_t> src(pages * ps);
    std::mt19937_64 rng(o.seed);
    for (auto& b : src) b = static_cast<uint8_t>(rng());
    void* dst = heap.allocate_pages(pages);
    add(name, measure(o.samples, [&] {
          std::memcpy(dst, src.data(), src.size());
          asm volatile("" ::"r"(dst) : "memory");
        }));
    heap.free_pages(dst);
  }
  rt.unmap_heap(heap_id);
  return rep;
}

// CoolDB -------------------------------------------------------------------------

Report bench_cooldb(const CoolDbOptions& o) {
  Harness h;
  NodeRuntime rt(h.runtime(1, true));
  ChannelOptions co;
  co.heap_mode = HeapMode::channel_shared;
  co.heap_size = std::max<uint64_t>(512 * MiB, round_up(o.docs * 16 * KiB, 64 * MiB));
  const std::string name = unique_name("cooldb");
  auto ch = Channel::create(name, co);
  cooldb::Server server(*ch);
  ch->start();
  auto conn = Connection::connect(name);
  cooldb::Client client(*conn, o.secure);
  const std::string flags = o.secure ? "secure" : "plain";

  Report rep;
  rep.metadata = host_metadata();
  rep.metadata["cooldb_docs"] = std::to_string(o.docs);
  rep.metadata["cooldb_queries"] = std::to_string(o.queries);
  auto timed_row = [&](std::string row, uint64_t n, auto&& op) {
    std::vector<double> s;
    s.reserve(n);
    auto w0 = Clock::now();
    for (uint64_t i = 0; i < n; ++i) {
      auto t0 = Clock::now();
      op(i);
      s.push_back(us_since(t0, Clock::now()));
    }
    rep.rows.push_back(summarize(std::move(row), s, "shm", flags, us_since(w0, Clock::now()) / 1e6));
  };

  timed_row("cooldb put", o.docs,
            [&](uint64_t i) { client.put(cooldb::nobench_key(i), cooldb::nobench_doc(i, o.docs, o.seed)); });
  std::mt19937_64 rng(o.seed);
  timed_row("cooldb get", o.docs, [&](uint64_t) { client.get(cooldb::nobench_key(rng() % std::max<uint64_t>(o.docs, 1))); });
  const auto queries = cooldb::nobench_queries(o.queries, o.docs, o.seed);
  uint64_t hits = 0;
  timed_row("cooldb search", queries.size(), [&](uint64_t i) { hits += client.search(queries[i]).size(); });
  rep.metadata["cooldb_search_hits"] = std::to_string(hits);

  for (auto w : o.ycsb) {
    const std::string label = std::string("ycsb ") + "ABCD"[static_cast<int>(w)];
    const std::string prefix = label + "/";
    for (uint64_t k = 0; k < o.docs; ++k) client.put(prefix + std::to_string(k), cooldb::ycsb_record(k, o.seed));
    auto ops = cooldb::ycsb_ops(w, o.docs, o.ycsb_ops, o.seed);
    uint64_t version = 0;
    timed_row(label, ops.size(), [&](uint64_t i) {
      const auto& op = ops[i];
      const std::string key = prefix + std::to_string(op.key);
      if (op.kind == cooldb::YcsbOpKind::read) {
        try {
          client.get(key);
        } catch (const Error& e) {
          if (e.code() != Errc::missing_key) throw;
        }
      } else {
        client.put(key, cooldb::ycsb_record(op.key, o.seed + ++version));
      }
    });
  }
  conn->close();
  ch->stop();
  return rep;
}

// Hostile clients -----------------------------------------------------------------

namespace {

constexpr uint32_t kPeekFid = function_id("bench.peek");
constexpr uint64_t kSentinel = 0x5EC2E75EC2E75EC2ull;
constexpr size_t kPeekBytes = 64;

struct Peek {
  uint64_t addr;
};

}  // namespace

SecurityResult bench_security(uint64_t hostile_calls, uint64_t seed) {
  Harness h;
  NodeRuntime rt(h.runtime(1, true));
  const uint64_t ps = host_page_size();

  void* secret = ::mmap(nullptr, ps, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
  if (secret == MAP_FAILED) throw_errno(Errc::bench_failed, "mmap secret page");
  for (uint64_t i = 0; i < ps / 8; ++i) static_cast<uint64_t*>(secret)[i] = kSentinel;
  const AddrRange secret_range{reinterpret_cast<uintptr_t>(secret), ps};
  SandboxManager::instance().register_private(secret_range);

  const std::string name = unique_name("security");
  auto ch = Channel::create(name);
  // Reads kPeekBytes at the requested address and returns them.
  ch->register_handler(kPeekFid, [](CallContext& ctx) {
    std::array<uint8_t, kPeekBytes> buf;
    std::memcpy(buf.data(), reinterpret_cast<const void*>(ctx.arg_as<Peek>()->addr), buf.size());
    ctx.after_sandbox([&ctx, buf] {
      ctx.respond(0, ShmString::create(ctx.heap(), std::string_view(reinterpret_cast<const char*>(buf.data()), buf.size())));
    });
  });
  ch->start();
  auto c = Connection::connect(name);
  Heap& heap = c->heap();

  // Another client's data in the same heap, also sentinel-filled.
  auto* other = static_cast<uint64_t*>(heap.allocate_pages(1));
  for (uint64_t i = 0; i < ps / 8; ++i) other[i] = kSentinel;
  const uintptr_t pool_hole = heap.base() + heap.size() + 1024 * MiB;

  Scope scope = heap.create_scope(ps - kScopeHeader);
  auto* probe = scope.make<Peek>();
  auto leaked = [&](const Response& r) {
    if (!r.ok() || r.ret == 0) return false;
    auto v = r.as<ShmString>()->view();
    for (size_t i = 0; i + 8 <= v.size(); ++i) {
      uint64_t w;
      std::memcpy(&w, v.data() + i, 8);
      if (w == kSentinel) return true;
    }
    return false;
  };

  SecurityResult res;
  std::mt19937_64 rng(seed);
  const std::array<uintptr_t, 4> targets{secret_range.start, reinterpret_cast<uintptr_t>(other), pool_hole,
                                         heap.base() + heap.data_start()};
  auto t0 = Clock::now();
  for (uint64_t i = 0; i < hostile_calls; ++i) {
    probe->addr = targets[i % targets.size()] + (rng() % (ps / 8)) * 8 % (ps - kPeekBytes);
    Response r = c->call(kPeekFid, scope, probe, kFlagSealed | kFlagSandbox);
    ++res.attempts;
    if (leaked(r)) ++res.leaks;
    if (r.error() == Errc::sandbox_violation) ++res.violations;
    else ++res.other;
    if (r.ok() && r.ret) heap.deallocate(r.as<ShmString>());
  }
  res.seconds = us_since(t0, Clock::now()) / 1e6;

  // Benign: peek at bytes inside the scope itself.
  auto* own = static_cast<uint8_t*>(scope.allocate(kPeekBytes));
  for (size_t i = 0; i < kPeekBytes; ++i) own[i] = static_cast<uint8_t>(i);
  probe->addr = reinterpret_cast<uintptr_t>(own);
  Response r = c->call(kPeekFid, scope, probe, kFlagSealed | kFlagSandbox);
  res.benign_ok = r.ok() && r.ret != 0 &&
                  r.as<ShmString>()->view() == std::string_view(reinterpret_cast<const char*>(own), kPeekBytes);

  scope.destroy();
  c->close();
  ch->stop();
  SandboxManager::instance().unregister_private(secret_range);
  ::munmap(secret, ps);
  return res;
}

}  // namespace rpcool::bench
