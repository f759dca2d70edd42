#include <gtest/gtest.h>
#include <sys/mman.h>
#include <sys/socket.h>

#include <atomic>
#include <random>
#include <set>
#include <thread>

#include "rpcool/busy_wait.hpp"
#include "rpcool/config.hpp"
#include "rpcool/error.hpp"
#include "rpcool/ring.hpp"
#include "rpcool/wire.hpp"
#include "support.hpp"

using namespace rpcool;
using rpcool::testing::Child;

// Busy-wait policy -----------------------------------------------------------------

TEST(BusyWait, PolicyPoints) {
  EXPECT_EQ(next_sleep(0.20), Micros(0));
  EXPECT_EQ(next_sleep(0.40), Micros(5));
  EXPECT_EQ(next_sleep(0.75), Micros(150));
}

TEST(BusyWait, StepBoundariesAndClamping) {
  EXPECT_EQ(next_sleep(0.0), Micros(0));
  EXPECT_EQ(next_sleep(0.2499), Micros(0));
  EXPECT_EQ(next_sleep(0.25), Micros(5));
  EXPECT_EQ(next_sleep(0.4999), Micros(5));
  EXPECT_EQ(next_sleep(0.50), Micros(150));
  EXPECT_EQ(next_sleep(1.0), Micros(150));
  EXPECT_EQ(next_sleep(-1.0), Micros(0));
  EXPECT_EQ(next_sleep(7.0), Micros(150));
}

TEST(BusyWait, MonotoneInLoad) {
  Micros prev{0};
  for (int i = 0; i <= 1000; ++i) {
    Micros s = next_sleep(i / 1000.0);
    EXPECT_GE(s, prev);
    prev = s;
  }
}

TEST(BusyWait, CustomThresholds) {
  BusyWaitConfig c;
  c.low_load = 0.1;
  c.high_load = 0.9;
  c.sleep_mid = Micros(7);
  c.sleep_high = Micros(70);
  EXPECT_EQ(next_sleep(0.05, c), Micros(0));
  EXPECT_EQ(next_sleep(0.5, c), Micros(7));
  EXPECT_EQ(next_sleep(0.95, c), Micros(70));
}

TEST(BusyWait, LoadMeterStaysInRange) {
  CpuLoadMeter m(std::chrono::milliseconds(5));
  auto end = std::chrono::steady_clock::now() + std::chrono::milliseconds(30);
  std::atomic<uint64_t> spin{0};
  while (std::chrono::steady_clock::now() < end) ++spin;
  double l = m.load();
  EXPECT_GE(l, 0.0);
  EXPECT_LE(l, 1.0);
}

// Config -------------------------------------------------------------------------

TEST(Config, ParsesSizes) {
  EXPECT_EQ(parse_size("4096"), 4096u);
  EXPECT_EQ(parse_size("64KiB"), 64 * KiB);
  EXPECT_EQ(parse_size("256 MiB"), 256 * MiB);
  EXPECT_EQ(parse_size("1TiB"), TiB);
  EXPECT_EQ(parse_size("0x7C00_0000_0000"), 0x7C0000000000ull);
  EXPECT_FALSE(parse_size(""));
  EXPECT_FALSE(parse_size("12 parsecs"));
  EXPECT_FALSE(parse_size("MiB"));
}

TEST(Config, ParsesAdminFile) {
  auto c = OrchestratorConfig::from_string(R"(
# pool
[pool]
base = 0x7D0000000000
span = 64GiB
[quota]
default = 1GiB
node.3 = 2GiB
node.3.pid.77 = 16MiB
[lease]
renew_interval = 250ms
missed_renewals = 4
)");
  EXPECT_EQ(c.pool_base, 0x7D0000000000ull);
  EXPECT_EQ(c.pool_span, 64 * GiB);
  EXPECT_EQ(c.default_quota, GiB);
  EXPECT_EQ(c.node_quota.at(3), 2 * GiB);
  EXPECT_EQ((c.process_quota.at({3, 77})), 16 * MiB);
  EXPECT_EQ(c.renew_interval, std::chrono::milliseconds(250));
  EXPECT_EQ(c.lease_term(), std::chrono::milliseconds(1000));
}

TEST(Config, RejectsBadFiles) {
  for (const char* bad : {"nonsense", "unknown = 1", "[pool]\nspan = lots", "[lease]\nrenew_interval = 5",
                          "[lease]\nmissed_renewals = 0", "[pool]\nbase = 0x1001", "[pool\nspan = 1GiB"}) {
    try {
      OrchestratorConfig::from_string(bad);
      ADD_FAILURE() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::config_error) << bad;
    }
  }
  EXPECT_THROW(OrchestratorConfig::from_file("/nonexistent/rpcool.conf"), Error);
}

TEST(Config, RuntimeValidation) {
  RuntimeConfig r;
  EXPECT_NO_THROW(r.validate());
  r.protection_keys_cached = 15;
  EXPECT_THROW(r.validate(), Error);
  r = RuntimeConfig{};
  r.page_size = 3000;
  EXPECT_THROW(r.validate(), Error);
}

// Wire ---------------------------------------------------------------------------

TEST(Wire, FieldRoundTrip) {
  wire::Writer w;
  w.u8(0xAB).u16(0xBEEF).u32(0xDEADBEEF).u64(0x0123456789ABCDEFull).i64(-5).str("héllo");
  const auto& d = w.data();
  // Little-endian on the wire.
  EXPECT_EQ(d[1], 0xEF);
  EXPECT_EQ(d[2], 0xBE);
  wire::Reader r(d);
  EXPECT_EQ(r.u8(), 0xAB);
  EXPECT_EQ(r.u16(), 0xBEEF);
  EXPECT_EQ(r.u32(), 0xDEADBEEFu);
  EXPECT_EQ(r.u64(), 0x0123456789ABCDEFull);
  EXPECT_EQ(r.i64(), -5);
  EXPECT_EQ(r.str(), "héllo");
  EXPECT_NO_THROW(r.expect_end());
  EXPECT_THROW(r.u8(), Error);
}

TEST(Wire, FramesOverSocket) {
  int sv[2];
  ASSERT_EQ(::socketpair(AF_UNIX, SOCK_STREAM, 0, sv), 0);
  wire::Fd a(sv[0]), b(sv[1]);
  std::vector<uint8_t> payload{1, 2, 3, 4, 5};
  wire::write_frame(a.get(), wire::TypeWidth::u16, 7, payload);
  wire::write_frame(a.get(), wire::TypeWidth::u8, 3, {});
  auto enc = wire::encode_frame(wire::TypeWidth::u16, 7, payload);
  ASSERT_EQ(enc.size(), 4u + 2 + 5);
  EXPECT_EQ(enc[0], 7);  // length counts type + payload
  wire::Frame f;
  ASSERT_TRUE(wire::read_frame(b.get(), wire::TypeWidth::u16, f));
  EXPECT_EQ(f.type, 7);
  EXPECT_EQ(f.payload, payload);
  ASSERT_TRUE(wire::read_frame(b.get(), wire::TypeWidth::u8, f));
  EXPECT_EQ(f.type, 3);
  EXPECT_TRUE(f.payload.empty());
  a.reset();
  EXPECT_FALSE(wire::read_frame(b.get(), wire::TypeWidth::u8, f));
}

TEST(Wire, RejectsOversizedFrame) {
  int sv[2];
  ASSERT_EQ(::socketpair(AF_UNIX, SOCK_STREAM, 0, sv), 0);
  wire::Fd a(sv[0]), b(sv[1]);
  uint8_t hdr[6] = {0xFF, 0xFF, 0xFF, 0x7F, 1, 0};
  wire::write_all(a.get(), hdr);
  wire::Frame f;
  EXPECT_THROW(wire::read_frame(b.get(), wire::TypeWidth::u16, f), Error);
}

TEST(Wire, Endpoints) {
  auto e = wire::Endpoint::parse("127.0.0.1:7470");
  EXPECT_EQ(e.host, "127.0.0.1");
  EXPECT_EQ(e.port, 7470);
  EXPECT_THROW(wire::Endpoint::parse("nohost"), Error);
  EXPECT_THROW(wire::Endpoint::parse("h:99999"), Error);
  auto l = wire::tcp_listen({"127.0.0.1", 0});
  auto bound = wire::bound_endpoint(l.get());
  EXPECT_NE(bound.port, 0);
  auto c = wire::tcp_connect(bound);
  EXPECT_TRUE(c);
}

// Ring ---------------------------------------------------------------------------

namespace {

struct SharedMem {
  explicit SharedMem(size_t n) : size(n) {
    p = ::mmap(nullptr, n, PROT_READ | PROT_WRITE, MAP_SHARED | MAP_ANONYMOUS, -1, 0);
  }
  ~SharedMem() { ::munmap(p, size); }
  size_t size;
  void* p;
};

RpcMessage msg(uint64_t seq) {
  RpcMessage m;
  m.sequence = seq;
  m.function_id = static_cast<uint32_t>(seq * 7);
  m.arg = seq * 3;
  m.scope = {seq * 4096, 4096};
  m.seal_index = static_cast<uint32_t>(seq % 100);
  m.seal_epoch = seq + 1;
  m.call_slot = static_cast<uint32_t>(seq % 17);
  return m;
}

}  // namespace

TEST(Ring, FifoAndFields) {
  SharedMem mem(MessageRing::bytes_for(8));
  auto ring = MessageRing::create(mem.p, 8);
  for (uint64_t i = 1; i <= 8; ++i) ASSERT_TRUE(ring.try_push(msg(i)));
  EXPECT_FALSE(ring.try_push(msg(9)));
  for (uint64_t i = 1; i <= 8; ++i) {
    auto m = ring.try_pop();
    ASSERT_TRUE(m);
    auto w = msg(i);
    EXPECT_EQ(m->sequence, w.sequence);
    EXPECT_EQ(m->function_id, w.function_id);
    EXPECT_EQ(m->arg, w.arg);
    EXPECT_EQ(m->scope, w.scope);
    EXPECT_EQ(m->seal_index, w.seal_index);
    EXPECT_EQ(m->seal_epoch, w.seal_epoch);
    EXPECT_EQ(m->call_slot, w.call_slot);
  }
  EXPECT_FALSE(ring.try_pop());
  EXPECT_THROW(MessageRing::create(mem.p, 6), Error);
  auto again = MessageRing::attach(mem.p);
  EXPECT_EQ(again.capacity(), 8u);
  std::vector<uint8_t> junk(256, 0);
  EXPECT_THROW(MessageRing::attach(junk.data()), Error);
}

TEST(Ring, MpmcExactlyOnceThreads) {
  constexpr int kProducers = 4, kConsumers = 4;
  constexpr uint64_t kPer = 20000;
  SharedMem mem(MessageRing::bytes_for(64));
  auto ring = MessageRing::create(mem.p, 64);
  std::vector<std::atomic<uint8_t>> seen(kProducers * kPer);
  std::atomic<uint64_t> consumed{0};
  std::vector<std::thread> ts;
  for (int p = 0; p < kProducers; ++p)
    ts.emplace_back([&, p] {
      for (uint64_t i = 0; i < kPer; ++i) ring.push(msg(p * kPer + i));
    });
  for (int c = 0; c < kConsumers; ++c)
    ts.emplace_back([&] {
      while (consumed.load() < kProducers * kPer) {
        if (auto m = ring.try_pop()) {
          seen[m->sequence].fetch_add(1);
          consumed.fetch_add(1);
        } else {
          std::this_thread::yield();
        }
      }
    });
  for (auto& t : ts) t.join();
  for (auto& s : seen) ASSERT_EQ(s.load(), 1);
}

TEST(Ring, MpmcExactlyOnceAcrossProcesses) {
  constexpr int kProducers = 3;
  constexpr uint64_t kPer = 20000;
  SharedMem mem(MessageRing::bytes_for(32));
  MessageRing::create(mem.p, 32);
  std::vector<std::unique_ptr<Child>> kids;
  for (int p = 0; p < kProducers; ++p)
    kids.push_back(std::make_unique<Child>([&, p] {
      auto r = MessageRing::attach(mem.p);
      for (uint64_t i = 0; i < kPer; ++i) r.push(msg(p * kPer + i));
      return 0;
    }));
  // Two consumers: this thread and a child process reporting through shared memory.
  SharedMem counts(kProducers * kPer);
  auto* cnt = static_cast<std::atomic<uint8_t>*>(counts.p);
  SharedMem done(8);
  auto* consumed = static_cast<std::atomic<uint64_t>*>(done.p);
  auto consume = [&] {
    auto r = MessageRing::attach(mem.p);
    while (consumed->load() < kProducers * kPer) {
      if (auto m = r.try_pop()) {
        cnt[m->sequence].fetch_add(1);
        consumed->fetch_add(1);
      } else {
        std::this_thread::yield();
      }
    }
  };
  Child other([&] {
    consume();
    return 0;
  });
  consume();
  for (auto& k : kids) EXPECT_EQ(k->wait(), 0);
  EXPECT_EQ(other.wait(), 0);
  for (uint64_t i = 0; i < kProducers * kPer; ++i) ASSERT_EQ(cnt[i].load(), 1) << i;
}

TEST(Ring, CallTableCompletion) {
  std::vector<uint8_t> mem(CallTable::bytes_for(4));
  CallTable t(mem.data(), 4, true);
  uint32_t s = t.acquire(42);
  EXPECT_FALSE(CallTable::is_done(t.at(s)));
  std::thread callee([&] { CallTable::complete(t.at(s), 7, 99); });
  callee.join();
  EXPECT_TRUE(CallTable::is_done(t.at(s)));
  EXPECT_EQ(t.at(s).status, 7u);
  EXPECT_EQ(t.at(s).ret, 99u);
  t.release(s);
  std::set<uint32_t> slots;
  for (int i = 0; i < 4; ++i) slots.insert(t.acquire(i));
  EXPECT_EQ(slots.size(), 4u);
}
