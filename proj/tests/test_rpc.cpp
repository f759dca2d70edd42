#include <gtest/gtest.h>

#include "rpcool/rpc.hpp"
#include "rpcool/sandbox.hpp"
#include "support.hpp"

using namespace rpcool;
using rpcool::testing::Child;
using rpcool::testing::LocalCluster;

namespace {

struct ListNode {
  uint64_t value;
  ListNode* next;
};

constexpr uint32_t kPing = function_id("ping");
constexpr uint32_t kSum = function_id("sum");
constexpr uint32_t kSeven = function_id("seven");
constexpr uint32_t kTwice = function_id("twice");
constexpr uint32_t kNoop = function_id("noop");
constexpr uint32_t kDeref = function_id("deref");
constexpr uint32_t kBump = function_id("bump");
constexpr uint32_t kThrow = function_id("throw");

struct Peek {
  const uint64_t* target;
};

uint64_t checksum(const ListNode* n) {
  uint64_t h = 1469598103934665603ull;
  for (; n; n = n->next) h = (h ^ n->value) * 1099511628211ull;
  return h;
}

ListNode* build_list(Scope& s, int n, uint64_t seed) {
  ListNode* head = nullptr;
  for (int i = 0; i < n; ++i) head = s.make<ListNode>(ListNode{seed * 31 + static_cast<uint64_t>(i) * 7919, head});
  return head;
}

void register_demo(Channel& ch) {
  ch.register_handler(kPing, [](CallContext& ctx) {
    auto* in = ctx.arg_as<ShmString>();
    std::string reply = "pong:" + std::string(in->view());
    ctx.after_sandbox([&ctx, reply] { ctx.respond(0, ShmString::create(ctx.heap(), reply)); });
  });
  ch.register_handler(kSum, [](CallContext& ctx) { ctx.respond(0, checksum(ctx.arg_as<ListNode>())); });
  ch.register_handler(kSeven, [](CallContext& ctx) { ctx.respond(7); });
  ch.register_handler(kTwice, [](CallContext& ctx) {
    ctx.respond(0, 1);
    ctx.respond(0, 2);
  });
  ch.register_handler(kNoop, [](CallContext&) {});
  ch.register_handler(kDeref, [](CallContext& ctx) { ctx.respond(0, *ctx.arg_as<Peek>()->target); });
  ch.register_handler(kBump, [](CallContext& ctx) {
    auto* v = ctx.arg_as<uint64_t>();
    *v += 1;
    ctx.respond(0, *v);
  });
  ch.register_handler(kThrow, [](CallContext&) { throw Error(Errc::quota_exceeded, "from handler"); });
}

/// Receiver-side checks and sandbox outcomes; 0 on success or the failing step.
int dispatch_script(Connection& c) {
  Heap& h = c.heap();
  auto* outside = h.make<uint64_t>(0x5EC2E7ull);
  int local = 0;
  if (c.call(kNoop, &local).error() != Errc::foreign_address) return 1;
  if (c.call(kThrow).error() != Errc::quota_exceeded) return 2;

  Scope scope = h.create_scope(4096);
  auto* peek = scope.make<Peek>(Peek{outside});
  auto* inside = scope.make<uint64_t>(41);

  // Unsandboxed, the handler may follow the pointer anywhere in the heap.
  if (Response r = c.call(kDeref, scope, peek, 0); !r.ok() || r.ret != 0x5EC2E7ull) return 3;
  // Sandboxed, the same call is a violation and nothing leaks.
  for (uint32_t flags : {uint32_t{kFlagSandbox}, uint32_t{kFlagSandbox | kFlagSealed}}) {
    Response r = c.call(kDeref, scope, peek, flags);
    if (r.error() != Errc::sandbox_violation || r.ret != 0) return 4;
  }
  peek->target = inside;
  if (Response r = c.call(kDeref, scope, peek, kFlagSandbox | kFlagSealed); !r.ok() || r.ret != 41) return 5;
  // A sandboxed handler may write its argument; the caller sees the result.
  if (Response r = c.call(kBump, scope, inside, kFlagSandbox); !r.ok() || r.ret != 42 || *inside != 42) return 6;

  // Forged or missing seals are refused before the handler runs.
  RpcMessage m;
  m.function_id = kBump;
  m.arg = reinterpret_cast<uint64_t>(inside);
  m.scope = scope.range();
  m.flags = kFlagSealed;
  m.seal_index = 3;
  m.seal_epoch = 12345;
  if (c.call_raw(m).error() != Errc::seal_unverified) return 7;
  m.seal_index = kNoSeal;
  if (c.call_raw(m).error() != Errc::seal_unverified) return 8;
  if (*inside != 42) return 9;
  // A sandbox needs a scope.
  m.flags = kFlagSandbox;
  m.scope = {};
  if (c.call_raw(m).error() != Errc::invalid_argument) return 10;
  // Unknown functions are reported first.
  m.function_id = function_id("nobody");
  m.arg = reinterpret_cast<uint64_t>(&local);
  if (c.call_raw(m).error() != Errc::unknown_function) return 11;
  if (c.call(kSeven).status != 7) return 12;
  return 0;
}

/// Runs the client-side checks; returns 0 on success or the failing step.
int client_script(Connection& c) {
  auto* s = ShmString::create(c.heap(), "hello");
  Response r = c.call(kPing, s);
  if (!r.ok() || r.as<ShmString>()->view() != "pong:hello") return 1;
  if (c.call(kNoop).status != 0) return 2;
  if (c.call(kSeven).status != 7) return 3;
  if (c.call(function_id("missing")).error() != Errc::unknown_function) return 4;
  if (c.call(kTwice).error() != Errc::already_responded) return 5;

  Scope scope = c.heap().create_scope(64 * 1024);
  ListNode* head = build_list(scope, 1000, 3);
  const uint64_t want = checksum(head);
  for (uint32_t flags : {0u, uint32_t{kFlagSealed}, uint32_t{kFlagSealed | kFlagSandbox}}) {
    Response rr = c.call(kSum, scope, head, flags);
    if (!rr.ok() || rr.ret != want) return 10 + static_cast<int>(flags);
  }
  // Sealed + sandboxed ping: the string lives in the scope.
  scope.reset();
  auto* in = scope.make<ShmString>();
  (void)in;
  return 0;
}

}  // namespace

TEST(Rpc, SharedMemoryRoundTrip) {
  LocalCluster cluster;
  NodeRuntime rt(cluster.runtime());
  auto ch = Channel::create("/demo/ping");
  register_demo(*ch);
  EXPECT_THROW(ch->register_handler(kPing, [](CallContext&) {}), Error);
  ch->start();
  auto c = Connection::connect("/demo/ping");
  EXPECT_EQ(c->transport(), Transport::shared_memory);
  EXPECT_EQ(client_script(*c), 0);
  EXPECT_EQ(dispatch_script(*c), 0);
  auto st = ch->stats();
  EXPECT_EQ(st.sandbox_violations, 2u);
  EXPECT_EQ(st.seal_failures, 2u);
  c->close();
}

TEST(Rpc, ConnectMissingChannel) {
  LocalCluster cluster;
  NodeRuntime rt(cluster.runtime());
  try {
    Connection::connect("/nope");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::unknown_channel);
  }
}

TEST(Rpc, FallbackRoundTrip) {
  LocalCluster cluster;
  NodeRuntime rt(cluster.runtime());
  auto ch = Channel::create("/demo/fb");
  register_demo(*ch);
  ch->start();
  auto cfg = cluster.runtime(2, false);
  Child child([cfg] {
    NodeRuntime crt(cfg);
    auto c = Connection::connect("/demo/fb");
    if (c->transport() != Transport::fallback) return 50;
    int rc = client_script(*c);
    if (rc == 0 && (rc = dispatch_script(*c)) != 0) rc += 100;
    c->close();
    return rc;
  });
  EXPECT_EQ(child.wait(), 0);
  EXPECT_EQ(ch->stats().sandbox_violations, 2u);
}

TEST(Rpc, SharedMemoryAcrossProcesses) {
  LocalCluster cluster;
  NodeRuntime rt(cluster.runtime());
  auto ch = Channel::create("/demo/xproc");
  register_demo(*ch);
  ch->start();
  auto cfg = cluster.runtime(2, true);
  Child child([cfg] {
    NodeRuntime crt(cfg);
    auto c = Connection::connect("/demo/xproc");
    if (c->transport() != Transport::shared_memory) return 50;
    int rc = client_script(*c);
    if (rc == 0 && (rc = dispatch_script(*c)) != 0) rc += 100;
    // In another process the receiver keeps write access to a sealed scope.
    if (rc == 0) {
      Scope s = c->heap().create_scope(64);
      auto* v = s.make<uint64_t>(7);
      Response r = c->call(kBump, s, v, kFlagSealed | kFlagSandbox);
      if (!r.ok() || *v != 8) rc = 200;
    }
    c->close();
    return rc;
  });
  EXPECT_EQ(child.wait(), 0);
  EXPECT_TRUE(rpcool::testing::eventually([&] { return ch->connection_count() == 0; }));
}

TEST(Rpc, ClientNoticesServerDeath) {
  LocalCluster cluster;
  NodeRuntime rt(cluster.runtime());
  auto cfg = cluster.runtime(2, true);
  Child server([cfg] {
    NodeRuntime srt(cfg);
    auto ch = Channel::create("/demo/dies");
    register_demo(*ch);
    ch->listen();
    return 0;
  });
  std::unique_ptr<Connection> c;
  ASSERT_TRUE(rpcool::testing::eventually([&] {
    try {
      c = Connection::connect("/demo/dies");
      return true;
    } catch (const Error&) {
      return false;
    }
  }));
  EXPECT_EQ(c->call(kSeven).status, 7u);
  server.kill();
  EXPECT_TRUE(rpcool::testing::eventually([&] { return !c->alive(); }, std::chrono::seconds(3)));
  try {
    c->call(kSeven);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::transport_down);
  }
}
