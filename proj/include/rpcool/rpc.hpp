#pragma once

// Channels, connections and call dispatch.
//
// A channel owns a control heap whose root points at a ChannelControl page:
//
//   0  char[8] magic "RPCCHAN1"
//   8  u32 heap mode (0 per connection, 1 channel shared)
//   12 u32 reserved
//   16 u64 accept ring address (a MessageRing)
//
// A client that shares the pool builds a ConnectionControl page in the heap
// it will use (its own heap, or the channel heap in shared mode) and pushes a
// connect request onto the accept ring: sequence = heap id, arg = control
// address. ConnectionControl:
//
//   0  char[8] magic "RPCCONN1"
//   8  u32 state (0 new, 1 requested, 2 accepted, 3 refused, 4 closed)
//   12 u32 refusal status
//   16 u64 request ring address     24 u32 ring capacity   28 u32 call slots
//   32 u64 call table address       40 u64 seal ring address
//   48 u32 seal ring capacity       52 u32 reserved
//   56 u32 client node  60 u32 client pid  64 u32 client incarnation
//   68 u32 reserved     72 u64 heap id
//
// Peers without pool access use the fallback transport: the client sends
// ESTABLISH (frame type 7) with its heap descriptor to the channel's fallback
// endpoint; after the reply both ends run a FallbackSession on the stream.
//
// Call status: 0 is success, values below 0x10000 are handler-defined, and
// 0x10000 + Errc marks errors raised by the framework.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include "rpcool/fallback.hpp"
#include "rpcool/heap.hpp"
#include "rpcool/ring.hpp"
#include "rpcool/runtime.hpp"
#include "rpcool/seal.hpp"

namespace rpcool {

enum class Transport { shared_memory, fallback };
std::string_view to_string(Transport t);

inline constexpr uint32_t kSystemStatus = 0x10000;
constexpr uint32_t system_status(Errc e) { return kSystemStatus + static_cast<uint32_t>(e); }

/// Stable function id derived from a name (FNV-1a, never 0).
constexpr uint32_t function_id(std::string_view name) {
  uint32_t h = 2166136261u;
  for (char c : name) {
    h ^= static_cast<uint8_t>(c);
    h *= 16777619u;
  }
  return h == 0 ? 1 : h;
}

struct Response {
  uint32_t status = 0;
  uint64_t ret = 0;

  bool ok() const { return status == 0; }
  /// The framework error, if the status is one.
  std::optional<Errc> error() const {
    if (status < kSystemStatus) return std::nullopt;
    return static_cast<Errc>(status - kSystemStatus);
  }
  template <class T>
  T* as() const {
    return reinterpret_cast<T*>(ret);
  }
};

struct ChannelOptions {
  HeapMode heap_mode = HeapMode::per_connection;
  /// Size of the channel heap in shared mode; per-connection mode uses a
  /// small control heap.
  uint64_t heap_size = 64 * MiB;
  uint32_t workers = 1;
  std::vector<uint32_t> allow_nodes;
  /// Accept fallback connections on RuntimeConfig::fallback_listen.
  bool fallback = true;
};

struct ConnectOptions {
  uint64_t heap_size = 64 * MiB;
  uint32_t ring_capacity = 1024;
  uint32_t call_slots = 256;
  /// Forces a transport (tests); the default picks shared memory when the
  /// pool is reachable.
  std::optional<Transport> transport;
  std::chrono::milliseconds accept_timeout{5000};
};

class ServerConnection;

/// Per-call state handed to a handler.
class CallContext {
 public:
  uint32_t function() const { return msg_.function_id; }
  uint64_t sequence() const { return msg_.sequence; }
  const RpcMessage& message() const { return msg_; }
  void* arg() const { return reinterpret_cast<void*>(msg_.arg); }
  template <class T>
  T* arg_as() const {
    return reinterpret_cast<T*>(msg_.arg);
  }
  AddrRange scope() const { return msg_.scope; }
  bool sealed() const { return (msg_.flags & kFlagSealed) != 0; }
  bool sandboxed() const { return (msg_.flags & kFlagSandbox) != 0; }
  /// Heap of this connection; allocate results here (outside a sandbox).
  Heap& heap() const { return heap_; }
  Transport transport() const;

  /// Records the result. Publication happens after the handler returns and
  /// any sandbox has ended. Throws Errc::already_responded on a second call.
  void respond(uint32_t status = 0, uint64_t ret = 0);
  void respond(uint32_t status, const void* ret) { respond(status, reinterpret_cast<uint64_t>(ret)); }
  bool responded() const { return responded_; }
  /// Runs `fn` outside the sandbox before the response is published.
  void after_sandbox(std::function<void()> fn) { after_.push_back(std::move(fn)); }

 private:
  friend class Channel;
  CallContext(const RpcMessage& m, Heap& heap, ServerConnection& conn) : msg_(m), heap_(heap), conn_(conn) {}
  RpcMessage msg_;
  Heap& heap_;
  ServerConnection& conn_;
  bool responded_ = false;
  uint32_t status_ = 0;
  uint64_t ret_ = 0;
  std::vector<std::function<void()>> after_;
};

using Handler = std::function<void(CallContext&)>;

struct ChannelStats {
  uint64_t calls = 0;
  uint64_t seal_failures = 0;
  uint64_t sandbox_violations = 0;
  uint64_t connections_accepted = 0;
  uint64_t connections_closed = 0;
};

class Channel {
 public:
  /// Registers `name` with the orchestrator and prepares the control heap.
  static std::unique_ptr<Channel> create(const std::string& name, ChannelOptions opts = {});
  ~Channel();
  Channel(const Channel&) = delete;
  Channel& operator=(const Channel&) = delete;

  void register_handler(uint32_t fid, Handler h);
  void register_handler(std::string_view name, Handler h) { register_handler(function_id(name), std::move(h)); }

  /// Starts the acceptor and the worker pool, then returns.
  void start();
  /// start() and block until stop() is called from another thread.
  void listen();
  void stop();

  const ChannelRecord& record() const { return record_; }
  const std::string& name() const { return record_.name; }
  Heap control_heap() const { return control_; }
  size_t connection_count();
  ChannelStats stats();
  std::string fallback_endpoint() const { return record_.fallback_endpoint; }

 private:
  Channel() = default;
  void acceptor_loop();
  void fallback_accept_loop();
  void worker_loop();
  void accept_shm(const RpcMessage& req);
  void accept_fallback(wire::Fd fd);
  bool dispatch(ServerConnection& c, const RpcMessage& m);
  void finish(ServerConnection& c, const RpcMessage& m, uint32_t status, uint64_t ret, bool seal_completed);
  void add_connection(std::shared_ptr<ServerConnection> c);
  void reap();
  void on_failure(const FailureNotification& n);

  ChannelOptions opts_;
  ChannelRecord record_;
  uint64_t control_heap_id_ = 0;
  Heap control_;
  MessageRing accept_;
  std::unordered_map<uint32_t, Handler> handlers_;
  std::atomic<bool> started_{false};
  std::atomic<bool> stopping_{false};
  std::mutex conns_mu_;
  std::vector<std::shared_ptr<ServerConnection>> conns_;
  std::atomic<uint64_t> conns_version_{0};
  std::thread acceptor_;
  std::thread fallback_acceptor_;
  std::vector<std::thread> workers_;
  wire::Fd fallback_listener_;
  uint64_t failure_token_ = 0;
  std::mutex stop_mu_;
  std::condition_variable stop_cv_;
  std::mutex stats_mu_;
  ChannelStats stats_;
};

class Connection {
 public:
  static std::unique_ptr<Connection> connect(const std::string& name, ConnectOptions opts = {});
  ~Connection();
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;

  Transport transport() const { return transport_; }
  Heap& heap() { return heap_; }
  SealRing& seal_ring() { return *seal_; }
  uint64_t heap_id() const { return heap_id_; }
  const ChannelRecord& channel() const { return record_; }
  bool alive() const { return !broken_.load(); }

  /// Plain call; `arg` must be null or inside the connection's heap.
  Response call(uint32_t fid, const void* arg = nullptr);
  Response call(std::string_view name, const void* arg = nullptr) { return call(function_id(name), arg); }
  /// Call whose argument lives in `scope`. With kFlagSealed the scope is
  /// sealed for the duration of the call and released afterwards; with
  /// kFlagSandbox the handler runs confined to the scope.
  Response call(uint32_t fid, Scope& scope, const void* arg, uint32_t flags);
  /// Sends with a seal the caller manages (e.g. through a ScopePool).
  Response call_sealed(uint32_t fid, const void* arg, const SealTicket& ticket, uint32_t flags);
  /// Lowest level: no seal handling at all. Used to probe receiver checks.
  Response call_raw(const RpcMessage& proto);

  FallbackStats fallback_stats() const;
  /// Sends BYE / marks the control closed and unmaps the heap.
  void close();

 private:
  Connection() = default;
  void connect_shm(const ConnectOptions& opts);
  void connect_fallback(const ConnectOptions& opts);
  Response wait(uint32_t slot);
  void on_response(uint32_t slot, uint32_t status, uint64_t ret, uint32_t flags);

  ChannelRecord record_;
  Transport transport_ = Transport::shared_memory;
  uint64_t heap_id_ = 0;
  uint64_t channel_heap_id_ = 0;
  bool own_heap_ = false;
  Heap heap_;
  uint8_t* control_ = nullptr;
  MessageRing ring_;
  std::unique_ptr<CallTable> calls_;
  std::vector<uint8_t> local_calls_;  // fallback: call table in private memory
  std::mutex slot_mu_;
  std::vector<std::pair<uint32_t, uint64_t>> slot_seal_;  // fallback: seal per call slot
  std::unique_ptr<SealRing> seal_;
  std::unique_ptr<FallbackSession> session_;
  std::atomic<uint64_t> next_seq_{1};
  std::atomic<bool> broken_{false};
  bool closed_ = false;
  uint64_t failure_token_ = 0;
};

namespace detail {

/// Client half of the fallback handshake. Returns the connected stream or
/// throws the error the server reported.
wire::Fd establish_fallback(const wire::Endpoint& ep, const HeapDescriptor& desc, uint32_t seal_capacity);

}  // namespace detail

}  // namespace rpcool
