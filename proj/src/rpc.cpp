#include "rpcool/rpc.hpp"

#include <poll.h>
#include <sys/socket.h>

#include <algorithm>
#include <cstring>

#include "rpcool/busy_wait.hpp"
#include "rpcool/fault.hpp"
#include "rpcool/orch_protocol.hpp"
#include "rpcool/sandbox.hpp"

namespace rpcool {

namespace {

constexpr char kChannelMagic[8] = {'R', 'P', 'C', 'C', 'H', 'A', 'N', '1'};
constexpr char kConnMagic[8] = {'R', 'P', 'C', 'C', 'O', 'N', 'N', '1'};
constexpr uint32_t kAcceptCapacity = 64;
constexpr uint64_t kControlHeapSize = 1 * MiB;

struct ChannelControl {
  char magic[8];
  uint32_t mode;
  uint32_t reserved;
  uint64_t accept_ring;
};

struct ConnectionControl {
  char magic[8];
  uint32_t state;
  uint32_t refusal;
  uint64_t ring;
  uint32_t ring_capacity;
  uint32_t call_slots;
  uint64_t call_table;
  uint64_t seal_ring;
  uint32_t seal_capacity;
  uint32_t reserved;
  uint32_t node;
  uint32_t pid;
  uint32_t incarnation;
  uint32_t reserved2;
  uint64_t heap_id;
};
static_assert(offsetof(ConnectionControl, ring) == 16);
static_assert(offsetof(ConnectionControl, call_table) == 32);
static_assert(offsetof(ConnectionControl, node) == 56);
static_assert(offsetof(ConnectionControl, heap_id) == 72);

enum ConnState : uint32_t { kNew = 0, kRequested = 1, kAccepted = 2, kRefused = 3, kClosed = 4 };

uint32_t load_state(const ConnectionControl* c) { return __atomic_load_n(&c->state, __ATOMIC_ACQUIRE); }
void store_state(ConnectionControl* c, uint32_t s) { __atomic_store_n(&c->state, s, __ATOMIC_RELEASE); }

uint64_t pages_for(uint64_t bytes, uint64_t page) { return round_up(bytes, page) / page; }

}  // namespace

std::string_view to_string(Transport t) { return t == Transport::shared_memory ? "shm" : "fallback"; }

class ServerConnection {
 public:
  Transport transport = Transport::shared_memory;
  uint64_t heap_id = 0;
  bool mapped = false;
  bool free_control = false;  // control pages live in the channel heap
  HolderId client;
  Heap heap;
  ConnectionControl* control = nullptr;
  MessageRing ring;
  CallEntry* calls = nullptr;
  uint32_t call_slots = 0;
  std::unique_ptr<SealRing> seal;
  std::unique_ptr<FallbackSession> session;
  std::mutex inbox_mu;
  std::deque<RpcMessage> inbox;
  std::atomic<bool> dead{false};

  std::optional<RpcMessage> next() {
    if (transport == Transport::shared_memory) return ring.try_pop();
    std::lock_guard lk(inbox_mu);
    if (inbox.empty()) return std::nullopt;
    RpcMessage m = inbox.front();
    inbox.pop_front();
    return m;
  }

  ~ServerConnection() {
    if (session) session->close();
    session.reset();
    seal.reset();
    if (free_control && control != nullptr) {
      try {
        heap.free_pages(reinterpret_cast<void*>(control->seal_ring));
        heap.free_pages(reinterpret_cast<void*>(control->call_table));
        heap.free_pages(reinterpret_cast<void*>(control->ring));
        heap.free_pages(control);
      } catch (const Error&) {
      }
    }
    if (mapped) {
      if (auto* rt = NodeRuntime::current_or_null()) {
        try {
          rt->unmap_heap(heap_id);
        } catch (const Error&) {
        }
      }
    }
  }
};

Transport CallContext::transport() const { return conn_.transport; }

void CallContext::respond(uint32_t status, uint64_t ret) {
  if (responded_) throw Error(Errc::already_responded, "call " + std::to_string(msg_.sequence) + " already answered");
  responded_ = true;
  status_ = status;
  ret_ = ret;
}

// Channel ------------------------------------------------------------------------

std::unique_ptr<Channel> Channel::create(const std::string& name, ChannelOptions opts) {
  NodeRuntime& rt = NodeRuntime::current();
  std::unique_ptr<Channel> ch(new Channel());
  ch->opts_ = std::move(opts);
  if (ch->opts_.workers == 0) throw Error(Errc::invalid_argument, "a channel needs at least one worker");
  std::string fallback_ep;
  if (ch->opts_.fallback) {
    wire::Endpoint ep{"127.0.0.1", 0};
    if (!rt.config().fallback_listen.empty()) ep = wire::Endpoint::parse(rt.config().fallback_listen);
    ch->fallback_listener_ = wire::tcp_listen(ep);
    fallback_ep = wire::bound_endpoint(ch->fallback_listener_.get()).str();
  }
  const uint64_t size = ch->opts_.heap_mode == HeapMode::channel_shared ? ch->opts_.heap_size : kControlHeapSize;
  RegisterResult res = rt.orchestrator().register_channel(name, ch->opts_.heap_mode, size, rt.config().pool_dir,
                                                          fallback_ep, ch->opts_.allow_nodes);
  ch->record_ = res.record;
  try {
    MappedHeap& mh = rt.map_granted(HeapGrant{res.record.heaps.at(0), res.lease});
    ch->control_heap_id_ = mh.desc.id;
    ch->control_ = Heap::format(mh.addr(0), mh.size(), mh.page_size);
    const uint64_t page = mh.page_size;
    auto* cc = static_cast<ChannelControl*>(ch->control_.allocate_pages(1));
    void* ring = ch->control_.allocate_pages(pages_for(MessageRing::bytes_for(kAcceptCapacity), page));
    ch->accept_ = MessageRing::create(ring, kAcceptCapacity);
    cc->mode = static_cast<uint32_t>(ch->opts_.heap_mode);
    cc->accept_ring = reinterpret_cast<uint64_t>(ring);
    std::memcpy(cc->magic, kChannelMagic, sizeof kChannelMagic);
    ch->control_.set_root(cc);
  } catch (...) {
    try {
      rt.orchestrator().close_channel(name);
    } catch (const Error&) {
    }
    throw;
  }
  Channel* self = ch.get();
  ch->failure_token_ = rt.add_failure_listener([self](const FailureNotification& n) { self->on_failure(n); });
  return ch;
}

Channel::~Channel() {
  stop();
  NodeRuntime* rt = NodeRuntime::current_or_null();
  if (rt) rt->remove_failure_listener(failure_token_);
  {
    std::lock_guard lk(conns_mu_);
    conns_.clear();
  }
  if (rt) {
    try {
      rt->orchestrator().close_channel(record_.name);
    } catch (const Error&) {
    }
    try {
      if (control_heap_id_) rt->unmap_heap(control_heap_id_);
    } catch (const Error&) {
    }
  }
}

void Channel::register_handler(uint32_t fid, Handler h) {
  if (started_) throw Error(Errc::wrong_state, "register handlers before the channel starts");
  if (!handlers_.emplace(fid, std::move(h)).second)
    throw Error(Errc::duplicate_handler, "function " + std::to_string(fid) + " already has a handler");
}

void Channel::start() {
  if (started_.exchange(true)) return;
  acceptor_ = std::thread([this] { acceptor_loop(); });
  if (fallback_listener_) fallback_acceptor_ = std::thread([this] { fallback_accept_loop(); });
  for (uint32_t i = 0; i < opts_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
}

void Channel::listen() {
  start();
  std::unique_lock lk(stop_mu_);
  stop_cv_.wait(lk, [this] { return stopping_.load(); });
}

void Channel::stop() {
  {
    std::lock_guard lk(stop_mu_);
    if (stopping_.exchange(true)) return;
  }
  stop_cv_.notify_all();
  if (fallback_listener_) ::shutdown(fallback_listener_.get(), SHUT_RDWR);
  if (acceptor_.joinable()) acceptor_.join();
  if (fallback_acceptor_.joinable()) fallback_acceptor_.join();
  for (auto& w : workers_)
    if (w.joinable()) w.join();
  std::lock_guard lk(conns_mu_);
  for (auto& c : conns_)
    if (c->session) c->session->close();
}

size_t Channel::connection_count() {
  std::lock_guard lk(conns_mu_);
  return static_cast<size_t>(std::count_if(conns_.begin(), conns_.end(), [](auto& c) { return !c->dead.load(); }));
}

ChannelStats Channel::stats() {
  std::lock_guard lk(stats_mu_);
  return stats_;
}

void Channel::add_connection(std::shared_ptr<ServerConnection> c) {
  std::lock_guard lk(conns_mu_);
  conns_.push_back(std::move(c));
  conns_version_.fetch_add(1, std::memory_order_release);
  std::lock_guard s(stats_mu_);
  ++stats_.connections_accepted;
}

void Channel::reap() {
  std::vector<std::shared_ptr<ServerConnection>> gone;
  {
    std::lock_guard lk(conns_mu_);
    for (auto& c : conns_)
      if (c->transport == Transport::shared_memory && load_state(c->control) == kClosed) c->dead = true;
    auto it = std::stable_partition(conns_.begin(), conns_.end(), [](auto& c) { return !c->dead.load(); });
    if (it == conns_.end()) return;
    gone.assign(std::make_move_iterator(it), std::make_move_iterator(conns_.end()));
    conns_.erase(it, conns_.end());
    conns_version_.fetch_add(1, std::memory_order_release);
  }
  std::lock_guard s(stats_mu_);
  stats_.connections_closed += gone.size();
  // `gone` is destroyed here unless a worker still holds a reference.
}

void Channel::on_failure(const FailureNotification& n) {
  std::lock_guard lk(conns_mu_);
  for (auto& c : conns_)
    if (c->client == n.failed) c->dead = true;
}

void Channel::acceptor_loop() {
  while (!stopping_) {
    bool any = false;
    while (auto req = accept_.try_pop()) {
      accept_shm(*req);
      any = true;
    }
    reap();
    if (!any) std::this_thread::sleep_for(std::chrono::microseconds(500));
  }
}

void Channel::accept_shm(const RpcMessage& req) {
  NodeRuntime& rt = NodeRuntime::current();
  const uint64_t heap_id = req.sequence;
  auto* ctl = reinterpret_cast<ConnectionControl*>(req.arg);
  auto refuse = [&](Errc why) {
    // Only write the answer if the control block really is in that heap.
    MappedHeap* h = rt.find(heap_id);
    if (h && h->range().contains(req.arg, sizeof(ConnectionControl))) {
      ctl->refusal = static_cast<uint32_t>(why);
      store_state(ctl, kRefused);
    }
  };
  auto c = std::make_shared<ServerConnection>();
  try {
    MappedHeap& mh = rt.map_heap(heap_id);
    c->heap_id = heap_id;
    c->mapped = true;
    if (!mh.range().contains(req.arg, sizeof(ConnectionControl)) ||
        std::memcmp(ctl->magic, kConnMagic, sizeof kConnMagic) != 0)
      throw Error(Errc::protocol_error, "bad connection control block");
    c->heap = Heap(mh.addr(0));
    c->free_control = heap_id == control_heap_id_;
    c->client = HolderId{ctl->node, ctl->pid, ctl->incarnation};
    const uint32_t cap = ctl->ring_capacity;
    const uint32_t slots = ctl->call_slots;
    const uint32_t seal_cap = ctl->seal_capacity;
    if (cap == 0 || slots == 0 || seal_cap == 0 || !mh.range().contains(ctl->ring, MessageRing::bytes_for(cap)) ||
        !mh.range().contains(ctl->call_table, CallTable::bytes_for(slots)) ||
        !mh.range().contains(ctl->seal_ring, SealRing::bytes_for(seal_cap, mh.page_size)))
      throw Error(Errc::protocol_error, "connection structures outside the heap");
    c->ring = MessageRing::attach(reinterpret_cast<void*>(ctl->ring));
    if (c->ring.capacity() != cap) throw Error(Errc::protocol_error, "ring capacity mismatch");
    c->calls = reinterpret_cast<CallEntry*>(ctl->call_table);
    c->call_slots = slots;
    c->seal = SealRing::in_heap(SealRole::receiver, heap_id, reinterpret_cast<void*>(ctl->seal_ring), seal_cap);
    c->control = ctl;
    store_state(ctl, kAccepted);
    add_connection(std::move(c));
  } catch (const Error& e) {
    c->free_control = false;
    refuse(e.code());
  }
}

void Channel::fallback_accept_loop() {
  while (!stopping_) {
    pollfd p{fallback_listener_.get(), POLLIN, 0};
    int n = ::poll(&p, 1, 100);
    if (n <= 0 || stopping_) continue;
    int fd = ::accept4(fallback_listener_.get(), nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) continue;
    wire::set_nodelay(fd);
    accept_fallback(wire::Fd(fd));
  }
}

void Channel::accept_fallback(wire::Fd fd) {
  NodeRuntime& rt = NodeRuntime::current();
  const int raw = fd.get();
  auto reply = [raw](Errc code, const std::string& msg) {
    wire::Writer w;
    w.u32(static_cast<uint32_t>(code)).str(msg.substr(0, 1000));
    wire::write_frame(raw, wire::TypeWidth::u8, static_cast<uint16_t>(FrameType::establish), w.data());
  };
  try {
    wire::Frame f;
    if (!wire::read_frame(raw, wire::TypeWidth::u8, f)) return;
    if (f.type != static_cast<uint16_t>(FrameType::establish)) throw Error(Errc::protocol_error, "expected ESTABLISH");
    wire::Reader in(f.payload);
    HolderId client = proto::get_holder(in);
    HeapDescriptor desc = proto::get_heap(in);
    uint32_t seal_cap = in.u32();
    in.expect_end();
    if (seal_cap == 0) throw Error(Errc::invalid_argument, "seal ring capacity must be positive");

    HeapGrant g = rt.orchestrator().attach_heap(desc.id);
    if (!(g.heap == desc)) {
      try {
        rt.orchestrator().release_heap(desc.id);
      } catch (const Error&) {
      }
      throw Error(Errc::descriptor_mismatch, "heap " + std::to_string(desc.id) + " does not match the orchestrator's record");
    }
    auto c = std::make_shared<ServerConnection>();
    MappedHeap* mh = nullptr;
    try {
      mh = &rt.map_mirror(desc, g.lease.id);
    } catch (...) {
      try {
        rt.orchestrator().release_heap(desc.id);
      } catch (const Error&) {
      }
      throw;
    }
    c->transport = Transport::fallback;
    c->heap_id = desc.id;
    c->mapped = true;
    c->client = client;
    c->heap = Heap::format(mh->addr(0), mh->size(), mh->page_size, Heap::kMirrored);
    c->seal = SealRing::local(SealRole::receiver, desc.id, seal_cap);
    c->session = std::make_unique<FallbackSession>(FallbackSession::Role::server, std::move(fd), *mh);
    ServerConnection* cp = c.get();
    c->session->on_request([cp](const RpcMessage& m) {
      std::lock_guard lk(cp->inbox_mu);
      cp->inbox.push_back(m);
    });
    c->session->on_seal_info([cp](uint32_t index, const SealDescriptor& d) {
      try {
        cp->seal->apply_remote(index, d);
      } catch (const Error&) {
        // An out-of-range index simply fails verification later.
      }
    });
    c->session->on_close([cp] { cp->dead = true; });
    reply(Errc::ok, "");
    c->session->start();
    add_connection(std::move(c));
  } catch (const Error& e) {
    try {
      if (fd) reply(e.code(), e.what());
    } catch (const Error&) {
    }
  }
}

void Channel::worker_loop() {
  std::vector<std::shared_ptr<ServerConnection>> local;
  uint64_t seen = ~uint64_t{0};
  BusyWaiter waiter(NodeRuntime::current().config().busy_wait, &process_load_meter());
  while (!stopping_) {
    if (conns_version_.load(std::memory_order_acquire) != seen) {
      std::lock_guard lk(conns_mu_);
      local = conns_;
      seen = conns_version_.load(std::memory_order_acquire);
    }
    bool any = false;
    for (auto& c : local) {
      if (c->dead) continue;
      if (auto m = c->next()) {
        dispatch(*c, *m);
        any = true;
      }
    }
    if (any) waiter.worked();
    else waiter.idle();
  }
}

void Channel::finish(ServerConnection& c, const RpcMessage& m, uint32_t status, uint64_t ret, bool seal_completed) {
  if (c.transport == Transport::shared_memory) {
    CallTable::complete(c.calls[m.call_slot], status, ret);
    return;
  }
  try {
    c.session->send_response(m.call_slot, status, ret, seal_completed ? uint32_t{kRespSealCompleted} : 0u);
  } catch (const Error&) {
    c.dead = true;
  }
}

bool Channel::dispatch(ServerConnection& c, const RpcMessage& m) {
  if (c.transport == Transport::shared_memory) {
    if (m.call_slot >= c.call_slots) return false;  // nowhere to answer
    __atomic_store_n(&c.calls[m.call_slot].state, static_cast<uint32_t>(CallState::running), __ATOMIC_RELEASE);
  }
  {
    std::lock_guard s(stats_mu_);
    ++stats_.calls;
  }
  auto it = handlers_.find(m.function_id);
  if (it == handlers_.end()) {
    finish(c, m, system_status(Errc::unknown_function), 0, false);
    return true;
  }
  const bool sealed = (m.flags & kFlagSealed) != 0;
  const bool sandboxed = (m.flags & kFlagSandbox) != 0;
  if (m.arg != 0 && !c.heap.contains(reinterpret_cast<void*>(m.arg))) {
    finish(c, m, system_status(Errc::foreign_address), 0, false);
    return true;
  }
  if (sealed) {
    bool ok = !m.scope.empty() && c.seal->is_sealed(m.seal_index, m.seal_epoch, m.scope) &&
              (m.arg == 0 || m.scope.contains(m.arg));
    if (!ok) {
      {
        std::lock_guard s(stats_mu_);
        ++stats_.seal_failures;
      }
      finish(c, m, system_status(Errc::seal_unverified), 0, false);
      return true;
    }
  }
  if (sandboxed && (m.scope.empty() || !c.heap.range().contains(m.scope))) {
    finish(c, m, system_status(Errc::invalid_argument), 0, false);
    return true;
  }

  CallContext ctx(m, c.heap, c);
  uint32_t failure = 0;
  auto invoke = [&] {
    try {
      it->second(ctx);
    } catch (const Error& e) {
      failure = system_status(e.code());
    } catch (...) {
      failure = system_status(Errc::handler_failed);
    }
  };
  if (sandboxed) {
    std::optional<Sandbox> sb;
    try {
      sb.emplace(Sandbox::begin(m.scope));
    } catch (const Error& e) {
      failure = system_status(e.code());
    }
    if (sb) {
      std::optional<uint32_t> pkru;
      if (SandboxManager::instance().mode() == SandboxMode::hardware) pkru = sb->pkru_outside();
      auto fault = catch_fault(invoke, pkru);
      sb->end();
      if (fault) {
        failure = system_status(Errc::sandbox_violation);
        std::lock_guard s(stats_mu_);
        ++stats_.sandbox_violations;
      }
    }
  } else {
    invoke();
  }
  if (failure == 0) {
    for (auto& fn : ctx.after_) {
      try {
        fn();
      } catch (const Error& e) {
        failure = system_status(e.code());
      } catch (...) {
        failure = system_status(Errc::handler_failed);
      }
    }
  }
  bool completed = false;
  if (sealed) {
    try {
      c.seal->mark_complete(m.seal_index, m.seal_epoch);
      completed = true;
    } catch (const Error&) {
      // Verified above; only a misbehaving sender could have changed it.
    }
  }
  if (failure != 0) finish(c, m, failure, 0, completed);
  else finish(c, m, ctx.status_, ctx.ret_, completed);
  return true;
}

// Connection ---------------------------------------------------------------------

namespace detail {

wire::Fd establish_fallback(const wire::Endpoint& ep, const HeapDescriptor& desc, uint32_t seal_capacity) {
  wire::Fd fd = wire::tcp_connect(ep);
  wire::Writer w;
  proto::put(w, NodeRuntime::current().self());
  proto::put(w, desc);
  w.u32(seal_capacity);
  wire::write_frame(fd.get(), wire::TypeWidth::u8, static_cast<uint16_t>(FrameType::establish), w.data());
  wire::Frame f;
  if (!wire::read_frame(fd.get(), wire::TypeWidth::u8, f))
    throw Error(Errc::connection_refused, "fallback peer closed during handshake");
  if (f.type != static_cast<uint16_t>(FrameType::establish)) throw Error(Errc::protocol_error, "expected ESTABLISH reply");
  wire::Reader in(f.payload);
  uint32_t status = in.u32();
  std::string msg = in.str();
  if (status != 0) throw Error(static_cast<Errc>(status), msg);
  return fd;
}

}  // namespace detail

std::unique_ptr<Connection> Connection::connect(const std::string& name, ConnectOptions opts) {
  NodeRuntime& rt = NodeRuntime::current();
  std::unique_ptr<Connection> c(new Connection());
  c->record_ = rt.orchestrator().lookup_channel(name);
  Transport t = Transport::fallback;
  if (rt.config().pool_access && c->record_.pool_id == rt.config().pool_dir) t = Transport::shared_memory;
  if (opts.transport) t = *opts.transport;
  if (opts.call_slots == 0 || opts.ring_capacity == 0) throw Error(Errc::invalid_argument, "empty ring or call table");
  c->transport_ = t;
  if (t == Transport::shared_memory) c->connect_shm(opts);
  else c->connect_fallback(opts);
  Connection* self = c.get();
  const HolderId server = c->record_.server;
  c->failure_token_ = rt.add_failure_listener([self, server](const FailureNotification& n) {
    if (n.failed == server) self->broken_ = true;
  });
  return c;
}

void Connection::connect_shm(const ConnectOptions& opts) {
  NodeRuntime& rt = NodeRuntime::current();
  if (record_.heaps.empty()) throw Error(Errc::unknown_heap, "channel has no control heap");
  MappedHeap& ch = rt.map_heap(record_.heaps[0].id);
  channel_heap_id_ = ch.desc.id;
  try {
    Heap chan(ch.addr(0));
    auto* cc = static_cast<ChannelControl*>(chan.root());
    if (cc == nullptr || !chan.contains(cc, sizeof(ChannelControl)) ||
        std::memcmp(cc->magic, kChannelMagic, sizeof kChannelMagic) != 0)
      throw Error(Errc::protocol_error, "channel heap carries no channel control block");
    MessageRing accept = MessageRing::attach(reinterpret_cast<void*>(cc->accept_ring));
    if (record_.mode == HeapMode::per_connection) {
      MappedHeap& mh = rt.allocate_heap(opts.heap_size, record_.id);
      heap_id_ = mh.desc.id;
      own_heap_ = true;
      heap_ = Heap::format(mh.addr(0), mh.size(), mh.page_size);
    } else {
      heap_id_ = channel_heap_id_;
      heap_ = chan;
    }
    const uint64_t page = heap_.page_size();
    const uint32_t seal_cap = rt.config().seal_ring_capacity;
    auto* ctl = static_cast<ConnectionControl*>(heap_.allocate_pages(1));
    std::memset(ctl, 0, sizeof *ctl);
    void* ring = heap_.allocate_pages(pages_for(MessageRing::bytes_for(opts.ring_capacity), page));
    void* table = heap_.allocate_pages(pages_for(CallTable::bytes_for(opts.call_slots), page));
    void* seal = heap_.allocate_pages(pages_for(SealRing::bytes_for(seal_cap, page), page));
    std::memset(seal, 0, SealRing::bytes_for(seal_cap, page));
    ring_ = MessageRing::create(ring, opts.ring_capacity);
    calls_ = std::make_unique<CallTable>(table, opts.call_slots, true);
    ctl->ring = reinterpret_cast<uint64_t>(ring);
    ctl->ring_capacity = opts.ring_capacity;
    ctl->call_slots = opts.call_slots;
    ctl->call_table = reinterpret_cast<uint64_t>(table);
    ctl->seal_ring = reinterpret_cast<uint64_t>(seal);
    ctl->seal_capacity = seal_cap;
    ctl->node = rt.self().node;
    ctl->pid = rt.self().pid;
    ctl->incarnation = rt.self().incarnation;
    ctl->heap_id = heap_id_;
    std::memcpy(ctl->magic, kConnMagic, sizeof kConnMagic);
    store_state(ctl, kRequested);
    control_ = reinterpret_cast<uint8_t*>(ctl);

    RpcMessage req;
    req.sequence = heap_id_;
    req.arg = reinterpret_cast<uint64_t>(ctl);
    if (!accept.try_push(req)) throw Error(Errc::connection_refused, "channel accept queue is full");
    auto deadline = std::chrono::steady_clock::now() + opts.accept_timeout;
    uint32_t st;
    while ((st = load_state(ctl)) == kRequested) {
      if (std::chrono::steady_clock::now() > deadline) throw Error(Errc::timeout, "server did not accept the connection");
      std::this_thread::sleep_for(std::chrono::microseconds(100));
    }
    if (st != kAccepted) throw Error(static_cast<Errc>(ctl->refusal), "server refused the connection");
    seal_ = SealRing::in_heap(SealRole::sender, heap_id_, seal, seal_cap);
  } catch (...) {
    seal_.reset();
    if (control_) store_state(reinterpret_cast<ConnectionControl*>(control_), kClosed);
    if (own_heap_) {
      try {
        rt.unmap_heap(heap_id_);
      } catch (const Error&) {
      }
    }
    try {
      rt.unmap_heap(channel_heap_id_);
    } catch (const Error&) {
    }
    throw;
  }
}

void Connection::connect_fallback(const ConnectOptions& opts) {
  NodeRuntime& rt = NodeRuntime::current();
  if (record_.fallback_endpoint.empty())
    throw Error(Errc::connection_refused, "channel " + record_.name + " has no fallback endpoint");
  HeapGrant g = rt.orchestrator().allocate_heap(opts.heap_size, record_.id);
  MappedHeap* mh = nullptr;
  try {
    mh = &rt.map_mirror(g.heap, g.lease.id);
  } catch (...) {
    try {
      rt.orchestrator().release_heap(g.heap.id);
    } catch (const Error&) {
    }
    throw;
  }
  heap_id_ = g.heap.id;
  own_heap_ = true;
  try {
    const uint32_t seal_cap = rt.config().seal_ring_capacity;
    wire::Fd fd = detail::establish_fallback(wire::Endpoint::parse(record_.fallback_endpoint), g.heap, seal_cap);
    session_ = std::make_unique<FallbackSession>(FallbackSession::Role::client, std::move(fd), *mh);
    local_calls_.assign(CallTable::bytes_for(opts.call_slots), 0);
    calls_ = std::make_unique<CallTable>(local_calls_.data(), opts.call_slots, true);
    slot_seal_.assign(opts.call_slots, {kNoSeal, 0});
    seal_ = SealRing::local(SealRole::sender, heap_id_, seal_cap);
    session_->on_response([this](uint32_t slot, uint32_t status, uint64_t ret, uint32_t flags) {
      on_response(slot, status, ret, flags);
    });
    session_->on_close([this] { broken_ = true; });
    session_->start();
    heap_ = Heap(mh->addr(0));
  } catch (...) {
    session_.reset();
    seal_.reset();
    try {
      rt.unmap_heap(heap_id_);
    } catch (const Error&) {
    }
    throw;
  }
}

Connection::~Connection() {
  try {
    close();
  } catch (const Error&) {
  }
}

void Connection::close() {
  if (closed_) return;
  closed_ = true;
  NodeRuntime* rt = NodeRuntime::current_or_null();
  if (rt) rt->remove_failure_listener(failure_token_);
  if (session_) session_->close();
  session_.reset();
  if (control_) store_state(reinterpret_cast<ConnectionControl*>(control_), kClosed);
  seal_.reset();
  if (!rt) return;
  if (own_heap_) {
    try {
      rt->unmap_heap(heap_id_);
    } catch (const Error&) {
    }
  }
  if (channel_heap_id_) {
    try {
      rt->unmap_heap(channel_heap_id_);
    } catch (const Error&) {
    }
  }
}

void Connection::on_response(uint32_t slot, uint32_t status, uint64_t ret, uint32_t flags) {
  if (slot >= calls_->capacity()) return;
  if (flags & kRespSealCompleted) {
    std::pair<uint32_t, uint64_t> s;
    {
      std::lock_guard lk(slot_mu_);
      s = slot_seal_[slot];
    }
    if (s.first != kNoSeal) {
      SealDescriptor d = seal_->read(s.first);
      if (d.epoch == s.second && d.state == static_cast<uint8_t>(SealState::sealed)) {
        d.state = static_cast<uint8_t>(SealState::completed);
        seal_->apply_remote(s.first, d);
      }
    }
  }
  CallTable::complete(calls_->at(slot), status, ret);
}

Response Connection::wait(uint32_t slot) {
  CallEntry& e = calls_->at(slot);
  BusyWaiter waiter(NodeRuntime::current().config().busy_wait, &process_load_meter());
  while (!CallTable::is_done(e)) {
    if (broken_) throw Error(Errc::transport_down, "server of " + record_.name + " is gone");
    waiter.idle();
  }
  Response r{__atomic_load_n(&e.status, __ATOMIC_ACQUIRE), __atomic_load_n(&e.ret, __ATOMIC_ACQUIRE)};
  calls_->release(slot);
  return r;
}

Response Connection::call_raw(const RpcMessage& proto) {
  if (closed_) throw Error(Errc::transport_down, "connection closed");
  if (broken_) throw Error(Errc::transport_down, "server of " + record_.name + " is gone");
  RpcMessage m = proto;
  m.sequence = next_seq_.fetch_add(1, std::memory_order_relaxed);
  m.call_slot = calls_->acquire(m.sequence);
  if (transport_ == Transport::shared_memory) {
    ring_.push(m);
  } else {
    try {
      const bool sealed = (m.flags & kFlagSealed) != 0 && m.seal_index < seal_->capacity();
      {
        std::lock_guard lk(slot_mu_);
        slot_seal_[m.call_slot] = sealed ? std::make_pair(m.seal_index, m.seal_epoch) : std::make_pair(kNoSeal, uint64_t{0});
      }
      if (sealed) session_->send_seal_info(m.seal_index, seal_->read(m.seal_index));
      session_->send_request(m);
    } catch (...) {
      calls_->release(m.call_slot);
      throw;
    }
  }
  return wait(m.call_slot);
}

Response Connection::call(uint32_t fid, const void* arg) {
  RpcMessage m;
  m.function_id = fid;
  m.arg = reinterpret_cast<uint64_t>(arg);
  return call_raw(m);
}

Response Connection::call(uint32_t fid, Scope& scope, const void* arg, uint32_t flags) {
  const uintptr_t a = reinterpret_cast<uintptr_t>(arg);
  if (a != 0 && !scope.range().contains(a)) throw Error(Errc::invalid_argument, "argument lies outside its scope");
  RpcMessage m;
  m.function_id = fid;
  m.flags = flags & (kFlagSealed | kFlagSandbox);
  m.arg = a;
  m.scope = scope.range();
  if ((flags & kFlagSealed) == 0) return call_raw(m);
  SealTicket t = seal_->seal(scope);
  m.seal_index = t.index;
  m.seal_epoch = t.epoch;
  Response r = call_raw(m);
  try {
    seal_->release(t.index);
  } catch (const Error& e) {
    // An unverified seal never completes; the scope stays read-only.
    if (e.code() != Errc::not_complete) throw;
  }
  return r;
}

Response Connection::call_sealed(uint32_t fid, const void* arg, const SealTicket& ticket, uint32_t flags) {
  RpcMessage m;
  m.function_id = fid;
  m.flags = (flags & kFlagSandbox) | kFlagSealed;
  m.arg = reinterpret_cast<uint64_t>(arg);
  m.scope = ticket.range;
  m.seal_index = ticket.index;
  m.seal_epoch = ticket.epoch;
  return call_raw(m);
}

FallbackStats Connection::fallback_stats() const { return session_ ? session_->stats() : FallbackStats{}; }

}  // namespace rpcool
