#include "rpcool/orch_server.hpp"

#include <sys/socket.h>

#include <algorithm>
#include <chrono>

#include "rpcool/orch_protocol.hpp"

namespace rpcool {

using proto::MsgType;

Nanos OrchestratorServer::wall_now() {
  return std::chrono::duration_cast<Nanos>(std::chrono::system_clock::now().time_since_epoch());
}

OrchestratorServer::OrchestratorServer(Orchestrator& core, Options opts) : core_(core), opts_(std::move(opts)) {
  if (opts_.sweep_interval.count() <= 0) opts_.sweep_interval = core_.config().renew_interval / 4;
  listen_fd_ = wire::tcp_listen(opts_.listen);
  endpoint_ = wire::bound_endpoint(listen_fd_.get());
  accept_thread_ = std::thread([this] { accept_loop(); });
  sweep_thread_ = std::thread([this] { sweep_loop(); });
}

OrchestratorServer::~OrchestratorServer() { stop(); }

void OrchestratorServer::stop() {
  if (stopping_.exchange(true)) return;
  ::shutdown(listen_fd_.get(), SHUT_RDWR);
  sweep_cv_.notify_all();
  if (accept_thread_.joinable()) accept_thread_.join();
  if (sweep_thread_.joinable()) sweep_thread_.join();
  std::vector<std::shared_ptr<Session>> sessions;
  {
    std::lock_guard lk(mu_);
    sessions.swap(sessions_);
  }
  for (auto& s : sessions) ::shutdown(s->fd.get(), SHUT_RDWR);
  for (auto& s : sessions)
    if (s->thread.joinable()) s->thread.join();
}

void OrchestratorServer::accept_loop() {
  while (!stopping_) {
    int fd = ::accept4(listen_fd_.get(), nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (stopping_) return;
      continue;
    }
    wire::set_nodelay(fd);
    auto s = std::make_shared<Session>();
    s->fd = wire::Fd(fd);
    std::lock_guard lk(mu_);
    std::erase_if(sessions_, [](const std::shared_ptr<Session>& x) {
      if (!x->done) return false;
      if (x->thread.joinable()) x->thread.join();
      return true;
    });
    sessions_.push_back(s);
    s->thread = std::thread([this, s] { session_loop(s); });
  }
}

void OrchestratorServer::bind_holder(const HolderId& h, const std::shared_ptr<Session>& s) {
  std::lock_guard lk(mu_);
  by_holder_[h] = s;
}

void OrchestratorServer::session_loop(std::shared_ptr<Session> s) {
  try {
    wire::Frame f;
    while (!stopping_ && wire::read_frame(s->fd.get(), wire::TypeWidth::u16, f)) {
      wire::Reader in(f.payload);
      uint64_t corr = in.u64();
      wire::Writer out;
      out.u64(corr);
      try {
        // Bind the session to the requesting holder so NOTIFY can reach it.
        wire::Reader peek(f.payload);
        peek.u64();
        if (f.type >= 1 && f.type <= 8 && f.type != static_cast<uint16_t>(MsgType::notify))
          bind_holder(proto::get_holder(peek), s);
        auto body = handle(*s, f.type, in, corr);
        out.u16(static_cast<uint16_t>(Errc::ok));
        auto bytes = out.take();
        bytes.insert(bytes.end(), body.begin(), body.end());
        std::lock_guard lk(s->write_mu);
        wire::write_frame(s->fd.get(), wire::TypeWidth::u16, f.type, bytes);
      } catch (const Error& e) {
        if (e.code() == Errc::transport_down) throw;
        out.u16(static_cast<uint16_t>(e.code())).str(std::string(e.what()).substr(0, 1000));
        std::lock_guard lk(s->write_mu);
        wire::write_frame(s->fd.get(), wire::TypeWidth::u16, f.type, out.data());
      }
    }
  } catch (const Error&) {
    // Peer went away or sent garbage; the session ends.
  }
  s->done = true;
}

std::vector<uint8_t> OrchestratorServer::handle(Session&, uint16_t type, wire::Reader& in, uint64_t) {
  wire::Writer out;
  const Nanos now = wall_now();
  switch (static_cast<MsgType>(type)) {
    case MsgType::register_channel: {
      RegisterRequest req;
      req.creator = proto::get_holder(in);
      req.name = in.str();
      uint8_t mode = in.u8();
      if (mode > 1) throw Error(Errc::protocol_error, "bad heap mode");
      req.mode = static_cast<HeapMode>(mode);
      req.initial_heap_size = in.u64();
      req.pool_id = in.str();
      req.fallback_endpoint = in.str();
      uint16_t n = in.u16();
      for (uint16_t i = 0; i < n; ++i) req.allow_nodes.push_back(in.u32());
      in.expect_end();
      auto res = core_.register_channel(req, now);
      proto::put(out, res.record);
      proto::put(out, res.lease);
      break;
    }
    case MsgType::lookup_channel: {
      HolderId who = proto::get_holder(in);
      std::string name = in.str();
      in.expect_end();
      auto rec = core_.lookup_channel(name);
      if (!rec) throw Error(Errc::unknown_channel, name);
      if (!rec->allow_nodes.empty() &&
          std::find(rec->allow_nodes.begin(), rec->allow_nodes.end(), who.node) == rec->allow_nodes.end())
        throw Error(Errc::acl_denied, "node " + std::to_string(who.node) + " not admitted to " + name);
      proto::put(out, *rec);
      break;
    }
    case MsgType::alloc_heap: {
      HolderId who = proto::get_holder(in);
      uint64_t size = in.u64();
      uint64_t channel_id = in.u64();
      uint64_t attach = in.u64();
      in.expect_end();
      HeapGrant g = attach != 0 ? core_.attach_heap(attach, who, now) : core_.allocate_heap(size, who, now, channel_id);
      proto::put(out, g.heap);
      proto::put(out, g.lease);
      break;
    }
    case MsgType::release_heap: {
      HolderId who = proto::get_holder(in);
      uint64_t heap_id = in.u64();
      in.expect_end();
      core_.release_heap(heap_id, who);
      break;
    }
    case MsgType::renew_lease: {
      proto::get_holder(in);
      uint64_t lease_id = in.u64();
      in.expect_end();
      out.i64(core_.renew_lease(lease_id, now).count());
      break;
    }
    case MsgType::quota_query: {
      HolderId who = proto::get_holder(in);
      uint64_t add = in.u64();
      in.expect_end();
      auto d = core_.check_quota(who, add);
      out.u8(d.allowed ? 1 : 0).u64(d.mapped).u64(d.limit);
      break;
    }
    case MsgType::close_channel: {
      HolderId who = proto::get_holder(in);
      std::string name = in.str();
      in.expect_end();
      core_.close_channel(name, who);
      break;
    }
    default:
      throw Error(Errc::protocol_error, "unknown message type " + std::to_string(type));
  }
  return out.take();
}

bool OrchestratorServer::deliver(const FailureNotification& n) {
  std::shared_ptr<Session> s;
  {
    std::lock_guard lk(mu_);
    auto it = by_holder_.find(n.recipient);
    if (it != by_holder_.end()) s = it->second.lock();
  }
  if (!s || s->done) return false;
  wire::Writer w;
  w.u64(0).u16(static_cast<uint16_t>(Errc::ok));
  proto::put(w, n);
  try {
    std::lock_guard lk(s->write_mu);
    wire::write_frame(s->fd.get(), wire::TypeWidth::u16, static_cast<uint16_t>(MsgType::notify), w.data());
  } catch (const Error&) {
    return false;
  }
  ++sent_;
  return true;
}

void OrchestratorServer::sweep_loop() {
  std::unique_lock lk(mu_);
  while (!stopping_) {
    sweep_cv_.wait_for(lk, opts_.sweep_interval, [this] { return stopping_.load(); });
    if (stopping_) break;
    lk.unlock();
    const Nanos now = wall_now();
    auto notes = core_.expire_sweep(now);
    std::deque<Pending> retry;
    {
      std::lock_guard g(mu_);
      retry.swap(pending_);
    }
    for (auto& n : notes) retry.push_back(Pending{std::move(n), now + core_.config().lease_term()});
    std::deque<Pending> still;
    for (auto& p : retry)
      if (!deliver(p.note) && p.deadline > now) still.push_back(std::move(p));
    lk.lock();
    for (auto& p : still) pending_.push_back(std::move(p));
  }
}

}  // namespace rpcool
