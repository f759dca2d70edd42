#include "rpcool/orch_client.hpp"

#include <sys/socket.h>

#include <condition_variable>

namespace rpcool {

using proto::MsgType;

struct OrchestratorClient::Waiter {
  std::mutex mu;
  std::condition_variable cv;
  bool done = false;
  uint16_t status = 0;
  std::string message;
  std::vector<uint8_t> body;
};

OrchestratorClient::OrchestratorClient(const wire::Endpoint& ep, HolderId self) : self_(self) {
  try {
    fd_ = wire::tcp_connect(ep);
  } catch (const Error& e) {
    throw Error(Errc::orchestrator_unreachable, e.what());
  }
  reader_ = std::thread([this] { reader_loop(); });
}

OrchestratorClient::~OrchestratorClient() { close(); }

void OrchestratorClient::close() {
  if (fd_) ::shutdown(fd_.get(), SHUT_RDWR);
  if (reader_.joinable()) reader_.join();
}

void OrchestratorClient::on_notify(NotifyFn fn) {
  std::lock_guard lk(mu_);
  notify_ = std::move(fn);
}

void OrchestratorClient::reader_loop() {
  try {
    wire::Frame f;
    while (wire::read_frame(fd_.get(), wire::TypeWidth::u16, f)) {
      wire::Reader in(f.payload);
      uint64_t corr = in.u64();
      uint16_t status = in.u16();
      if (f.type == static_cast<uint16_t>(MsgType::notify)) {
        auto note = proto::get_notification(in);
        note.recipient = self_;
        NotifyFn fn;
        {
          std::lock_guard lk(mu_);
          fn = notify_;
        }
        if (fn) fn(note);
        continue;
      }
      std::shared_ptr<Waiter> w;
      {
        std::lock_guard lk(mu_);
        auto it = waiting_.find(corr);
        if (it == waiting_.end()) continue;
        w = it->second;
        waiting_.erase(it);
      }
      std::lock_guard lk(w->mu);
      w->status = status;
      if (status != 0) w->message = in.str();
      else w->body.assign(f.payload.begin() + 10, f.payload.end());
      w->done = true;
      w->cv.notify_all();
    }
  } catch (const Error&) {
  }
  broken_ = true;
  std::map<uint64_t, std::shared_ptr<Waiter>> orphans;
  {
    std::lock_guard lk(mu_);
    orphans.swap(waiting_);
  }
  for (auto& [corr, w] : orphans) {
    std::lock_guard lk(w->mu);
    w->status = static_cast<uint16_t>(Errc::orchestrator_unreachable);
    w->message = "connection to orchestrator lost";
    w->done = true;
    w->cv.notify_all();
  }
}

std::vector<uint8_t> OrchestratorClient::call(MsgType type, const wire::Writer& body) {
  if (broken_) throw Error(Errc::orchestrator_unreachable, "connection to orchestrator lost");
  uint64_t corr = next_corr_++;
  auto w = std::make_shared<Waiter>();
  {
    std::lock_guard lk(mu_);
    waiting_[corr] = w;
  }
  wire::Writer head;
  head.u64(corr);
  auto bytes = head.take();
  bytes.insert(bytes.end(), body.data().begin(), body.data().end());
  try {
    std::lock_guard lk(write_mu_);
    wire::write_frame(fd_.get(), wire::TypeWidth::u16, static_cast<uint16_t>(type), bytes);
  } catch (const Error& e) {
    std::lock_guard lk(mu_);
    waiting_.erase(corr);
    throw Error(Errc::orchestrator_unreachable, e.what());
  }
  std::unique_lock lk(w->mu);
  w->cv.wait(lk, [&] { return w->done; });
  if (w->status != 0) {
    // The server already prefixed the code name; strip it so it is not doubled.
    auto code = static_cast<Errc>(w->status);
    std::string prefix = std::string(to_string(code)) + ": ";
    std::string msg = w->message.rfind(prefix, 0) == 0 ? w->message.substr(prefix.size()) : w->message;
    throw Error(code, msg);
  }
  return std::move(w->body);
}

RegisterResult OrchestratorClient::register_channel(const std::string& name, HeapMode mode, uint64_t initial_heap_size,
                                                    const std::string& pool_id, const std::string& fallback_endpoint,
                                                    const std::vector<uint32_t>& allow_nodes) {
  wire::Writer w;
  proto::put(w, self_);
  w.str(name).u8(static_cast<uint8_t>(mode)).u64(initial_heap_size).str(pool_id).str(fallback_endpoint);
  w.u16(static_cast<uint16_t>(allow_nodes.size()));
  for (uint32_t n : allow_nodes) w.u32(n);
  auto body = call(MsgType::register_channel, w);
  wire::Reader r(body);
  RegisterResult res;
  res.record = proto::get_channel(r);
  res.lease = proto::get_lease(r);
  return res;
}

ChannelRecord OrchestratorClient::lookup_channel(const std::string& name) {
  wire::Writer w;
  proto::put(w, self_);
  w.str(name);
  auto body = call(MsgType::lookup_channel, w);
  wire::Reader r(body);
  return proto::get_channel(r);
}

HeapGrant OrchestratorClient::allocate_heap(uint64_t size, uint64_t channel_id) {
  wire::Writer w;
  proto::put(w, self_);
  w.u64(size).u64(channel_id).u64(0);
  auto body = call(MsgType::alloc_heap, w);
  wire::Reader r(body);
  HeapGrant g;
  g.heap = proto::get_heap(r);
  g.lease = proto::get_lease(r);
  return g;
}

HeapGrant OrchestratorClient::attach_heap(uint64_t heap_id) {
  wire::Writer w;
  proto::put(w, self_);
  w.u64(0).u64(0).u64(heap_id);
  auto body = call(MsgType::alloc_heap, w);
  wire::Reader r(body);
  HeapGrant g;
  g.heap = proto::get_heap(r);
  g.lease = proto::get_lease(r);
  return g;
}

void OrchestratorClient::release_heap(uint64_t heap_id) {
  wire::Writer w;
  proto::put(w, self_);
  w.u64(heap_id);
  call(MsgType::release_heap, w);
}

Nanos OrchestratorClient::renew_lease(uint64_t lease_id) {
  wire::Writer w;
  proto::put(w, self_);
  w.u64(lease_id);
  auto body = call(MsgType::renew_lease, w);
  wire::Reader r(body);
  return Nanos(r.i64());
}

QuotaDecision OrchestratorClient::check_quota(uint64_t additional) {
  wire::Writer w;
  proto::put(w, self_);
  w.u64(additional);
  auto body = call(MsgType::quota_query, w);
  wire::Reader r(body);
  QuotaDecision d;
  d.allowed = r.u8() != 0;
  d.mapped = r.u64();
  d.limit = r.u64();
  return d;
}

void OrchestratorClient::close_channel(const std::string& name) {
  wire::Writer w;
  proto::put(w, self_);
  w.str(name);
  call(MsgType::close_channel, w);
}

}  // namespace rpcool
