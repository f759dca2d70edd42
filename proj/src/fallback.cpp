#include "rpcool/fallback.hpp"

#include <fcntl.h>
#include <linux/userfaultfd.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/ioctl.h>
#include <sys/mman.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>

#ifndef MADV_POPULATE_WRITE
#define MADV_POPULATE_WRITE 23
#endif

namespace rpcool {

namespace {

int open_uffd() {
  int fd = static_cast<int>(::syscall(SYS_userfaultfd, O_CLOEXEC | O_NONBLOCK));
  if (fd < 0 && errno == EPERM) fd = static_cast<int>(::syscall(SYS_userfaultfd, O_CLOEXEC | O_NONBLOCK | UFFD_USER_MODE_ONLY));
  if (fd < 0) throw_errno(Errc::transport_down, "userfaultfd");
  uffdio_api api{};
  api.api = UFFD_API;
  api.features = UFFD_FEATURE_MINOR_SHMEM;
  if (::ioctl(fd, UFFDIO_API, &api) != 0) {
    ::close(fd);
    throw_errno(Errc::transport_down, "userfaultfd minor-fault support");
  }
  return fd;
}

}  // namespace

FallbackSession::FallbackSession(Role role, wire::Fd stream, MappedHeap& heap)
    : role_(role), stream_(std::move(stream)), heap_(heap) {
  if (!heap.mirror) throw Error(Errc::invalid_argument, "fallback sessions need a mirror mapping");
  page_ = heap.page_size;
  alias_ = NodeRuntime::current().privileged_alias(Privileged{}, heap.desc.id);
  pages_.resize(heap.pages());
  if (role_ == Role::server) {
    for (auto& p : pages_) p.owned = true;
    // Owned pages must be mapped before registration, or the first touch
    // would be reported as a fault.
    if (::madvise(heap.addr(0), heap.size(), MADV_POPULATE_WRITE) != 0) {
      for (uint64_t i = 0; i < heap.pages(); ++i) {
        volatile uint8_t* b = static_cast<uint8_t*>(heap.addr(i * page_));
        *b = *b;
      }
    }
  }
  uffd_ = open_uffd();
  uffdio_register reg{};
  reg.range.start = heap.base();
  reg.range.len = heap.size();
  reg.mode = UFFDIO_REGISTER_MODE_MINOR;
  if (::ioctl(uffd_, UFFDIO_REGISTER, &reg) != 0) {
    ::close(uffd_);
    throw_errno(Errc::transport_down, "register heap for minor faults");
  }
  wake_fd_ = ::eventfd(0, EFD_CLOEXEC | EFD_NONBLOCK);
}

FallbackSession::~FallbackSession() {
  close();
  shutdown_uffd();
  if (wake_fd_ >= 0) ::close(wake_fd_);
}

void FallbackSession::on_request(RequestFn fn) { on_request_ = std::move(fn); }
void FallbackSession::on_response(ResponseFn fn) { on_response_ = std::move(fn); }
void FallbackSession::on_seal_info(SealInfoFn fn) { on_seal_ = std::move(fn); }
void FallbackSession::on_close(CloseFn fn) { on_close_ = std::move(fn); }

void FallbackSession::start() {
  driver_ = std::thread([this] { driver(); });
}

void FallbackSession::shutdown_uffd() {
  if (uffd_ < 0) return;
  // Unregistering wakes every blocked fault; they then see the local copy.
  uffdio_range r{heap_.base(), heap_.size()};
  ::ioctl(uffd_, UFFDIO_UNREGISTER, &r);
  ::close(uffd_);
  uffd_ = -1;
}

void FallbackSession::close() {
  if (!stopping_.exchange(true)) {
    if (alive_) {
      try {
        send(FrameType::bye, {});
      } catch (const Error&) {
      }
    }
    uint64_t one = 1;
    if (wake_fd_ >= 0) (void)!::write(wake_fd_, &one, sizeof one);
  }
  if (driver_.joinable() && driver_.get_id() != std::this_thread::get_id()) driver_.join();
}

FallbackStats FallbackSession::stats() const {
  std::lock_guard lk(state_mu_);
  return stats_;
}

std::vector<bool> FallbackSession::ownership() const {
  std::lock_guard lk(state_mu_);
  std::vector<bool> out(pages_.size());
  for (size_t i = 0; i < pages_.size(); ++i) out[i] = pages_[i].owned;
  return out;
}

bool FallbackSession::owns(uint64_t page) const {
  std::lock_guard lk(state_mu_);
  return page < pages_.size() && pages_[page].owned;
}

void FallbackSession::send(FrameType t, const std::vector<uint8_t>& payload) {
  std::lock_guard lk(send_mu_);
  wire::write_frame(stream_.get(), wire::TypeWidth::u8, static_cast<uint16_t>(t), payload);
}

void FallbackSession::send_request(const RpcMessage& m) {
  if (!alive_) throw Error(Errc::transport_down, "fallback session closed");
  wire::Writer w;
  w.u64(m.sequence).u32(m.function_id).u32(m.flags).u64(m.arg).u64(m.scope.start).u64(m.scope.len);
  w.u32(m.seal_index).u64(m.seal_epoch).u32(m.call_slot);
  send(FrameType::rpc_req, w.data());
}

void FallbackSession::send_response(uint32_t call_slot, uint32_t status, uint64_t ret, uint32_t flags) {
  if (!alive_) throw Error(Errc::transport_down, "fallback session closed");
  wire::Writer w;
  w.u32(call_slot).u32(status).u64(ret).u32(flags);
  send(FrameType::rpc_resp, w.data());
}

void FallbackSession::send_seal_info(uint32_t index, const SealDescriptor& d) {
  if (!alive_) throw Error(Errc::transport_down, "fallback session closed");
  wire::Writer w;
  w.u32(index).u64(d.start).u64(d.len).u8(d.state).u64(d.epoch);
  send(FrameType::seal_info, w.data());
}

void FallbackSession::give_page(uint64_t page) {
  PageState& ps = pages_[page];
  // Zap our mapping first: any later local access faults, so the bytes we
  // copy below are final.
  ::madvise(heap_.addr(page * page_), page_, MADV_DONTNEED);
  ps.owned = false;
  ps.epoch += 1;
  ps.last_sent = ps.epoch;
  ps.peer_waiting = false;
  ++stats_.pages_out;
  wire::Writer w;
  w.u64(page).u64(ps.epoch);
  w.bytes({reinterpret_cast<const std::byte*>(alias_ + page * page_), page_});
  send(FrameType::page_data, w.data());
}

void FallbackSession::install_page(uint64_t page, uint64_t epoch, const uint8_t* data) {
  PageState& ps = pages_[page];
  std::memcpy(alias_ + page * page_, data, page_);
  ps.owned = true;
  ps.requested = false;
  ps.epoch = epoch;
  ps.hold_until = std::chrono::steady_clock::now() + kPageHold;
  ++stats_.pages_in;
  uffdio_continue c{};
  c.range.start = heap_.base() + page * page_;
  c.range.len = page_;
  while (::ioctl(uffd_, UFFDIO_CONTINUE, &c) != 0) {
    if (errno == EAGAIN) continue;
    // Already mapped (e.g. nobody was waiting): just wake any sleepers.
    uffdio_range r{c.range.start, c.range.len};
    ::ioctl(uffd_, UFFDIO_WAKE, &r);
    break;
  }
}

void FallbackSession::handle_fault(uint64_t addr) {
  uint64_t page = (addr - heap_.base()) / page_;
  if (page >= pages_.size()) return;
  std::lock_guard lk(state_mu_);
  ++stats_.faults;
  PageState& ps = pages_[page];
  if (ps.owned) {
    uffdio_continue c{};
    c.range.start = heap_.base() + page * page_;
    c.range.len = page_;
    if (::ioctl(uffd_, UFFDIO_CONTINUE, &c) != 0) {
      uffdio_range r{c.range.start, c.range.len};
      ::ioctl(uffd_, UFFDIO_WAKE, &r);
    }
    return;
  }
  if (ps.requested) return;
  ps.requested = true;
  wire::Writer w;
  w.u64(page).u64(ps.epoch);
  send(FrameType::page_req, w.data());
}

void FallbackSession::serve_deferred() {
  auto now = std::chrono::steady_clock::now();
  std::vector<uint64_t> keep;
  for (uint64_t page : deferred_) {
    PageState& ps = pages_[page];
    if (!ps.peer_waiting) continue;
    if (ps.last_sent > ps.peer_epoch) {
      ps.peer_waiting = false;
      ++stats_.stale_requests;
      continue;
    }
    if (ps.owned && now >= ps.hold_until) give_page(page);
    else keep.push_back(page);
  }
  deferred_.swap(keep);
}

void FallbackSession::handle_frame(const wire::Frame& f) {
  wire::Reader in(f.payload);
  switch (static_cast<FrameType>(f.type)) {
    case FrameType::page_req: {
      uint64_t page = in.u64();
      uint64_t epoch = in.u64();
      std::lock_guard lk(state_mu_);
      if (page >= pages_.size()) throw Error(Errc::protocol_error, "page out of range");
      PageState& ps = pages_[page];
      if (ps.last_sent > epoch) {
        // The peer asked before our last transfer reached it.
        ++stats_.stale_requests;
        return;
      }
      if (ps.owned && std::chrono::steady_clock::now() >= ps.hold_until) {
        give_page(page);
        return;
      }
      if (!ps.peer_waiting) deferred_.push_back(page);
      ps.peer_waiting = true;
      ps.peer_epoch = epoch;
      return;
    }
    case FrameType::page_data: {
      uint64_t page = in.u64();
      uint64_t epoch = in.u64();
      if (page >= pages_.size() || in.remaining() != page_) throw Error(Errc::protocol_error, "bad page frame");
      std::lock_guard lk(state_mu_);
      install_page(page, epoch, f.payload.data() + 16);
      return;
    }
    case FrameType::rpc_req: {
      RpcMessage m;
      m.sequence = in.u64();
      m.function_id = in.u32();
      m.flags = in.u32();
      m.arg = in.u64();
      m.scope.start = in.u64();
      m.scope.len = in.u64();
      m.seal_index = in.u32();
      m.seal_epoch = in.u64();
      m.call_slot = in.u32();
      if (on_request_) on_request_(m);
      return;
    }
    case FrameType::rpc_resp: {
      uint32_t slot = in.u32();
      uint32_t status = in.u32();
      uint64_t ret = in.u64();
      uint32_t flags = in.u32();
      if (on_response_) on_response_(slot, status, ret, flags);
      return;
    }
    case FrameType::seal_info: {
      uint32_t index = in.u32();
      SealDescriptor d{};
      d.start = in.u64();
      d.len = in.u64();
      d.state = in.u8();
      d.epoch = in.u64();
      if (on_seal_) on_seal_(index, d);
      return;
    }
    case FrameType::bye:
      alive_ = false;
      return;
    default:
      throw Error(Errc::protocol_error, "unexpected fallback frame " + std::to_string(f.type));
  }
}

void FallbackSession::driver() {
  // The driver touches the heap only through the alias, never the mirror.
  try {
    while (!stopping_ && alive_) {
      timespec ts{};
      timespec* timeout = nullptr;
      {
        std::lock_guard lk(state_mu_);
        serve_deferred();
        if (!deferred_.empty()) {
          ts.tv_nsec = 50'000;
          timeout = &ts;
        }
      }
      pollfd fds[3] = {{uffd_, POLLIN, 0}, {stream_.get(), POLLIN, 0}, {wake_fd_, POLLIN, 0}};
      int n = ::ppoll(fds, 3, timeout, nullptr);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw_errno(Errc::transport_down, "ppoll");
      }
      if (fds[0].revents & POLLIN) {
        uffd_msg msgs[16];
        ssize_t got = ::read(uffd_, msgs, sizeof msgs);
        for (ssize_t i = 0; got > 0 && i < got / static_cast<ssize_t>(sizeof(uffd_msg)); ++i)
          if (msgs[i].event == UFFD_EVENT_PAGEFAULT) handle_fault(msgs[i].arg.pagefault.address);
      }
      if (fds[1].revents & (POLLIN | POLLHUP | POLLERR)) {
        wire::Frame f;
        if (!wire::read_frame(stream_.get(), wire::TypeWidth::u8, f)) {
          alive_ = false;
          break;
        }
        handle_frame(f);
      }
    }
  } catch (const Error& e) {
    if (!stopping_) std::fprintf(stderr, "rpcool: fallback session ended: %s\n", e.what());
    alive_ = false;
  }
  if (!stopping_) {
    // Peer is gone: let blocked faults proceed on the local copy.
    std::lock_guard lk(state_mu_);
    shutdown_uffd();
  }
  if (on_close_) on_close_();
}

}  // namespace rpcool
