#pragma once

// Two-node page-ownership coherence over a reliable byte stream.
//
// Both ends map a private copy of the heap at its fixed base. Every page has
// exactly one owner; only the owner has it mapped. Touching a page owned by
// the peer raises a minor fault (userfaultfd) that the session driver turns
// into PAGE_REQ; the owner unmaps its copy, ships the bytes in PAGE_DATA and
// the faulting access resumes once the page is installed.
//
// Frames: u32 length (bytes after this field) | u8 type | payload, integers
// little-endian:
//   1 PAGE_REQ   u64 page, u64 requester's epoch for the page
//   2 PAGE_DATA  u64 page, u64 new epoch, page bytes
//   3 RPC_REQ    u64 sequence, u32 function, u32 flags, u64 arg,
//                u64 scope start, u64 scope length, u32 seal index,
//                u64 seal epoch, u32 call slot
//   4 RPC_RESP   u32 call slot, u32 status, u64 return value, u32 flags
//   5 SEAL_INFO  u32 index, u64 start, u64 length, u8 state, u64 epoch
//   6 BYE
//   7 ESTABLISH  handshake before the session starts (see rpc.cpp)

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <thread>
#include <vector>

#include "rpcool/ring.hpp"
#include "rpcool/runtime.hpp"
#include "rpcool/seal.hpp"
#include "rpcool/wire.hpp"

namespace rpcool {

enum class FrameType : uint8_t {
  page_req = 1,
  page_data = 2,
  rpc_req = 3,
  rpc_resp = 4,
  seal_info = 5,
  bye = 6,
  establish = 7,
};

enum RespFlags : uint32_t { kRespSealCompleted = 1u << 0 };

struct FallbackStats {
  uint64_t faults = 0;
  uint64_t pages_in = 0;
  uint64_t pages_out = 0;
  uint64_t stale_requests = 0;
};

class FallbackSession {
 public:
  enum class Role { server, client };

  using RequestFn = std::function<void(const RpcMessage&)>;
  using ResponseFn = std::function<void(uint32_t call_slot, uint32_t status, uint64_t ret, uint32_t flags)>;
  using SealInfoFn = std::function<void(uint32_t index, const SealDescriptor&)>;
  using CloseFn = std::function<void()>;

  /// Takes over `stream` after the handshake. `heap` must be a mirror
  /// mapping; the server starts out owning every page.
  FallbackSession(Role role, wire::Fd stream, MappedHeap& heap);
  ~FallbackSession();
  FallbackSession(const FallbackSession&) = delete;
  FallbackSession& operator=(const FallbackSession&) = delete;

  /// Handlers run on the driver thread and must not touch the heap.
  void on_request(RequestFn fn);
  void on_response(ResponseFn fn);
  void on_seal_info(SealInfoFn fn);
  void on_close(CloseFn fn);
  /// Starts the driver. Handlers must be set first.
  void start();

  void send_request(const RpcMessage& m);
  void send_response(uint32_t call_slot, uint32_t status, uint64_t ret, uint32_t flags);
  void send_seal_info(uint32_t index, const SealDescriptor& d);
  /// Sends BYE and stops the driver.
  void close();

  bool alive() const { return alive_.load(); }
  Role role() const { return role_; }
  uint64_t heap_id() const { return heap_.desc.id; }
  FallbackStats stats() const;
  /// Pages this side owns right now.
  std::vector<bool> ownership() const;
  bool owns(uint64_t page) const;

 private:
  struct PageState {
    bool owned = false;
    bool requested = false;
    uint64_t epoch = 0;
    uint64_t last_sent = 0;  // epoch of our last transfer to the peer
    bool peer_waiting = false;
    uint64_t peer_epoch = 0;
    std::chrono::steady_clock::time_point hold_until{};
  };

  void driver();
  void handle_fault(uint64_t addr);
  void handle_frame(const wire::Frame& f);
  void give_page(uint64_t page);
  void install_page(uint64_t page, uint64_t epoch, const uint8_t* data);
  void serve_deferred();
  void send(FrameType t, const std::vector<uint8_t>& payload);
  void shutdown_uffd();

  Role role_;
  wire::Fd stream_;
  MappedHeap& heap_;
  uint8_t* alias_ = nullptr;
  uint64_t page_ = 4096;
  int uffd_ = -1;
  int wake_fd_ = -1;
  std::thread driver_;
  std::atomic<bool> alive_{true};
  std::atomic<bool> stopping_{false};
  std::mutex send_mu_;
  mutable std::mutex state_mu_;
  std::vector<PageState> pages_;
  std::vector<uint64_t> deferred_;  // pages the peer asked for while held or in flight
  FallbackStats stats_;
  RequestFn on_request_;
  ResponseFn on_response_;
  SealInfoFn on_seal_;
  CloseFn on_close_;
};

/// Hold time after a page arrives before it may migrate back; lets the
/// faulting instruction complete and prevents ping-pong livelock.
inline constexpr std::chrono::microseconds kPageHold{200};

}  // namespace rpcool
