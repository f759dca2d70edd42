#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <thread>

#include "rpcool/orch_protocol.hpp"

namespace rpcool {

/// Blocking client for the orchestrator protocol. Calls may be issued from any
/// thread; replies are matched by correlation id. NOTIFY pushes are handed to
/// the notification callback on the reader thread.
class OrchestratorClient {
 public:
  using NotifyFn = std::function<void(const FailureNotification&)>;

  OrchestratorClient(const wire::Endpoint& ep, HolderId self);
  ~OrchestratorClient();
  OrchestratorClient(const OrchestratorClient&) = delete;
  OrchestratorClient& operator=(const OrchestratorClient&) = delete;

  const HolderId& self() const { return self_; }
  void on_notify(NotifyFn fn);

  RegisterResult register_channel(const std::string& name, HeapMode mode, uint64_t initial_heap_size,
                                  const std::string& pool_id, const std::string& fallback_endpoint,
                                  const std::vector<uint32_t>& allow_nodes = {});
  ChannelRecord lookup_channel(const std::string& name);
  HeapGrant allocate_heap(uint64_t size, uint64_t channel_id = 0);
  HeapGrant attach_heap(uint64_t heap_id);
  void release_heap(uint64_t heap_id);
  Nanos renew_lease(uint64_t lease_id);
  QuotaDecision check_quota(uint64_t additional);
  void close_channel(const std::string& name);

  void close();

 private:
  struct Waiter;
  std::vector<uint8_t> call(proto::MsgType type, const wire::Writer& body);
  void reader_loop();

  HolderId self_;
  wire::Fd fd_;
  std::mutex write_mu_;
  std::mutex mu_;
  std::map<uint64_t, std::shared_ptr<Waiter>> waiting_;
  std::atomic<uint64_t> next_corr_{1};
  std::atomic<bool> broken_{false};
  NotifyFn notify_;
  std::thread reader_;
};

}  // namespace rpcool
