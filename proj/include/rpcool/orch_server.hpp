#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

#include "rpcool/orchestrator.hpp"
#include "rpcool/wire.hpp"

namespace rpcool {

/// Serves the orchestrator protocol over TCP and runs the lease sweeper.
/// Failure notifications for holders without a live session are retried for
/// one lease period and then dropped.
class OrchestratorServer {
 public:
  struct Options {
    wire::Endpoint listen{"127.0.0.1", 7470};
    /// 0: a quarter of the renew interval.
    Nanos sweep_interval{0};
  };

  OrchestratorServer(Orchestrator& core, Options opts);
  ~OrchestratorServer();
  OrchestratorServer(const OrchestratorServer&) = delete;
  OrchestratorServer& operator=(const OrchestratorServer&) = delete;

  wire::Endpoint endpoint() const { return endpoint_; }
  Orchestrator& core() { return core_; }
  void stop();

  /// Notifications delivered so far (for tests).
  uint64_t notifications_sent() const { return sent_.load(); }

  static Nanos wall_now();

 private:
  struct Session {
    wire::Fd fd;
    std::mutex write_mu;
    std::thread thread;
    std::atomic<bool> done{false};
  };
  struct Pending {
    FailureNotification note;
    Nanos deadline;
  };

  void accept_loop();
  void session_loop(std::shared_ptr<Session> s);
  std::vector<uint8_t> handle(Session& s, uint16_t type, wire::Reader& in, uint64_t corr);
  void bind_holder(const HolderId& h, const std::shared_ptr<Session>& s);
  void sweep_loop();
  bool deliver(const FailureNotification& n);

  Orchestrator& core_;
  Options opts_;
  wire::Fd listen_fd_;
  wire::Endpoint endpoint_;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::thread sweep_thread_;
  std::mutex mu_;
  std::condition_variable sweep_cv_;
  std::vector<std::shared_ptr<Session>> sessions_;
  std::map<HolderId, std::weak_ptr<Session>> by_holder_;
  std::deque<Pending> pending_;
  std::atomic<uint64_t> sent_{0};
};

}  // namespace rpcool
