#pragma once

// Single-host cluster for tests, benchmarks and demos: an in-process
// orchestrator on an ephemeral port with a private pool directory, plus a
// helper for forked peer processes.

#include <signal.h>
#include <stdlib.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <thread>

#include "rpcool/orch_server.hpp"
#include "rpcool/orchestrator.hpp"
#include "rpcool/runtime.hpp"

namespace rpcool {


/// In-process orchestrator on an ephemeral port with a private pool directory.
class LocalCluster {
 public:
  explicit LocalCluster(OrchestratorConfig cfg = fast_config()) {
    char tmpl[] = "/dev/shm/rpcool-test-XXXXXX";
    pool_dir_ = ::mkdtemp(tmpl);
    cfg.pool_dir = pool_dir_;
    core_ = std::make_unique<Orchestrator>(cfg);
    OrchestratorServer::Options o;
    o.listen = {"127.0.0.1", 0};
    server_ = std::make_unique<OrchestratorServer>(*core_, o);
  }
  ~LocalCluster() {
    server_->stop();
    std::error_code ec;
    std::filesystem::remove_all(pool_dir_, ec);
  }

  static OrchestratorConfig fast_config() {
    OrchestratorConfig c;
    c.renew_interval = std::chrono::milliseconds(100);
    c.missed_renewals = 3;
    c.default_quota = 4 * GiB;
    return c;
  }

  RuntimeConfig runtime(uint32_t node = 1, bool pool_access = true) const {
    RuntimeConfig r;
    r.node_id = node;
    r.orchestrator = server_->endpoint().str();
    r.pool_dir = pool_dir_;
    r.pool_access = pool_access;
    r.renew_interval = std::chrono::milliseconds(100);
    if (auto m = env("RPCOOL_SANDBOX_MODE")) {
      if (*m == "portable") r.sandbox_mode = SandboxModeRequest::portable;
      if (*m == "hardware") r.sandbox_mode = SandboxModeRequest::hardware;
    }
    return r;
  }

  Orchestrator& core() { return *core_; }
  OrchestratorServer& server() { return *server_; }
  const std::string& pool_dir() const { return pool_dir_; }

 private:
  std::string pool_dir_;
  std::unique_ptr<Orchestrator> core_;
  std::unique_ptr<OrchestratorServer> server_;
};

/// Forked child process running `fn`; its return value is the exit status.
class Child {
 public:
  explicit Child(std::function<int()> fn) {
    pid_ = ::fork();
    if (pid_ == 0) {
      int rc = 99;
      try {
        rc = fn();
      } catch (const std::exception& e) {
        std::fprintf(stderr, "child failed: %s\n", e.what());
        rc = 98;
      }
      std::fflush(nullptr);
      ::_exit(rc);
    }
  }
  ~Child() {
    if (pid_ > 0 && !reaped_) {
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, nullptr, 0);
    }
  }
  /// Exit status, or -signal, or -1000 on timeout (the child is killed).
  int wait(std::chrono::milliseconds timeout = std::chrono::seconds(60)) {
    auto deadline = std::chrono::steady_clock::now() + timeout;
    int st = 0;
    while (true) {
      pid_t r = ::waitpid(pid_, &st, WNOHANG);
      if (r == pid_) break;
      if (std::chrono::steady_clock::now() > deadline) {
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, &st, 0);
        reaped_ = true;
        return -1000;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    reaped_ = true;
    if (WIFEXITED(st)) return WEXITSTATUS(st);
    return -WTERMSIG(st);
  }
  void kill() {
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, nullptr, 0);
    reaped_ = true;
  }
  pid_t pid() const { return pid_; }

 private:
  pid_t pid_ = -1;
  bool reaped_ = false;
};

}  // namespace rpcool
