#pragma once

#include <chrono>
#include <cstdint>
#include <mutex>

#include "rpcool/config.hpp"

namespace rpcool {

/// Sleep between polling bursts as a step function of CPU load in [0, 1]:
/// below `low_load` no sleep, below `high_load` a short sleep, else a long one.
Micros next_sleep(double load, const BusyWaitConfig& cfg = {});

/// Process CPU load over a sliding window (CPU time / wall time / cores).
class CpuLoadMeter {
 public:
  explicit CpuLoadMeter(Nanos window = std::chrono::milliseconds(100));
  /// Current estimate; cheap when called more often than the window.
  double load();

 private:
  Nanos window_;
  std::mutex mu_;
  int64_t wall_ns_ = 0;
  int64_t cpu_ns_ = 0;
  double last_ = 0.0;
  unsigned cores_ = 1;
};

/// Poll loop helper: call poll() until it reports work; when a burst passes
/// without work, sleeps according to the load policy.
class BusyWaiter {
 public:
  explicit BusyWaiter(BusyWaitConfig cfg = {}, CpuLoadMeter* meter = nullptr);
  /// Records an idle poll; may yield or sleep.
  void idle();
  /// Records useful work; restarts the burst.
  void worked();
  uint64_t sleeps() const { return sleeps_; }

 private:
  BusyWaitConfig cfg_;
  CpuLoadMeter* meter_;
  std::chrono::steady_clock::time_point burst_start_;
  bool in_burst_ = false;
  uint64_t sleeps_ = 0;
};

/// Shared meter for all poll loops of the process.
CpuLoadMeter& process_load_meter();

}  // namespace rpcool
