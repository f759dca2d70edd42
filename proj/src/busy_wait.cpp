#include "rpcool/busy_wait.hpp"

#include <sched.h>
#include <time.h>

#include <algorithm>
#include <thread>

namespace rpcool {

namespace {

int64_t clock_ns(clockid_t id) {
  timespec ts{};
  clock_gettime(id, &ts);
  return int64_t{ts.tv_sec} * 1'000'000'000 + ts.tv_nsec;
}

}  // namespace

Micros next_sleep(double load, const BusyWaitConfig& cfg) {
  if (load < cfg.low_load) return cfg.sleep_low;
  if (load < cfg.high_load) return cfg.sleep_mid;
  return cfg.sleep_high;
}

CpuLoadMeter::CpuLoadMeter(Nanos window) : window_(window) {
  cores_ = std::max(1u, std::thread::hardware_concurrency());
  wall_ns_ = clock_ns(CLOCK_MONOTONIC);
  cpu_ns_ = clock_ns(CLOCK_PROCESS_CPUTIME_ID);
}

double CpuLoadMeter::load() {
  std::lock_guard lk(mu_);
  int64_t wall = clock_ns(CLOCK_MONOTONIC);
  if (wall - wall_ns_ < window_.count()) return last_;
  int64_t cpu = clock_ns(CLOCK_PROCESS_CPUTIME_ID);
  double l = static_cast<double>(cpu - cpu_ns_) / static_cast<double>(wall - wall_ns_) / cores_;
  last_ = std::clamp(l, 0.0, 1.0);
  wall_ns_ = wall;
  cpu_ns_ = cpu;
  return last_;
}

CpuLoadMeter& process_load_meter() {
  static CpuLoadMeter* m = new CpuLoadMeter;
  return *m;
}

BusyWaiter::BusyWaiter(BusyWaitConfig cfg, CpuLoadMeter* meter)
    : cfg_(cfg), meter_(meter ? meter : &process_load_meter()) {}

void BusyWaiter::worked() { in_burst_ = false; }

void BusyWaiter::idle() {
  auto now = std::chrono::steady_clock::now();
  if (!in_burst_) {
    in_burst_ = true;
    burst_start_ = now;
  }
  if (now - burst_start_ < cfg_.burst) {
    // One CPU may be shared with the peer; let it run.
    ::sched_yield();
    return;
  }
  Micros s = next_sleep(meter_->load(), cfg_);
  if (s.count() > 0) {
    ++sleeps_;
    std::this_thread::sleep_for(s);
  } else {
    ::sched_yield();
  }
  in_burst_ = false;
}

}  // namespace rpcool
