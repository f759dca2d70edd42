#include "rpcool/fault.hpp"

#include <signal.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <mutex>

#if defined(__x86_64__)
#include <cpuid.h>
#endif

namespace rpcool {

namespace {

thread_local detail::FaultGuard* t_guard = nullptr;
struct sigaction g_prev_segv {};
struct sigaction g_prev_bus {};
std::atomic<uint64_t> g_recovered{0};
std::once_flag g_once;
std::atomic<bool (*)(uintptr_t)> g_wait_hook{nullptr};

void forward(int sig, siginfo_t* si, void* uc) {
  const struct sigaction& prev = sig == SIGBUS ? g_prev_bus : g_prev_segv;
  if (prev.sa_flags & SA_SIGINFO) {
    if (prev.sa_sigaction) {
      prev.sa_sigaction(sig, si, uc);
      return;
    }
  } else if (prev.sa_handler != SIG_DFL && prev.sa_handler != SIG_IGN) {
    prev.sa_handler(sig);
    return;
  }
  // Default action: reinstall it and let the faulting instruction rerun.
  signal(sig, SIG_DFL);
}

void on_fault(int sig, siginfo_t* si, void* uc) {
  if (auto hook = g_wait_hook.load(std::memory_order_acquire); hook && hook(reinterpret_cast<uintptr_t>(si->si_addr)))
    return;
  detail::FaultGuard* g = t_guard;
  if (g == nullptr) {
    forward(sig, si, uc);
    return;
  }
  g->info.signo = sig;
  g->info.code = si->si_code;
  g->info.addr = reinterpret_cast<uintptr_t>(si->si_addr);
  g_recovered.fetch_add(1, std::memory_order_relaxed);
  siglongjmp(g->env, 1);
}

}  // namespace

detail::FaultGuard*& detail::current_guard() noexcept { return t_guard; }

void detail::restore_after_fault(FaultGuard& g) noexcept {
  // Signal delivery resets PKRU to the kernel default, and siglongjmp does
  // not restore it.
  if (g.restore_pkru) write_pkru(g.pkru);
}

void set_fault_wait_hook(bool (*hook)(uintptr_t)) { g_wait_hook.store(hook, std::memory_order_release); }

void install_fault_handler() {
  std::call_once(g_once, [] {
    struct sigaction sa {};
    sa.sa_sigaction = on_fault;
    sa.sa_flags = SA_SIGINFO | SA_NODEFER;
    sigemptyset(&sa.sa_mask);
    sigaction(SIGSEGV, &sa, &g_prev_segv);
    sigaction(SIGBUS, &sa, &g_prev_bus);
  });
}

bool probe_read(const void* addr) noexcept {
  auto f = catch_fault([&] {
    volatile const uint8_t* p = static_cast<const uint8_t*>(addr);
    (void)*p;
  });
  return !f.has_value();
}

bool probe_write(void* addr, uint8_t value) noexcept {
  auto f = catch_fault([&] {
    volatile uint8_t* p = static_cast<uint8_t*>(addr);
    *p = value;
  });
  return !f.has_value();
}

uint64_t recovered_faults() noexcept { return g_recovered.load(std::memory_order_relaxed); }

#if defined(__x86_64__)

bool pku_supported() noexcept {
  static const bool ok = [] {
    unsigned a, b, c, d;
    if (!__get_cpuid_count(7, 0, &a, &b, &c, &d)) return false;
    // CPUID.7.0:ECX bit 3 = PKU, bit 4 = OSPKE.
    return (c & (1u << 3)) && (c & (1u << 4));
  }();
  return ok;
}

uint32_t read_pkru() noexcept {
  if (!pku_supported()) return 0;
  uint32_t eax, edx;
  asm volatile(".byte 0x0f,0x01,0xee" : "=a"(eax), "=d"(edx) : "c"(0));
  return eax;
}

void write_pkru(uint32_t v) noexcept {
  if (!pku_supported()) return;
  asm volatile(".byte 0x0f,0x01,0xef" : : "a"(v), "c"(0), "d"(0) : "memory");
}

#else

bool pku_supported() noexcept { return false; }
uint32_t read_pkru() noexcept { return 0; }
void write_pkru(uint32_t) noexcept {}

#endif

}  // namespace rpcool
