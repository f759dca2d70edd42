#pragma once

// Synchronous memory-fault recovery. A process-wide SIGSEGV/SIGBUS handler
// checks whether the faulting thread has an armed guard; if so it jumps back
// to the guard, otherwise the fault is forwarded to whatever handler was
// installed before (or the default action).
//
// Code running under a guard must not rely on destructors between the guard
// and the fault site: the unwind is a siglongjmp.

#include <csetjmp>
#include <cstdint>
#include <optional>
#include <utility>

namespace rpcool {

struct FaultInfo {
  int signo = 0;
  int code = 0;  // si_code, e.g. SEGV_ACCERR or SEGV_PKUERR
  uintptr_t addr = 0;
};

// Protection-key register access (x86-64 PKU). No-ops elsewhere.
bool pku_supported() noexcept;
uint32_t read_pkru() noexcept;
void write_pkru(uint32_t v) noexcept;

namespace detail {

struct FaultGuard {
  sigjmp_buf env;
  FaultInfo info;
  FaultGuard* prev = nullptr;
  uint32_t pkru = 0;  // protection-key rights restored after a fault
  bool restore_pkru = false;
};

FaultGuard*& current_guard() noexcept;
void restore_after_fault(FaultGuard& g) noexcept;

}  // namespace detail

/// Installs the handler once per process. Safe to call repeatedly.
void install_fault_handler();

/// Runs `fn()`; returns the fault if one interrupted it.
template <class F>
std::optional<FaultInfo> catch_fault(F&& fn, std::optional<uint32_t> pkru_after_fault = std::nullopt) {
  install_fault_handler();
  detail::FaultGuard g;
  g.prev = detail::current_guard();
  // Signal delivery resets PKRU; by default go back to the rights at entry.
  if (pku_supported()) {
    g.pkru = pkru_after_fault ? *pkru_after_fault : read_pkru();
    g.restore_pkru = true;
  }
  if (sigsetjmp(g.env, 1) != 0) {
    detail::restore_after_fault(g);
    detail::current_guard() = g.prev;
    return g.info;
  }
  detail::current_guard() = &g;
  std::forward<F>(fn)();
  detail::current_guard() = g.prev;
  return std::nullopt;
}

/// Consulted first for every fault. Returning true retries the faulting
/// instruction (the hook has waited for the condition that caused it).
void set_fault_wait_hook(bool (*hook)(uintptr_t addr));

/// True if one byte at `addr` can be read.
bool probe_read(const void* addr) noexcept;
/// Stores `value` at `addr`; true if the store took effect without a fault.
bool probe_write(void* addr, uint8_t value) noexcept;

/// Number of faults recovered by guards in this process.
uint64_t recovered_faults() noexcept;


}  // namespace rpcool
