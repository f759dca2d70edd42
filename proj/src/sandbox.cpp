#include "rpcool/sandbox.hpp"

#include <sched.h>
#include <sys/mman.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>

#include "rpcool/runtime.hpp"

namespace rpcool {

namespace {

constexpr uint32_t kDenyAll = 0x55555554u;  // access-disable for keys 1..15
constexpr size_t kArenaReserve = 64 * MiB;
constexpr size_t kArenaStep = 1 * MiB;

int sys_pkey_alloc() { return static_cast<int>(::syscall(SYS_pkey_alloc, 0UL, 0UL)); }
void sys_pkey_free(int k) { ::syscall(SYS_pkey_free, k); }
int sys_pkey_mprotect(uintptr_t a, size_t len, int prot, int key) {
  return static_cast<int>(::syscall(SYS_pkey_mprotect, a, len, prot, key));
}

struct Arena {
  uint8_t* base = nullptr;
  size_t committed = 0;  // bytes currently read-write
  size_t used = 0;

  void reserve() {
    if (base) return;
    void* p = ::mmap(nullptr, kArenaReserve, PROT_NONE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    if (p == MAP_FAILED) throw_errno(Errc::sandbox_unavailable, "reserve sandbox arena");
    base = static_cast<uint8_t*>(p);
  }
  void* allocate(size_t size, size_t align) {
    reserve();
    size_t at = round_up(used, align);
    if (at + size > kArenaReserve) throw Error(Errc::out_of_space, "sandbox arena exhausted");
    if (at + size > committed) {
      size_t want = round_up(at + size, kArenaStep);
      if (::mprotect(base + committed, want - committed, PROT_READ | PROT_WRITE) != 0)
        throw_errno(Errc::sandbox_unavailable, "grow sandbox arena");
      committed = want;
    }
    used = at + size;
    return base + at;
  }
  void discard() {
    if (committed == 0) return;
    // Zero-fill on next use and make stale pointers fault.
    ::madvise(base, committed, MADV_DONTNEED);
    ::mprotect(base, committed, PROT_NONE);
    committed = 0;
    used = 0;
  }
};

thread_local Arena t_arena;
thread_local Sandbox* t_active = nullptr;

// Portable mode: which thread currently holds the process-wide sandbox.
std::atomic<pid_t> g_portable_tid{0};

pid_t this_tid() {
  static thread_local pid_t tid = static_cast<pid_t>(::syscall(SYS_gettid));
  return tid;
}

bool portable_wait_hook(uintptr_t) {
  pid_t owner = g_portable_tid.load(std::memory_order_acquire);
  if (owner == 0 || owner == this_tid()) return false;
  while (g_portable_tid.load(std::memory_order_acquire) == owner) ::sched_yield();
  return true;
}

SandboxModeRequest request_from_env(SandboxModeRequest dflt) {
  if (auto v = env("RPCOOL_SANDBOX_MODE")) {
    if (*v == "hardware" || *v == "pku") return SandboxModeRequest::hardware;
    if (*v == "portable") return SandboxModeRequest::portable;
    if (*v == "auto") return SandboxModeRequest::automatic;
  }
  return dflt;
}

}  // namespace

std::string_view to_string(SandboxMode m) { return m == SandboxMode::hardware ? "hardware" : "portable"; }

SandboxManager& SandboxManager::instance() {
  static SandboxManager* m = new SandboxManager;
  return *m;
}

void SandboxManager::configure(SandboxModeRequest req, uint32_t cached) {
  std::lock_guard lk(mu_);
  if (!configured_) init_locked(req, cached);
}

void SandboxManager::init_locked(SandboxModeRequest req, uint32_t cached) {
  configured_ = true;
  install_fault_handler();
  if (cached == 0 || cached > 14) throw Error(Errc::config_error, "cached sandbox slots must be 1..14");
  slots_.assign(cached, Slot{});
  mode_ = SandboxMode::portable;
  if (req != SandboxModeRequest::portable && pku_supported()) {
    std::vector<int> keys;
    for (uint32_t i = 0; i < cached + 1; ++i) {
      int k = sys_pkey_alloc();
      if (k < 0) break;
      keys.push_back(k);
    }
    if (keys.size() == cached + 1) {
      mode_ = SandboxMode::hardware;
      protected_key_ = keys[0];
      for (uint32_t i = 0; i < cached; ++i) slots_[i].pkey = keys[i + 1];
      pkru_normal_ = read_pkru();
    } else {
      for (int k : keys) sys_pkey_free(k);
    }
  }
  if (req == SandboxModeRequest::hardware && mode_ != SandboxMode::hardware)
    throw Error(Errc::sandbox_unavailable, "protection keys requested but not available");
  if (mode_ == SandboxMode::portable) set_fault_wait_hook(portable_wait_hook);
}

SandboxMode SandboxManager::mode() {
  std::lock_guard lk(mu_);
  if (!configured_) init_locked(request_from_env(SandboxModeRequest::automatic), 14);
  return mode_;
}

uint32_t SandboxManager::cached_slots() {
  mode();
  return static_cast<uint32_t>(slots_.size());
}

uint32_t SandboxManager::pkru_for(const SandboxRegion& r) const {
  if (r.pkey < 0) return pkru_normal_;
  return kDenyAll & ~(3u << (2 * r.pkey));
}

void SandboxManager::rekey(AddrRange r, int pkey) {
  if (r.empty()) return;
  // Keep each page's protection; only the key changes.
  std::vector<std::pair<AddrRange, Perm>> runs;
  if (auto* rt = NodeRuntime::current_or_null()) {
    for (auto& [run, perm] : rt->permission_runs(Privileged{}, r)) {
      uintptr_t s = std::max(run.start, r.start), e = std::min(run.end(), r.end());
      if (s < e) runs.push_back({{s, e - s}, perm});
    }
  }
  if (runs.empty()) runs.push_back({r, Perm::read_write});
  for (auto& [run, perm] : runs) sys_pkey_mprotect(run.start, run.len, to_prot(perm), pkey);
}

void SandboxManager::on_shared_mapped(AddrRange r) {
  if (mode() != SandboxMode::hardware) return;
  std::lock_guard lk(mu_);
  if (sys_pkey_mprotect(r.start, r.len, PROT_READ | PROT_WRITE, protected_key_) != 0)
    throw_errno(Errc::sandbox_unavailable, "pkey_mprotect heap");
}

void SandboxManager::on_shared_unmapped(AddrRange r) {
  mode();
  std::lock_guard lk(mu_);
  for (auto& s : slots_)
    if (s.range.overlaps(r)) s.range = {};
}

void SandboxManager::register_private(AddrRange r) {
  if (mode() == SandboxMode::hardware) {
    std::lock_guard lk(mu_);
    if (sys_pkey_mprotect(r.start, r.len, PROT_READ | PROT_WRITE, protected_key_) != 0)
      throw_errno(Errc::invalid_argument, "pkey_mprotect private region");
  }
  AddressSpace::instance().add_private(r);
}

void SandboxManager::unregister_private(AddrRange r) {
  AddressSpace::instance().remove_private(r);
  if (mode() == SandboxMode::hardware) sys_pkey_mprotect(r.start, r.len, PROT_READ | PROT_WRITE, 0);
}

int SandboxManager::find_free_covering(AddrRange r) const {
  for (size_t i = 0; i < slots_.size(); ++i)
    if (!slots_[i].busy && !slots_[i].range.empty() && slots_[i].range.contains(r)) return static_cast<int>(i);
  return -1;
}

SandboxRegion SandboxManager::take(uint32_t i, bool fast) {
  Slot& s = slots_[i];
  s.busy = true;
  s.last_use = ++tick_;
  (fast ? fast_ : slow_)++;
  return SandboxRegion{i, mode_ == SandboxMode::hardware ? s.pkey : -1, s.range};
}

void SandboxManager::bind(uint32_t i, AddrRange r) {
  Slot& s = slots_[i];
  // Free slots overlapping the new range lose their binding.
  for (auto& o : slots_) {
    if (&o == &s || o.range.empty() || !o.range.overlaps(r)) continue;
    if (mode_ == SandboxMode::hardware) rekey(o.range, protected_key_);
    o.range = {};
  }
  if (mode_ == SandboxMode::hardware) {
    rekey(s.range, protected_key_);
    rekey(r, s.pkey);
  }
  s.range = r;
}

void SandboxManager::prebind(AddrRange r) {
  mode();
  std::lock_guard lk(mu_);
  for (uint32_t i = 0; i < slots_.size(); ++i) {
    if (!slots_[i].busy && slots_[i].range.empty()) {
      bind(i, r);
      return;
    }
  }
  throw Error(Errc::sandbox_unavailable, "no unbound sandbox slot");
}

void SandboxManager::set_region_source(std::function<AddrRange(size_t)> fn) {
  std::lock_guard lk(mu_);
  source_ = std::move(fn);
}

SandboxRegion SandboxManager::acquire(AddrRange r) {
  if (r.empty()) throw Error(Errc::empty_range, "sandbox over zero bytes");
  const uint64_t ps = host_page_size();
  if (r.start % ps != 0 || r.len % ps != 0) throw Error(Errc::not_page_aligned, "sandbox ranges are whole pages");
  mode();
  std::unique_lock lk(mu_);
  for (;;) {
    if (int i = find_free_covering(r); i >= 0) return take(static_cast<uint32_t>(i), true);
    bool blocked = std::any_of(slots_.begin(), slots_.end(), [&](const Slot& s) { return s.busy && s.range.overlaps(r); });
    int victim = -1;
    if (!blocked) {
      for (size_t i = 0; i < slots_.size(); ++i) {
        if (slots_[i].busy) continue;
        if (victim < 0 || slots_[i].range.empty() ||
            (!slots_[victim].range.empty() && slots_[i].last_use < slots_[victim].last_use))
          victim = static_cast<int>(i);
        if (slots_[victim].range.empty()) break;
      }
    }
    if (victim >= 0) {
      bind(static_cast<uint32_t>(victim), r);
      return take(static_cast<uint32_t>(victim), false);
    }
    cv_.wait(lk);
  }
}

SandboxRegion SandboxManager::acquire_cached_sandbox(size_t size) {
  mode();
  std::unique_lock lk(mu_);
  for (size_t i = 0; i < slots_.size(); ++i)
    if (!slots_[i].busy && slots_[i].range.len >= size && size > 0) return take(static_cast<uint32_t>(i), true);
  for (;;) {
    int pick = -1;
    for (size_t i = 0; i < slots_.size(); ++i) {
      if (slots_[i].busy) continue;
      if (pick < 0 || slots_[i].range.len > slots_[pick].range.len) pick = static_cast<int>(i);
    }
    if (pick >= 0) {
      if (slots_[pick].range.len < size || size == 0) {
        if (!source_) throw Error(Errc::sandbox_unavailable, "no cached sandbox large enough and no region source");
        bind(static_cast<uint32_t>(pick), source_(size));
      }
      return take(static_cast<uint32_t>(pick), false);
    }
    cv_.wait(lk);
  }
}

void SandboxManager::release(const SandboxRegion& region) {
  {
    std::lock_guard lk(mu_);
    if (region.slot < slots_.size()) slots_[region.slot].busy = false;
  }
  cv_.notify_all();
}

void SandboxManager::portable_hide(AddrRange keep) {
  auto hide = [&](AddrRange r) {
    uintptr_t s = r.start, e = r.end();
    if (keep.overlaps(r)) {
      if (s < keep.start) ::mprotect(reinterpret_cast<void*>(s), keep.start - s, PROT_NONE);
      if (keep.end() < e) ::mprotect(reinterpret_cast<void*>(keep.end()), e - keep.end(), PROT_NONE);
    } else {
      ::mprotect(reinterpret_cast<void*>(s), e - s, PROT_NONE);
    }
  };
  for (const auto& s : AddressSpace::instance().shared()) hide(s.range);
  for (const auto& p : AddressSpace::instance().private_regions()) hide(p);
}

void SandboxManager::portable_restore() {
  auto* rt = NodeRuntime::current_or_null();
  std::vector<std::pair<AddrRange, Perm>> runs;
  if (rt) runs = rt->permission_runs(Privileged{});
  for (const auto& s : AddressSpace::instance().shared()) {
    bool covered = std::any_of(runs.begin(), runs.end(), [&](auto& r) { return s.range.contains(r.first); });
    if (!covered) runs.push_back({s.range, Perm::read_write});
  }
  for (const auto& p : AddressSpace::instance().private_regions()) runs.push_back({p, Perm::read_write});
  for (auto& [r, perm] : runs) ::mprotect(reinterpret_cast<void*>(r.start), r.len, to_prot(perm));
}

void SandboxManager::reset_after_fork() {
  // The child has none of the parent's heaps and only the forking thread.
  for (auto& s : slots_) {
    s.range = {};
    s.busy = false;
  }
  new (&mu_) std::mutex;
  new (&cv_) std::condition_variable;
  new (&portable_mu_) std::mutex;
  g_portable_tid.store(0);
  t_active = nullptr;
}

// Sandbox ---------------------------------------------------------------------

Sandbox Sandbox::begin(AddrRange range, std::initializer_list<CopyIn> vars) {
  // Checked before acquiring: the thread's own busy slot would block us.
  if (t_active != nullptr) throw Error(Errc::nested_sandbox, "thread is already sandboxed");
  auto& mgr = SandboxManager::instance();
  SandboxRegion reg = mgr.acquire(range);
  try {
    Sandbox sb = begin(reg, vars);
    sb.owns_slot_ = true;
    sb.region_.range = range;
    return sb;
  } catch (...) {
    mgr.release(reg);
    throw;
  }
}

Sandbox Sandbox::begin(const SandboxRegion& region, std::initializer_list<CopyIn> vars) {
  if (t_active != nullptr) throw Error(Errc::nested_sandbox, "thread is already sandboxed");
  auto& mgr = SandboxManager::instance();
  const SandboxMode mode = mgr.mode();
  bool known = false;
  for (auto& s : AddressSpace::instance().shared()) known |= s.range.contains(region.range);
  if (region.range.empty() || !known) throw Error(Errc::range_outside_heaps, "sandbox range is not inside a mapped heap");
  Sandbox sb;
  sb.region_ = region;
  sb.owner_ = std::this_thread::get_id();
  for (const CopyIn& v : vars) {
    void* dst = t_arena.allocate(v.size, v.align);
    std::memcpy(dst, v.src, v.size);
    sb.vars_.push_back(dst);
  }
  if (mode == SandboxMode::hardware) {
    sb.pkru_outside_ = read_pkru();
    write_pkru(mgr.pkru_for(region));
  } else {
    mgr.portable_mu_.lock();
    g_portable_tid.store(this_tid(), std::memory_order_release);
    mgr.portable_hide(region.range);
  }
  sb.active_ = true;
  t_active = &sb;
  return sb;
}

Sandbox::Sandbox(Sandbox&& o) noexcept
    : region_(o.region_), owns_slot_(o.owns_slot_), active_(o.active_), owner_(o.owner_),
      pkru_outside_(o.pkru_outside_), vars_(std::move(o.vars_)) {
  o.active_ = false;
  o.owns_slot_ = false;
  if (t_active == &o) t_active = this;
}

Sandbox::~Sandbox() {
  if (active_ && owner_ == std::this_thread::get_id()) {
    try {
      end();
    } catch (const Error&) {
    }
  }
}

void Sandbox::end() {
  if (owner_ != std::this_thread::get_id()) throw Error(Errc::foreign_sandbox, "sandbox belongs to another thread");
  if (!active_) throw Error(Errc::sandbox_ended, "sandbox already ended");
  auto& mgr = SandboxManager::instance();
  if (mgr.mode() == SandboxMode::hardware) {
    write_pkru(pkru_outside_);
  } else {
    mgr.portable_restore();
    g_portable_tid.store(0, std::memory_order_release);
    mgr.portable_mu_.unlock();
  }
  t_arena.discard();
  active_ = false;
  t_active = nullptr;
  vars_.clear();
  if (owns_slot_) {
    owns_slot_ = false;
    mgr.release(region_);
  }
}

void* Sandbox::arena_allocate(size_t size, size_t align) {
  if (t_active == nullptr) throw Error(Errc::sandbox_ended, "arena allocation outside a sandbox");
  return t_arena.allocate(size, align);
}

bool Sandbox::in_sandbox() { return t_active != nullptr; }

bool Sandbox::in_arena(const void* p) {
  auto a = static_cast<const uint8_t*>(p);
  return t_arena.base != nullptr && a >= t_arena.base && a < t_arena.base + kArenaReserve;
}

size_t Sandbox::arena_capacity() { return kArenaReserve; }

}  // namespace rpcool
