#pragma once

// Per-thread memory sandboxes.
//
// Hardware mode (x86 protection keys): every shared heap page and every
// registered private region carries one "protected" key. Each of the cached
// sandbox slots owns a key of its own; a sandbox is entered by rewriting the
// thread's PKRU so that only key 0 (stack, TLS, libc), the slot's key and the
// thread's temporary arena stay accessible. Re-keying a range to another slot
// is the slow path.
//
// Portable mode: the sandbox revokes access to all heaps and registered
// private regions with mprotect for the whole process; one sandbox runs at a
// time and other threads touching a hidden page wait for it to end.
//
// The logical key budget is 16 = 2 reserved + 14 cached in both modes.

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <mutex>
#include <string_view>
#include <thread>
#include <vector>

#include "rpcool/address_space.hpp"
#include "rpcool/config.hpp"
#include "rpcool/fault.hpp"

namespace rpcool {

enum class SandboxMode { hardware, portable };

std::string_view to_string(SandboxMode m);

struct SandboxRegion {
  uint32_t slot = 0;  // 0-based cached slot, logical key = slot + 2
  int pkey = -1;      // physical key in hardware mode
  AddrRange range;
};

/// A private variable copied into the sandbox's temporary arena on entry.
struct CopyIn {
  const void* src;
  size_t size;
  size_t align = alignof(std::max_align_t);
};
template <class T>
CopyIn copy_in(const T& v) {
  return CopyIn{&v, sizeof(T), alignof(T)};
}

class SandboxManager {
 public:
  static SandboxManager& instance();

  /// Chooses the mode and allocates keys. Must run before any thread that
  /// touches shared memory is created. Later calls are ignored.
  void configure(SandboxModeRequest req, uint32_t cached_slots = 14);
  SandboxMode mode();
  uint32_t cached_slots();

  // Runtime hooks.
  void on_shared_mapped(AddrRange r);
  void on_shared_unmapped(AddrRange r);
  /// Private pages that sandboxed code must not see (whole pages).
  void register_private(AddrRange r);
  void unregister_private(AddrRange r);

  /// Returns a free slot already bound to a range of at least `size` bytes
  /// (fast path). Otherwise waits for a slot to free up and binds it to
  /// fresh pages from the region source (slow path).
  SandboxRegion acquire_cached_sandbox(size_t size);
  /// Returns a free slot whose range covers `r` (fast path) or waits for a
  /// slot and re-keys `r` to it (slow path).
  SandboxRegion acquire(AddrRange r);
  void release(const SandboxRegion& region);
  /// Binds a free slot to `r` ahead of time.
  void prebind(AddrRange r);
  /// Where acquire_cached_sandbox gets pages when no slot is large enough.
  void set_region_source(std::function<AddrRange(size_t)> fn);

  uint64_t fast_acquisitions() const { return fast_; }
  uint64_t slow_acquisitions() const { return slow_; }
  uint32_t pkru_normal() const { return pkru_normal_; }
  uint32_t pkru_for(const SandboxRegion& r) const;

  void reset_after_fork();

 private:
  friend class Sandbox;
  struct Slot {
    int pkey = -1;
    AddrRange range;
    bool busy = false;
    uint64_t last_use = 0;
  };

  SandboxManager() = default;
  void init_locked(SandboxModeRequest req, uint32_t cached);
  void rekey(AddrRange r, int pkey);
  SandboxRegion take(uint32_t i, bool fast);
  int find_free_covering(AddrRange r) const;
  void bind(uint32_t i, AddrRange r);
  void portable_hide(AddrRange keep);
  void portable_restore();

  std::mutex mu_;
  std::condition_variable cv_;
  bool configured_ = false;
  SandboxMode mode_ = SandboxMode::portable;
  int protected_key_ = -1;  // tags heaps and private regions (hardware mode)
  uint32_t pkru_normal_ = 0;
  std::vector<Slot> slots_;
  uint64_t tick_ = 0;
  uint64_t fast_ = 0;
  uint64_t slow_ = 0;
  std::function<AddrRange(size_t)> source_;
  std::mutex portable_mu_;  // one portable sandbox at a time
};

/// Active sandbox on the calling thread.
class Sandbox {
 public:
  /// Confines the calling thread to `region` plus its temporary arena.
  /// Variables in `vars` are value-copied into the arena first.
  static Sandbox begin(const SandboxRegion& region, std::initializer_list<CopyIn> vars = {});
  /// Convenience: acquire a slot for `range` and begin; end() releases it.
  static Sandbox begin(AddrRange range, std::initializer_list<CopyIn> vars = {});

  Sandbox(Sandbox&& o) noexcept;
  Sandbox& operator=(Sandbox&&) = delete;
  ~Sandbox();

  /// Restores permissions, discards the arena, releases an owned slot.
  void end();
  bool active() const { return active_; }

  /// Copy of the i-th copy-in variable inside the arena.
  void* var(size_t i) const { return vars_.at(i); }
  template <class T>
  T& var_as(size_t i) const {
    return *static_cast<T*>(var(i));
  }
  const SandboxRegion& region() const { return region_; }
  /// PKRU to restore after a fault unwinds out of this sandbox.
  uint32_t pkru_outside() const { return pkru_outside_; }

  /// Allocation inside the current thread's arena (sandboxed threads only).
  static void* arena_allocate(size_t size, size_t align = 16);
  /// True if the calling thread is inside a sandbox.
  static bool in_sandbox();
  /// True if `p` lies in the calling thread's arena.
  static bool in_arena(const void* p);
  static size_t arena_capacity();

 private:
  Sandbox() = default;
  SandboxRegion region_;
  bool owns_slot_ = false;
  bool active_ = false;
  std::thread::id owner_;
  uint32_t pkru_outside_ = 0;
  std::vector<void*> vars_;
};

}  // namespace rpcool
