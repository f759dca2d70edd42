#pragma once

// Process-wide view of the shared regions mapped at fixed addresses and of
// private pages that sandboxes must hide.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <vector>

namespace rpcool {

struct AddrRange {
  uintptr_t start = 0;
  size_t len = 0;

  uintptr_t end() const { return start + len; }
  bool empty() const { return len == 0; }
  bool contains(uintptr_t a, size_t n = 1) const { return a >= start && n <= len && a - start <= len - n; }
  bool contains(const AddrRange& r) const { return contains(r.start, r.len); }
  bool overlaps(const AddrRange& r) const { return start < r.end() && r.start < end(); }
  bool operator==(const AddrRange&) const = default;
};

enum class Perm : uint8_t { none = 0, read = 1, read_write = 3 };

int to_prot(Perm p);

/// Maps `len` bytes of `fd` (from `offset`) exactly at `addr`. Never replaces
/// an existing mapping: a collision throws Errc::address_in_use with a hint
/// to choose another pool base.
void* map_fixed(int fd, uint64_t offset, uintptr_t addr, size_t len, Perm perm);
/// Maps a second, kernel-chosen view of the same pages.
void* map_alias(int fd, uint64_t offset, size_t len, Perm perm);
void unmap(const void* addr, size_t len);

/// Registry of fixed-address shared heaps plus registered private regions.
class AddressSpace {
 public:
  struct Shared {
    uint64_t heap_id;
    AddrRange range;
  };

  static AddressSpace& instance();

  void add_shared(uint64_t heap_id, AddrRange r);
  void remove_shared(uint64_t heap_id);
  std::optional<Shared> shared_at(uintptr_t addr) const;
  std::vector<Shared> shared() const;

  void add_private(AddrRange r);
  void remove_private(AddrRange r);
  std::vector<AddrRange> private_regions() const;

  /// Drops every entry; used in a forked child, which inherits none of the
  /// parent's heaps.
  void clear();

 private:
  mutable std::mutex mu_;
  std::vector<Shared> shared_;
  std::vector<AddrRange> private_;
};

}  // namespace rpcool
