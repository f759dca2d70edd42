#include "rpcool/address_space.hpp"

#include <sys/mman.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>

#include "rpcool/error.hpp"

namespace rpcool {

int to_prot(Perm p) {
  switch (p) {
    case Perm::none: return PROT_NONE;
    case Perm::read: return PROT_READ;
    case Perm::read_write: return PROT_READ | PROT_WRITE;
  }
  return PROT_NONE;
}

void* map_fixed(int fd, uint64_t offset, uintptr_t addr, size_t len, Perm perm) {
  void* want = reinterpret_cast<void*>(addr);
  void* p = ::mmap(want, len, to_prot(perm), MAP_SHARED | MAP_FIXED_NOREPLACE, fd, static_cast<off_t>(offset));
  if (p == MAP_FAILED) {
    if (errno == EEXIST) {
      char buf[160];
      std::snprintf(buf, sizeof buf,
                    "range [%#lx, %#lx) collides with an existing mapping; configure a different pool base",
                    static_cast<unsigned long>(addr), static_cast<unsigned long>(addr + len));
      throw Error(Errc::address_in_use, buf);
    }
    throw_errno(Errc::address_in_use, "mmap fixed");
  }
  if (p != want) {
    // Kernels without MAP_FIXED_NOREPLACE treat it as a hint.
    ::munmap(p, len);
    throw Error(Errc::address_in_use, "kernel did not honor the fixed address");
  }
  return p;
}

void* map_alias(int fd, uint64_t offset, size_t len, Perm perm) {
  void* p = ::mmap(nullptr, len, to_prot(perm), MAP_SHARED, fd, static_cast<off_t>(offset));
  if (p == MAP_FAILED) throw_errno(Errc::unmapped, "mmap alias");
  return p;
}

void unmap(const void* addr, size_t len) { ::munmap(const_cast<void*>(addr), len); }

AddressSpace& AddressSpace::instance() {
  static AddressSpace* as = new AddressSpace;  // outlives static destructors
  return *as;
}

void AddressSpace::add_shared(uint64_t heap_id, AddrRange r) {
  std::lock_guard lk(mu_);
  shared_.push_back({heap_id, r});
}

void AddressSpace::remove_shared(uint64_t heap_id) {
  std::lock_guard lk(mu_);
  std::erase_if(shared_, [&](const Shared& s) { return s.heap_id == heap_id; });
}

std::optional<AddressSpace::Shared> AddressSpace::shared_at(uintptr_t addr) const {
  std::lock_guard lk(mu_);
  for (const auto& s : shared_)
    if (s.range.contains(addr)) return s;
  return std::nullopt;
}

std::vector<AddressSpace::Shared> AddressSpace::shared() const {
  std::lock_guard lk(mu_);
  return shared_;
}

void AddressSpace::add_private(AddrRange r) {
  std::lock_guard lk(mu_);
  private_.push_back(r);
}

void AddressSpace::remove_private(AddrRange r) {
  std::lock_guard lk(mu_);
  std::erase(private_, r);
}

std::vector<AddrRange> AddressSpace::private_regions() const {
  std::lock_guard lk(mu_);
  return private_;
}

void AddressSpace::clear() {
  std::lock_guard lk(mu_);
  shared_.clear();
  private_.clear();
}

}  // namespace rpcool
