#pragma once

// Deep copy of pointer-linked structures between heaps.
//
// Types are described at run time: a layout names the object size and
// alignment and lists the fields that hold references. A reference points at
// `count` contiguous objects of the target layout; the count is fixed or read
// from a u64 field of the referring object. The built-in layout "bytes" is a
// raw byte array with no references.

#include <cstddef>
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "rpcool/heap.hpp"

namespace rpcool {

class Connection;

struct RefField {
  uint32_t offset = 0;       // where the pointer sits in the object
  std::string target;        // layout of the pointee
  uint64_t count = 1;        // fixed element count ...
  int64_t count_offset = -1;  // ... or, when >= 0, a u64 field holding it
};

struct Layout {
  std::string name;
  uint32_t size = 0;
  uint32_t align = 8;
  std::vector<RefField> refs;
};

class LayoutRegistry {
 public:
  LayoutRegistry();
  static LayoutRegistry& global();

  /// Throws Errc::duplicate_name when the name is taken.
  void add(Layout l);
  /// Throws Errc::unregistered_layout.
  const Layout& get(const std::string& name) const;
  bool contains(const std::string& name) const;

 private:
  mutable std::mutex mu_;
  std::map<std::string, Layout> layouts_;
};

struct CopyStats {
  uint64_t objects = 0;
  uint64_t bytes = 0;
};

/// Copies the structure rooted at `root` (layout `layout`, `count` elements)
/// into `dst`. Every reference must stay inside `source`; shared and cyclic
/// references are preserved. Returns the new root (null for a null root).
void* copy_from(Heap& dst, AddrRange source, const void* root, const std::string& layout, uint64_t count = 1,
                const LayoutRegistry& reg = LayoutRegistry::global(), CopyStats* stats = nullptr);

/// Same, with the source heap found from the mapped heap containing `root`
/// and the destination being the connection's heap.
void* copy_from(Connection& dst, const void* root, const std::string& layout,
                const LayoutRegistry& reg = LayoutRegistry::global(), CopyStats* stats = nullptr);

}  // namespace rpcool
