#pragma once

// Allocator that lives entirely inside a shared heap, so every process that
// maps the heap (always at the same address) sees the same state.
//
// Layout, all integers little-endian, offsets from the heap base:
//
//   0   char[8] magic "RPCOOLH1"
//   8   u32 version (1)
//   12  u32 page size
//   16  u64 heap size
//   24  u32 lock word: pid of the holder, 0 when free
//   28  u32 flags: bit 0 = mirrored by the fallback transport
//   32  u64 live allocation count
//   40  u64 offset of the first free page run (0 = none)
//   48  u64 data start (first allocatable page)
//   56  u64 scope directory offset (= page size)
//   64  u32 scope directory capacity (entries)
//   68  u32 next scope id
//   72  u64 root pointer (absolute address, application defined)
//   80  u64[7] small free-list heads, chunk sizes 32, 64, ..., 2048
//
// The scope directory holds 32-byte entries {u64 start offset, u64 pages,
// u32 scope id, u32 state, u64 reserved}. Every block starts with a 16-byte
// header {u32 magic, u8 state, u8 class, u16 reserved, u32 pages, u32 check};
// class 255 marks a page run. A free page run keeps the next-run offset right
// after its header. Scopes are page runs that begin with a 64-byte scope
// header {u32 magic "RPSC", u32 directory index, u64 cursor, u64 pages,
// u32 scope id, ...}.

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <new>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "rpcool/address_space.hpp"
#include "rpcool/error.hpp"

namespace rpcool {

inline constexpr char kHeapMagic[8] = {'R', 'P', 'C', 'O', 'O', 'L', 'H', '1'};
inline constexpr uint32_t kHeapVersion = 1;
inline constexpr uint32_t kBlockHeader = 16;
inline constexpr uint32_t kScopeHeader = 64;
inline constexpr int kSmallClasses = 7;
inline constexpr uint32_t kSmallChunk[kSmallClasses] = {32, 64, 128, 256, 512, 1024, 2048};

struct HeapHeader {
  char magic[8];
  uint32_t version;
  uint32_t page_size;
  uint64_t heap_size;
  uint32_t lock;
  uint32_t flags;
  uint64_t alloc_count;
  uint64_t free_runs;
  uint64_t data_start;
  uint64_t scope_dir;
  uint32_t scope_capacity;
  uint32_t next_scope_id;
  uint64_t root;
  uint64_t small_free[kSmallClasses];
};
static_assert(sizeof(HeapHeader) == 136);
static_assert(offsetof(HeapHeader, lock) == 24);
static_assert(offsetof(HeapHeader, root) == 72);
static_assert(offsetof(HeapHeader, small_free) == 80);

enum class ScopeState : uint32_t { free = 0, active = 1, sealed = 2 };

struct ScopeEntry {
  uint64_t start;  // offset from heap base
  uint64_t pages;
  uint32_t id;
  uint32_t state;
  uint64_t reserved;
};
static_assert(sizeof(ScopeEntry) == 32);

class Scope;

class Heap {
 public:
  static constexpr uint32_t kMirrored = 1;

  Heap() = default;
  /// Wraps an already formatted heap; throws Errc::corrupt_heap otherwise.
  explicit Heap(void* base);
  /// Writes a fresh header over [base, base+size).
  static Heap format(void* base, uint64_t size, uint64_t page_size, uint32_t flags = 0);
  /// True if the bytes at `base` carry a valid header.
  static bool is_formatted(const void* base);

  void* allocate(size_t size, size_t align = 16);
  void deallocate(void* p);
  /// Payload bytes usable at `p` (>= the requested size).
  size_t usable_size(const void* p) const;

  template <class T, class... A>
  T* make(A&&... args) {
    static_assert(std::is_trivially_destructible_v<T>, "heap objects are never destroyed");
    return new (allocate(sizeof(T), alignof(T) < 16 ? 16 : alignof(T))) T(std::forward<A>(args)...);
  }

  Scope create_scope(size_t bytes);
  /// Rebuilds a scope handle from its start address (receiver side).
  Scope scope_at(uintptr_t start);
  std::vector<ScopeEntry> scopes() const;
  void set_scope_state(uint32_t index, ScopeState s);

  uintptr_t base() const { return reinterpret_cast<uintptr_t>(h_); }
  uint64_t size() const { return h_->heap_size; }
  uint64_t page_size() const { return h_->page_size; }
  uint64_t data_start() const { return h_->data_start; }
  AddrRange range() const { return {base(), size()}; }
  bool contains(const void* p, size_t n = 1) const { return range().contains(reinterpret_cast<uintptr_t>(p), n); }
  uint64_t allocation_count() const { return __atomic_load_n(&h_->alloc_count, __ATOMIC_ACQUIRE); }
  uint64_t free_page_count() const;
  HeapHeader* header() const { return h_; }
  explicit operator bool() const { return h_ != nullptr; }

  void* root() const { return reinterpret_cast<void*>(__atomic_load_n(&h_->root, __ATOMIC_ACQUIRE)); }
  void set_root(const void* p) { __atomic_store_n(&h_->root, reinterpret_cast<uint64_t>(p), __ATOMIC_RELEASE); }

  /// Allocates whole pages with no block header (page aligned). Used for
  /// rings and other control structures that need their own pages.
  void* allocate_pages(uint64_t pages);
  void free_pages(void* p);

 private:
  friend class Scope;
  class Lock;
  struct Block;

  uint8_t* at(uint64_t off) const { return reinterpret_cast<uint8_t*>(h_) + off; }
  uint64_t off(const void* p) const { return reinterpret_cast<uintptr_t>(p) - base(); }
  ScopeEntry* dir() const { return reinterpret_cast<ScopeEntry*>(at(h_->scope_dir)); }
  uint32_t check_for(uint64_t offset) const;
  uint64_t take_run(uint64_t pages);           // lock held; 0 on failure
  void give_run(uint64_t offset, uint64_t pages);  // lock held
  Block* header_of(const void* p) const;

  HeapHeader* h_ = nullptr;
};

/// Whole-page bump allocator inside a heap; the unit of sealing.
class Scope {
 public:
  Scope() = default;

  void* allocate(size_t size, size_t align = 8);
  template <class T, class... A>
  T* make(A&&... args) {
    return new (allocate(sizeof(T), alignof(T))) T(std::forward<A>(args)...);
  }
  /// Copies bytes into the scope and returns the copy.
  void* copy_in(const void* src, size_t n, size_t align = 8);
  void reset();
  void destroy();

  AddrRange range() const { return {start_, pages_ * heap_.page_size()}; }
  uint64_t pages() const { return pages_; }
  uint32_t id() const { return id_; }
  uint32_t index() const { return index_; }
  uint64_t used() const;
  ScopeState state() const;
  bool valid() const;
  Heap& heap() { return heap_; }
  explicit operator bool() const { return start_ != 0; }

 private:
  friend class Heap;
  struct Header {
    uint32_t magic;
    uint32_t index;
    uint64_t cursor;
    uint64_t pages;
    uint32_t id;
    uint32_t reserved[9];
  };
  static_assert(sizeof(Header) == kScopeHeader);
  static constexpr uint32_t kMagic = 0x43535052;  // "RPSC"

  Header* hdr() const { return reinterpret_cast<Header*>(start_); }
  ScopeEntry& entry() const;
  void require_active() const;

  Heap heap_;
  uintptr_t start_ = 0;
  uint64_t pages_ = 0;
  uint32_t index_ = 0;
  uint32_t id_ = 0;
};

/// Growable byte string whose storage lives in a heap.
class ShmString {
 public:
  static ShmString* create(Heap& heap, std::string_view s);
  void assign(Heap& heap, std::string_view s);
  void append(Heap& heap, std::string_view s);
  std::string_view view() const { return {data_, size_}; }
  size_t size() const { return size_; }

 private:
  void reserve(Heap& heap, uint64_t cap);
  char* data_ = nullptr;
  uint64_t size_ = 0;
  uint64_t cap_ = 0;
};

/// Growable array of trivially copyable elements stored in a heap.
template <class T>
class ShmVector {
  static_assert(std::is_trivially_copyable_v<T>);

 public:
  static ShmVector* create(Heap& heap, size_t reserve_n = 0) {
    auto* v = heap.make<ShmVector>();
    if (reserve_n) v->reserve(heap, reserve_n);
    return v;
  }
  void push_back(Heap& heap, const T& x) {
    if (size_ == cap_) reserve(heap, cap_ ? cap_ * 2 : 8);
    data_[size_++] = x;
  }
  void reserve(Heap& heap, size_t n) {
    if (n <= cap_) return;
    T* fresh = static_cast<T*>(heap.allocate(n * sizeof(T), alignof(T) < 16 ? 16 : alignof(T)));
    if (size_) std::memcpy(static_cast<void*>(fresh), data_, size_ * sizeof(T));
    if (data_) heap.deallocate(data_);
    data_ = fresh;
    cap_ = n;
  }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }
  size_t size() const { return size_; }
  T* begin() { return data_; }
  T* end() { return data_ + size_; }
  const T* begin() const { return data_; }
  const T* end() const { return data_ + size_; }

 private:
  T* data_ = nullptr;
  uint64_t size_ = 0;
  uint64_t cap_ = 0;
};

}  // namespace rpcool
