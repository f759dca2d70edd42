#include "rpcool/heap.hpp"

#include <sched.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>

#include "rpcool/config.hpp"

namespace rpcool {

namespace {

constexpr uint32_t kBlockMagic = 0x4B425052;  // "RPBK"
constexpr uint8_t kLive = 1;
constexpr uint8_t kFree = 2;
constexpr uint8_t kMerged = 3;
constexpr uint8_t kRunClass = 255;
constexpr uint8_t kPagesClass = 254;  // allocate_pages: header sits one page before the payload

bool pow2(size_t v) { return v != 0 && (v & (v - 1)) == 0; }

}  // namespace

struct Heap::Block {
  uint32_t magic;
  uint8_t state;
  uint8_t cls;
  uint16_t reserved;
  uint32_t pages;
  uint32_t check;
};


/// Spin lock on the in-heap lock word. A holder that died is detected with
/// kill(pid, 0) and its lock is taken over, except on mirrored heaps where
/// the pid may belong to the other node.
class Heap::Lock {
 public:
  explicit Lock(HeapHeader* h) : h_(h) {
    const uint32_t me = static_cast<uint32_t>(::getpid());
    uint32_t spins = 0;
    for (;;) {
      uint32_t expected = 0;
      if (__atomic_compare_exchange_n(&h_->lock, &expected, me, false, __ATOMIC_ACQUIRE, __ATOMIC_RELAXED)) return;
      if (++spins % 64 == 0) {
        ::sched_yield();
        if (spins % 4096 == 0 && !(h_->flags & Heap::kMirrored) && expected != me && ::kill(static_cast<pid_t>(expected), 0) != 0 &&
            errno == ESRCH) {
          __atomic_compare_exchange_n(&h_->lock, &expected, 0u, false, __ATOMIC_RELAXED, __ATOMIC_RELAXED);
        }
      }
    }
  }
  ~Lock() { __atomic_store_n(&h_->lock, 0u, __ATOMIC_RELEASE); }
  Lock(const Lock&) = delete;
  Lock& operator=(const Lock&) = delete;

 private:
  HeapHeader* h_;
};

Heap::Heap(void* base) {
  if (!is_formatted(base)) throw Error(Errc::corrupt_heap, "no heap header at base");
  h_ = static_cast<HeapHeader*>(base);
}

bool Heap::is_formatted(const void* base) {
  auto* h = static_cast<const HeapHeader*>(base);
  return std::memcmp(h->magic, kHeapMagic, 8) == 0 && h->version == kHeapVersion;
}

Heap Heap::format(void* base, uint64_t size, uint64_t page_size, uint32_t flags) {
  if (!pow2(page_size) || size % page_size != 0 || reinterpret_cast<uintptr_t>(base) % page_size != 0)
    throw Error(Errc::not_page_aligned, "heap must be whole, aligned pages");
  const uint64_t pages = size / page_size;
  uint64_t cap = std::clamp<uint64_t>(pages / 4, 64, 65536);
  uint64_t dir_pages = round_up(cap * sizeof(ScopeEntry), page_size) / page_size;
  cap = dir_pages * page_size / sizeof(ScopeEntry);
  const uint64_t data_start = page_size * (1 + dir_pages);
  if (data_start + page_size > size) throw Error(Errc::out_of_space, "heap too small for allocator metadata");

  std::memset(base, 0, page_size * (1 + dir_pages));
  auto* h = static_cast<HeapHeader*>(base);
  std::memcpy(h->magic, kHeapMagic, 8);
  h->page_size = static_cast<uint32_t>(page_size);
  h->heap_size = size;
  h->flags = flags;
  h->data_start = data_start;
  h->scope_dir = page_size;
  h->scope_capacity = static_cast<uint32_t>(cap);
  h->next_scope_id = 1;
  Heap heap;
  heap.h_ = h;
  heap.give_run(data_start, (size - data_start) / page_size);
  __atomic_store_n(&h->version, kHeapVersion, __ATOMIC_RELEASE);
  return heap;
}

uint32_t Heap::check_for(uint64_t offset) const {
  uint64_t x = (offset + h_->heap_size) * 0x9E3779B97F4A7C15ULL;
  return static_cast<uint32_t>(x >> 32) ^ 0xA5A5A5A5u;
}

uint64_t Heap::take_run(uint64_t pages) {
  const uint64_t ps = h_->page_size;
  uint64_t* link = &h_->free_runs;
  while (*link != 0) {
    uint64_t o = *link;
    auto* b = reinterpret_cast<Block*>(at(o));
    uint64_t* next = reinterpret_cast<uint64_t*>(at(o + kBlockHeader));
    if (b->pages >= pages) {
      if (b->pages == pages) {
        *link = *next;
      } else {
        uint64_t rest = o + pages * ps;
        auto* rb = reinterpret_cast<Block*>(at(rest));
        *rb = Block{kBlockMagic, kFree, kRunClass, 0, static_cast<uint32_t>(b->pages - pages), check_for(rest)};
        *reinterpret_cast<uint64_t*>(at(rest + kBlockHeader)) = *next;
        *link = rest;
      }
      b->pages = static_cast<uint32_t>(pages);
      return o;
    }
    link = next;
  }
  return 0;
}

void Heap::give_run(uint64_t o, uint64_t pages) {
  const uint64_t ps = h_->page_size;
  uint64_t prev = 0;
  uint64_t cur = h_->free_runs;
  while (cur != 0 && cur < o) {
    prev = cur;
    cur = *reinterpret_cast<uint64_t*>(at(cur + kBlockHeader));
  }
  auto* b = reinterpret_cast<Block*>(at(o));
  *b = Block{kBlockMagic, kFree, kRunClass, 0, static_cast<uint32_t>(pages), check_for(o)};
  uint64_t* bnext = reinterpret_cast<uint64_t*>(at(o + kBlockHeader));
  *bnext = cur;
  if (cur != 0 && o + pages * ps == cur) {
    auto* nb = reinterpret_cast<Block*>(at(cur));
    b->pages += nb->pages;
    *bnext = *reinterpret_cast<uint64_t*>(at(cur + kBlockHeader));
    nb->state = kMerged;
  }
  if (prev == 0) {
    h_->free_runs = o;
    return;
  }
  auto* pb = reinterpret_cast<Block*>(at(prev));
  uint64_t* pnext = reinterpret_cast<uint64_t*>(at(prev + kBlockHeader));
  if (prev + uint64_t{pb->pages} * ps == o) {
    pb->pages += b->pages;
    *pnext = *bnext;
    b->state = kMerged;
  } else {
    *pnext = o;
  }
}

void* Heap::allocate(size_t size, size_t align) {
  static_assert(sizeof(Block) == kBlockHeader);
  if (!pow2(align)) throw Error(Errc::invalid_align, "alignment must be a power of two");
  if (align > h_->page_size) throw Error(Errc::invalid_align, "alignment above the page size");
  if (size == 0) throw Error(Errc::invalid_argument, "zero-byte allocation");
  const uint64_t ps = h_->page_size;
  Lock lk(h_);
  if (align <= 16) {
    for (int c = 0; c < kSmallClasses; ++c) {
      const uint32_t chunk = kSmallChunk[c];
      if (size + kBlockHeader > chunk || chunk > ps) continue;
      if (h_->small_free[c] == 0) {
        uint64_t page = take_run(1);
        if (page == 0) throw Error(Errc::out_of_space, "no free page for small allocations");
        // Carve the page; chunk 0 goes last so the list pops in address order.
        for (uint64_t i = ps / chunk; i-- > 0;) {
          uint64_t o = page + i * chunk;
          *reinterpret_cast<Block*>(at(o)) = Block{kBlockMagic, kFree, static_cast<uint8_t>(c), 0, 0, check_for(o)};
          *reinterpret_cast<uint64_t*>(at(o + kBlockHeader)) = h_->small_free[c];
          h_->small_free[c] = o;
        }
      }
      uint64_t o = h_->small_free[c];
      h_->small_free[c] = *reinterpret_cast<uint64_t*>(at(o + kBlockHeader));
      reinterpret_cast<Block*>(at(o))->state = kLive;
      ++h_->alloc_count;
      return at(o + kBlockHeader);
    }
  }
  const uint64_t lead = std::max<uint64_t>(kBlockHeader, align);
  const uint64_t pages = (lead + size + ps - 1) / ps;
  if (pages > h_->heap_size / ps) throw Error(Errc::out_of_space, "allocation larger than the heap");
  uint64_t o = take_run(pages);
  if (o == 0) throw Error(Errc::out_of_space, "no free page run of " + std::to_string(pages) + " pages");
  uint64_t ho = o + lead - kBlockHeader;
  *reinterpret_cast<Block*>(at(ho)) = Block{kBlockMagic, kLive, kRunClass, 0, static_cast<uint32_t>(pages), check_for(ho)};
  ++h_->alloc_count;
  return at(o + lead);
}

Heap::Block* Heap::header_of(const void* p) const {
  uintptr_t a = reinterpret_cast<uintptr_t>(p);
  if (a < base() + h_->data_start + kBlockHeader || a >= base() + h_->heap_size || a % 16 != 0)
    throw Error(Errc::foreign_address, "address is not an allocation of this heap");
  uint64_t ho = a - base() - kBlockHeader;
  auto* b = reinterpret_cast<Block*>(at(ho));
  if (b->magic != kBlockMagic || b->check != check_for(ho) || (b->cls >= kSmallClasses && b->cls != kRunClass))
    throw Error(Errc::foreign_address, "address is not an allocation of this heap");
  return b;
}

void Heap::deallocate(void* p) {
  if (p == nullptr) return;
  Lock lk(h_);
  Block* b = header_of(p);
  if (b->state != kLive) throw Error(Errc::double_free, "block already freed");
  uint64_t ho = off(b);
  b->state = kFree;
  --h_->alloc_count;
  if (b->cls == kRunClass) {
    const uint64_t ps = h_->page_size;
    uint64_t run = ho / ps * ps;
    give_run(run, b->pages);
    return;
  }
  *reinterpret_cast<uint64_t*>(at(ho + kBlockHeader)) = h_->small_free[b->cls];
  h_->small_free[b->cls] = ho;
}

size_t Heap::usable_size(const void* p) const {
  Block* b = header_of(p);
  if (b->state != kLive) throw Error(Errc::double_free, "block is free");
  if (b->cls == kRunClass) {
    uint64_t ho = off(b);
    uint64_t run = ho / h_->page_size * h_->page_size;
    return run + uint64_t{b->pages} * h_->page_size - (ho + kBlockHeader);
  }
  return kSmallChunk[b->cls] - kBlockHeader;
}

uint64_t Heap::free_page_count() const {
  Lock lk(h_);
  uint64_t n = 0;
  for (uint64_t o = h_->free_runs; o != 0; o = *reinterpret_cast<uint64_t*>(at(o + kBlockHeader)))
    n += reinterpret_cast<Block*>(at(o))->pages;
  return n;
}

void* Heap::allocate_pages(uint64_t pages) {
  if (pages == 0) throw Error(Errc::invalid_argument, "zero pages");
  Lock lk(h_);
  uint64_t o = take_run(pages + 1);
  if (o == 0) throw Error(Errc::out_of_space, "no free page run of " + std::to_string(pages + 1) + " pages");
  *reinterpret_cast<Block*>(at(o)) = Block{kBlockMagic, kLive, kPagesClass, 0, static_cast<uint32_t>(pages + 1), check_for(o)};
  ++h_->alloc_count;
  return at(o + h_->page_size);
}

void Heap::free_pages(void* p) {
  const uint64_t ps = h_->page_size;
  uintptr_t a = reinterpret_cast<uintptr_t>(p);
  if (!contains(p) || (a - base()) % ps != 0 || a - base() < h_->data_start + ps)
    throw Error(Errc::foreign_address, "not a page allocation");
  Lock lk(h_);
  uint64_t o = a - base() - ps;
  auto* b = reinterpret_cast<Block*>(at(o));
  if (b->magic != kBlockMagic || b->check != check_for(o) || b->cls != kPagesClass)
    throw Error(Errc::foreign_address, "not a page allocation");
  if (b->state != kLive) throw Error(Errc::double_free, "pages already freed");
  --h_->alloc_count;
  give_run(o, b->pages);
}

// Scopes ---------------------------------------------------------------------

Scope Heap::create_scope(size_t bytes) {
  if (bytes == 0) throw Error(Errc::invalid_argument, "zero-byte scope");
  const uint64_t ps = h_->page_size;
  const uint64_t pages = (bytes + ps - 1) / ps;
  Lock lk(h_);
  ScopeEntry* d = dir();
  uint32_t idx = h_->scope_capacity;
  for (uint32_t i = 0; i < h_->scope_capacity; ++i)
    if (d[i].state == static_cast<uint32_t>(ScopeState::free)) {
      idx = i;
      break;
    }
  if (idx == h_->scope_capacity) throw Error(Errc::out_of_space, "scope directory full");
  uint64_t o = take_run(pages);
  if (o == 0) throw Error(Errc::out_of_space, "no free page run for a " + std::to_string(pages) + "-page scope");
  uint32_t id = h_->next_scope_id++;
  d[idx] = ScopeEntry{o, pages, id, static_cast<uint32_t>(ScopeState::active), 0};
  auto* sh = reinterpret_cast<Scope::Header*>(at(o));
  std::memset(sh, 0, sizeof *sh);
  sh->magic = Scope::kMagic;
  sh->index = idx;
  sh->cursor = kScopeHeader;
  sh->pages = pages;
  sh->id = id;
  Scope s;
  s.heap_ = *this;
  s.start_ = base() + o;
  s.pages_ = pages;
  s.index_ = idx;
  s.id_ = id;
  return s;
}

Scope Heap::scope_at(uintptr_t start) {
  if (!contains(reinterpret_cast<void*>(start), kScopeHeader)) throw Error(Errc::foreign_address, "scope outside heap");
  Lock lk(h_);
  ScopeEntry* d = dir();
  uint64_t o = start - base();
  for (uint32_t i = 0; i < h_->scope_capacity; ++i) {
    if (d[i].state != static_cast<uint32_t>(ScopeState::free) && d[i].start == o) {
      Scope s;
      s.heap_ = *this;
      s.start_ = start;
      s.pages_ = d[i].pages;
      s.index_ = i;
      s.id_ = d[i].id;
      return s;
    }
  }
  throw Error(Errc::scope_destroyed, "no live scope at that address");
}

std::vector<ScopeEntry> Heap::scopes() const {
  Lock lk(h_);
  std::vector<ScopeEntry> out;
  ScopeEntry* d = dir();
  for (uint32_t i = 0; i < h_->scope_capacity; ++i)
    if (d[i].state != static_cast<uint32_t>(ScopeState::free)) out.push_back(d[i]);
  return out;
}

void Heap::set_scope_state(uint32_t index, ScopeState s) {
  if (index >= h_->scope_capacity) throw Error(Errc::out_of_bounds, "scope index");
  __atomic_store_n(&dir()[index].state, static_cast<uint32_t>(s), __ATOMIC_RELEASE);
}

ScopeEntry& Scope::entry() const { return heap_.dir()[index_]; }

bool Scope::valid() const {
  if (start_ == 0) return false;
  const ScopeEntry& e = entry();
  return e.id == id_ && __atomic_load_n(&e.state, __ATOMIC_ACQUIRE) != static_cast<uint32_t>(ScopeState::free);
}

ScopeState Scope::state() const {
  if (!valid()) return ScopeState::free;
  return static_cast<ScopeState>(__atomic_load_n(&entry().state, __ATOMIC_ACQUIRE));
}

void Scope::require_active() const {
  if (!valid()) throw Error(Errc::scope_destroyed, "scope was destroyed");
  if (state() == ScopeState::sealed) throw Error(Errc::scope_sealed, "scope is sealed");
}

void* Scope::allocate(size_t size, size_t align) {
  require_active();
  if (!pow2(align)) throw Error(Errc::invalid_align, "alignment must be a power of two");
  if (size == 0) throw Error(Errc::invalid_argument, "zero-byte allocation");
  Header* h = hdr();
  uint64_t cur = round_up(h->cursor, align);
  uint64_t cap = pages_ * heap_.page_size();
  if (cur > cap || size > cap - cur) throw Error(Errc::scope_exhausted, "scope is full");
  h->cursor = cur + size;
  return reinterpret_cast<void*>(start_ + cur);
}

void* Scope::copy_in(const void* src, size_t n, size_t align) {
  void* p = allocate(n, align);
  std::memcpy(p, src, n);
  return p;
}

uint64_t Scope::used() const { return hdr()->cursor; }

void Scope::reset() {
  require_active();
  hdr()->cursor = kScopeHeader;
}

void Scope::destroy() {
  if (!valid()) throw Error(Errc::scope_destroyed, "scope already destroyed");
  if (state() == ScopeState::sealed) throw Error(Errc::scope_sealed, "cannot destroy a sealed scope");
  Heap::Lock lk(heap_.h_);
  ScopeEntry& e = entry();
  hdr()->magic = 0;
  heap_.give_run(e.start, e.pages);
  e.id = 0;
  __atomic_store_n(&e.state, static_cast<uint32_t>(ScopeState::free), __ATOMIC_RELEASE);
  start_ = 0;
}

// Containers -------------------------------------------------------------------

ShmString* ShmString::create(Heap& heap, std::string_view s) {
  auto* str = heap.make<ShmString>();
  str->assign(heap, s);
  return str;
}

void ShmString::reserve(Heap& heap, uint64_t cap) {
  if (cap <= cap_) return;
  char* fresh = static_cast<char*>(heap.allocate(cap + 1));
  if (size_) std::memcpy(fresh, data_, size_);
  fresh[size_] = '\0';
  if (data_) heap.deallocate(data_);
  data_ = fresh;
  cap_ = cap;
}

void ShmString::assign(Heap& heap, std::string_view s) {
  size_ = 0;
  reserve(heap, std::max<uint64_t>(s.size(), 15));
  std::memcpy(data_, s.data(), s.size());
  size_ = s.size();
  data_[size_] = '\0';
}

void ShmString::append(Heap& heap, std::string_view s) {
  if (size_ + s.size() > cap_) reserve(heap, std::max<uint64_t>(cap_ * 2, size_ + s.size()));
  std::memcpy(data_ + size_, s.data(), s.size());
  size_ += s.size();
  data_[size_] = '\0';
}

}  // namespace rpcool
