// Link this object into a program to send malloc/free issued by sandboxed
// threads to the sandbox's temporary arena. Everything else goes to glibc.

#include <malloc.h>

#include <cerrno>
#include <cstddef>
#include <cstdint>
#include <cstring>

#include "rpcool/sandbox.hpp"

extern "C" {
void* __libc_malloc(size_t);
void* __libc_calloc(size_t, size_t);
void* __libc_realloc(void*, size_t);
void __libc_free(void*);
void* __libc_memalign(size_t, size_t);
}

namespace {

constexpr size_t kHeader = 16;
thread_local bool t_inside = false;  // a failing arena allocation may allocate its error

void* arena_alloc(size_t size, size_t align) {
  if (align < kHeader) align = kHeader;
  if (t_inside) {
    errno = ENOMEM;
    return nullptr;
  }
  t_inside = true;
  struct Reset {
    ~Reset() { t_inside = false; }
  } reset;
  try {
    auto* raw = static_cast<uint8_t*>(rpcool::Sandbox::arena_allocate(size + align, align));
    uint8_t* user = raw + align;
    std::memcpy(user - kHeader, &size, sizeof size);
    return user;
  } catch (...) {
    errno = ENOMEM;
    return nullptr;
  }
}

size_t arena_size(const void* p) {
  size_t n;
  std::memcpy(&n, static_cast<const uint8_t*>(p) - kHeader, sizeof n);
  return n;
}

}  // namespace

extern "C" {

void* malloc(size_t n) {
  if (rpcool::Sandbox::in_sandbox()) return arena_alloc(n, 16);
  return __libc_malloc(n);
}

void free(void* p) {
  if (p == nullptr || rpcool::Sandbox::in_arena(p)) return;  // discarded with the arena
  __libc_free(p);
}

void* calloc(size_t n, size_t m) {
  if (!rpcool::Sandbox::in_sandbox()) return __libc_calloc(n, m);
  size_t total;
  if (__builtin_mul_overflow(n, m, &total)) {
    errno = ENOMEM;
    return nullptr;
  }
  void* p = arena_alloc(total, 16);
  if (p) std::memset(p, 0, total);
  return p;
}

void* realloc(void* p, size_t n) {
  if (!rpcool::Sandbox::in_sandbox()) {
    if (p && rpcool::Sandbox::in_arena(p)) return nullptr;
    return __libc_realloc(p, n);
  }
  void* q = arena_alloc(n, 16);
  if (q && p) {
    size_t old = rpcool::Sandbox::in_arena(p) ? arena_size(p) : malloc_usable_size(p);
    std::memcpy(q, p, old < n ? old : n);
  }
  return q;
}

void* memalign(size_t align, size_t n) {
  if (rpcool::Sandbox::in_sandbox()) return arena_alloc(n, align);
  return __libc_memalign(align, n);
}

void* aligned_alloc(size_t align, size_t n) { return memalign(align, n); }

int posix_memalign(void** out, size_t align, size_t n) {
  if (align < sizeof(void*) || (align & (align - 1)) != 0) return EINVAL;
  void* p = memalign(align, n);
  if (p == nullptr) return ENOMEM;
  *out = p;
  return 0;
}

}  // extern "C"
