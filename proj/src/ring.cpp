#include "rpcool/ring.hpp"

#include <sched.h>

#include <cstring>

#include "rpcool/error.hpp"

namespace rpcool {

namespace {

constexpr uint64_t kScopeUnit = 4096;  // scope lengths travel in 4 KiB pages
constexpr char kRingMagic[8] = {'R', 'P', 'C', 'R', 'I', 'N', 'G', '1'};

struct RingHeader {
  char magic[8];
  uint32_t capacity;
  uint32_t slot_size;
  uint8_t pad0[48];
  uint64_t head;
  uint8_t pad1[56];
  uint64_t tail;
  uint8_t pad2[56];
};
static_assert(sizeof(RingHeader) == MessageRing::kHeaderSize);
static_assert(offsetof(RingHeader, head) == 64);
static_assert(offsetof(RingHeader, tail) == 128);

}  // namespace

struct MessageRing::Slot {
  uint64_t turn;
  uint64_t sequence;
  uint32_t function_id;
  uint32_t flags;
  uint64_t arg;
  uint64_t scope_start;
  uint32_t scope_pages;
  uint32_t seal_index;
  uint64_t seal_epoch;
  uint32_t call_slot;
  uint32_t reserved;
};

MessageRing MessageRing::create(void* mem, uint32_t capacity) {
  static_assert(sizeof(Slot) == kSlotSize);
  if (capacity == 0 || (capacity & (capacity - 1)) != 0)
    throw Error(Errc::invalid_argument, "ring capacity must be a power of two");
  auto* h = static_cast<RingHeader*>(mem);
  std::memset(h, 0, sizeof *h);
  std::memcpy(h->magic, kRingMagic, 8);
  h->capacity = capacity;
  h->slot_size = kSlotSize;
  MessageRing r;
  r.base_ = static_cast<uint8_t*>(mem);
  r.capacity_ = capacity;
  for (uint32_t i = 0; i < capacity; ++i) {
    Slot* s = r.slot(i);
    std::memset(s, 0, sizeof *s);
    __atomic_store_n(&s->turn, uint64_t{i}, __ATOMIC_RELEASE);
  }
  return r;
}

MessageRing MessageRing::attach(void* mem) {
  auto* h = static_cast<RingHeader*>(mem);
  if (std::memcmp(h->magic, kRingMagic, 8) != 0 || h->slot_size != kSlotSize || h->capacity == 0)
    throw Error(Errc::protocol_error, "no message ring at address");
  MessageRing r;
  r.base_ = static_cast<uint8_t*>(mem);
  r.capacity_ = h->capacity;
  return r;
}

MessageRing::Slot* MessageRing::slot(uint64_t pos) const {
  return reinterpret_cast<Slot*>(base_ + kHeaderSize + (pos & (capacity_ - 1)) * kSlotSize);
}

bool MessageRing::try_push(const RpcMessage& m) {
  auto* h = reinterpret_cast<RingHeader*>(base_);
  uint64_t pos = __atomic_load_n(&h->head, __ATOMIC_RELAXED);
  for (;;) {
    Slot* s = slot(pos);
    uint64_t turn = __atomic_load_n(&s->turn, __ATOMIC_ACQUIRE);
    int64_t diff = static_cast<int64_t>(turn - pos);
    if (diff == 0) {
      if (__atomic_compare_exchange_n(&h->head, &pos, pos + 1, true, __ATOMIC_RELAXED, __ATOMIC_RELAXED)) {
        s->sequence = m.sequence;
        s->function_id = m.function_id;
        s->flags = m.flags;
        s->arg = m.arg;
        s->scope_start = m.scope.start;
        s->scope_pages = static_cast<uint32_t>((m.scope.len + kScopeUnit - 1) / kScopeUnit);
        s->seal_index = m.seal_index;
        s->seal_epoch = m.seal_epoch;
        s->call_slot = m.call_slot;
        s->reserved = 0;
        __atomic_store_n(&s->turn, pos + 1, __ATOMIC_RELEASE);
        return true;
      }
    } else if (diff < 0) {
      return false;  // full
    } else {
      pos = __atomic_load_n(&h->head, __ATOMIC_RELAXED);
    }
  }
}

void MessageRing::push(const RpcMessage& m) {
  while (!try_push(m)) ::sched_yield();
}

std::optional<RpcMessage> MessageRing::try_pop() {
  auto* h = reinterpret_cast<RingHeader*>(base_);
  uint64_t pos = __atomic_load_n(&h->tail, __ATOMIC_RELAXED);
  for (;;) {
    Slot* s = slot(pos);
    uint64_t turn = __atomic_load_n(&s->turn, __ATOMIC_ACQUIRE);
    int64_t diff = static_cast<int64_t>(turn - (pos + 1));
    if (diff == 0) {
      if (__atomic_compare_exchange_n(&h->tail, &pos, pos + 1, true, __ATOMIC_RELAXED, __ATOMIC_RELAXED)) {
        RpcMessage m;
        m.sequence = s->sequence;
        m.function_id = s->function_id;
        m.flags = s->flags;
        m.arg = s->arg;
        m.scope = {s->scope_start, uint64_t{s->scope_pages} * kScopeUnit};
        m.seal_index = s->seal_index;
        m.seal_epoch = s->seal_epoch;
        m.call_slot = s->call_slot;
        __atomic_store_n(&s->turn, pos + capacity_, __ATOMIC_RELEASE);
        return m;
      }
    } else if (diff < 0) {
      return std::nullopt;  // empty
    } else {
      pos = __atomic_load_n(&h->tail, __ATOMIC_RELAXED);
    }
  }
}

size_t MessageRing::size_approx() const {
  auto* h = reinterpret_cast<const RingHeader*>(base_);
  uint64_t head = __atomic_load_n(&h->head, __ATOMIC_RELAXED);
  uint64_t tail = __atomic_load_n(&h->tail, __ATOMIC_RELAXED);
  return head > tail ? head - tail : 0;
}

CallTable::CallTable(void* mem, uint32_t capacity, bool init)
    : entries_(static_cast<CallEntry*>(mem)), capacity_(capacity) {
  if (init) std::memset(mem, 0, bytes_for(capacity));
  for (uint32_t i = capacity; i-- > 0;) free_.push_back(i);
}

uint32_t CallTable::acquire(uint64_t sequence) {
  for (;;) {
    {
      std::lock_guard lk(mu_);
      if (!free_.empty()) {
        uint32_t s = free_.back();
        free_.pop_back();
        CallEntry& e = entries_[s];
        e.status = 0;
        e.ret = 0;
        e.sequence = sequence;
        __atomic_store_n(&e.state, static_cast<uint32_t>(CallState::pending), __ATOMIC_RELEASE);
        return s;
      }
    }
    ::sched_yield();
  }
}

void CallTable::release(uint32_t slot) {
  __atomic_store_n(&entries_[slot].state, static_cast<uint32_t>(CallState::free), __ATOMIC_RELEASE);
  std::lock_guard lk(mu_);
  free_.push_back(slot);
}

void CallTable::complete(CallEntry& e, uint32_t status, uint64_t ret) {
  e.status = status;
  e.ret = ret;
  __atomic_store_n(&e.state, static_cast<uint32_t>(CallState::done), __ATOMIC_RELEASE);
}

bool CallTable::is_done(const CallEntry& e) {
  return __atomic_load_n(&e.state, __ATOMIC_ACQUIRE) == static_cast<uint32_t>(CallState::done);
}

}  // namespace rpcool
