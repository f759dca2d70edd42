#include "rpcool/seal.hpp"

#include <sys/mman.h>
#include <unistd.h>

#include <algorithm>

#include "rpcool/config.hpp"
#include "rpcool/runtime.hpp"

namespace rpcool {

namespace {

uint8_t load_state(const SealDescriptor& d) { return __atomic_load_n(&d.state, __ATOMIC_ACQUIRE); }

}  // namespace

uint64_t SealRing::bytes_for(uint32_t capacity, uint64_t page_size) {
  return round_up(uint64_t{capacity} * sizeof(SealDescriptor), page_size);
}

SealRing::SealRing(SealRole role, uint64_t heap_id, uint32_t capacity)
    : role_(role), heap_id_(heap_id), capacity_(capacity) {
  if (capacity == 0) throw Error(Errc::invalid_argument, "seal ring capacity must be positive");
}

std::unique_ptr<SealRing> SealRing::in_heap(SealRole role, uint64_t heap_id, void* ring, uint32_t capacity) {
  NodeRuntime& rt = NodeRuntime::current();
  MappedHeap* h = rt.find(heap_id);
  if (h == nullptr) throw Error(Errc::unmapped, "seal ring heap is not mapped");
  std::unique_ptr<SealRing> r(new SealRing(role, heap_id, capacity));
  r->bytes_ = bytes_for(capacity, h->page_size);
  uintptr_t a = reinterpret_cast<uintptr_t>(ring);
  if (a % h->page_size != 0 || !h->range().contains(a, r->bytes_))
    throw Error(Errc::not_page_aligned, "seal ring must be whole pages inside the heap");
  uint8_t* alias = rt.privileged_alias(Privileged{}, heap_id);
  r->rw_ = reinterpret_cast<SealDescriptor*>(alias + (a - h->base()));
  if (role == SealRole::sender) {
    r->view_ = static_cast<SealDescriptor*>(ring);
    r->heap_pages_ = {a, r->bytes_};
    rt.set_range_permission(Privileged{}, heap_id, r->heap_pages_, Perm::read);
  } else {
    r->view_ = r->rw_;
  }
  return r;
}

std::unique_ptr<SealRing> SealRing::local(SealRole role, uint64_t heap_id, uint32_t capacity) {
  std::unique_ptr<SealRing> r(new SealRing(role, heap_id, capacity));
  r->bytes_ = bytes_for(capacity, host_page_size());
  int fd = ::memfd_create("rpcool-seal-ring", MFD_CLOEXEC);
  if (fd < 0) throw_errno(Errc::unmapped, "memfd_create");
  if (::ftruncate(fd, static_cast<off_t>(r->bytes_)) != 0) {
    ::close(fd);
    throw_errno(Errc::unmapped, "ftruncate seal ring");
  }
  r->owned_rw_ = map_alias(fd, 0, r->bytes_, Perm::read_write);
  r->rw_ = static_cast<SealDescriptor*>(r->owned_rw_);
  if (role == SealRole::sender) {
    r->owned_ro_ = map_alias(fd, 0, r->bytes_, Perm::read);
    r->view_ = static_cast<SealDescriptor*>(r->owned_ro_);
  } else {
    r->view_ = r->rw_;
  }
  ::close(fd);
  return r;
}

SealRing::~SealRing() {
  if (owned_ro_) unmap(owned_ro_, bytes_);
  if (owned_rw_) unmap(owned_rw_, bytes_);
  if (!heap_pages_.empty()) {
    if (auto* rt = NodeRuntime::current_or_null(); rt && rt->find(heap_id_)) {
      try {
        rt->set_range_permission(Privileged{}, heap_id_, heap_pages_, Perm::read_write);
      } catch (const Error&) {
      }
    }
  }
}

void SealRing::check_index(uint32_t index) const {
  if (index >= capacity_) throw Error(Errc::out_of_bounds, "seal index " + std::to_string(index));
}

SealDescriptor SealRing::read(uint32_t index) const {
  check_index(index);
  SealDescriptor d;
  const SealDescriptor& s = view_[index];
  d.state = load_state(s);
  d.start = s.start;
  d.len = s.len;
  d.epoch = s.epoch;
  return d;
}

void SealRing::write_state(uint32_t index, SealState s) {
  __atomic_store_n(&rw_[index].state, static_cast<uint8_t>(s), __ATOMIC_RELEASE);
}

SealTicket SealRing::seal(AddrRange range) {
  if (role_ != SealRole::sender) throw Error(Errc::wrong_role, "only the sender seals");
  if (range.empty()) throw Error(Errc::empty_range, "cannot seal zero bytes");
  NodeRuntime& rt = NodeRuntime::current();
  MappedHeap* h = rt.find(heap_id_);
  if (h == nullptr) throw Error(Errc::unmapped, "heap is not mapped");
  if (range.start % h->page_size != 0 || range.len % h->page_size != 0)
    throw Error(Errc::not_page_aligned, "seals cover whole pages");
  if (!h->range().contains(range)) throw Error(Errc::out_of_bounds, "seal range outside the heap");

  std::lock_guard lk(mu_);
  auto it = active_.upper_bound(range.start);
  if (it != active_.begin() && std::prev(it)->second.first > range.start)
    throw Error(Errc::overlapping_seal, "range overlaps an active seal");
  if (it != active_.end() && it->first < range.end()) throw Error(Errc::overlapping_seal, "range overlaps an active seal");

  uint32_t index = kNoSeal;
  for (uint32_t probe = 0; probe < capacity_; ++probe) {
    uint32_t i = (cursor_ + probe) % capacity_;
    uint8_t st = load_state(rw_[i]);
    if (st == static_cast<uint8_t>(SealState::empty) || st == static_cast<uint8_t>(SealState::released)) {
      index = i;
      break;
    }
  }
  if (index == kNoSeal) throw Error(Errc::ring_full, "all seal descriptors are in use");
  cursor_ = (index + 1) % capacity_;

  SealDescriptor& d = rw_[index];
  const uint64_t epoch = d.epoch + 1;
  d.start = range.start;
  d.len = range.len;
  d.epoch = epoch;
  write_state(index, SealState::sealed);
  rt.set_range_permission(Privileged{}, heap_id_, range, Perm::read);
  active_[range.start] = {range.end(), index};
  ++h->active_seals;
  return SealTicket{index, epoch, range};
}

SealTicket SealRing::seal(Scope& scope) {
  SealTicket t = seal(scope.range());
  scope.heap().set_scope_state(scope.index(), ScopeState::sealed);
  std::lock_guard lk(mu_);
  sealed_scopes_[t.index] = scope;
  return t;
}

bool SealRing::is_sealed(uint32_t index, uint64_t epoch, AddrRange expected) const {
  if (index >= capacity_) return false;
  const SealDescriptor& d = view_[index];
  if (load_state(d) != static_cast<uint8_t>(SealState::sealed)) return false;
  AddrRange sealed{d.start, d.len};
  bool ok = d.epoch == epoch && sealed.contains(expected);
  // The slot may have been recycled while we read it.
  return ok && load_state(d) == static_cast<uint8_t>(SealState::sealed) && d.epoch == epoch;
}

void SealRing::mark_complete(uint32_t index, uint64_t epoch) {
  if (role_ != SealRole::receiver) throw Error(Errc::wrong_role, "only the receiver marks completion");
  check_index(index);
  SealDescriptor& d = rw_[index];
  if (d.epoch != epoch) throw Error(Errc::wrong_state, "seal epoch mismatch");
  uint8_t expected = static_cast<uint8_t>(SealState::sealed);
  if (!__atomic_compare_exchange_n(&d.state, &expected, static_cast<uint8_t>(SealState::completed), false,
                                   __ATOMIC_ACQ_REL, __ATOMIC_ACQUIRE))
    throw Error(Errc::wrong_state, "descriptor is not sealed");
}

void SealRing::apply_remote(uint32_t index, const SealDescriptor& d) {
  check_index(index);
  SealDescriptor& s = rw_[index];
  s.start = d.start;
  s.len = d.len;
  s.epoch = d.epoch;
  write_state(index, static_cast<SealState>(d.state));
}

void SealRing::finish_release(uint32_t index) {
  SealDescriptor& d = rw_[index];
  active_.erase(d.start);
  write_state(index, SealState::released);
  if (auto it = sealed_scopes_.find(index); it != sealed_scopes_.end()) {
    it->second.heap().set_scope_state(it->second.index(), ScopeState::active);
    sealed_scopes_.erase(it);
  }
  if (auto* h = NodeRuntime::current().find(heap_id_)) --h->active_seals;
}

void SealRing::release(uint32_t index) {
  if (role_ != SealRole::sender) throw Error(Errc::wrong_role, "only the sender releases");
  check_index(index);
  std::lock_guard lk(mu_);
  uint8_t st = load_state(rw_[index]);
  if (st == static_cast<uint8_t>(SealState::sealed)) throw Error(Errc::not_complete, "the call has not completed");
  if (st != static_cast<uint8_t>(SealState::completed)) throw Error(Errc::wrong_state, "descriptor is not active");
  const SealDescriptor& d = rw_[index];
  NodeRuntime::current().set_range_permission(Privileged{}, heap_id_, {d.start, d.len}, Perm::read_write);
  finish_release(index);
}

std::vector<uint32_t> SealRing::release_batch(const std::vector<uint32_t>& indices) {
  if (role_ != SealRole::sender) throw Error(Errc::wrong_role, "only the sender releases");
  std::lock_guard lk(mu_);
  std::vector<uint32_t> done;
  std::vector<AddrRange> ranges;
  for (uint32_t i : indices) {
    if (i >= capacity_ || load_state(rw_[i]) != static_cast<uint8_t>(SealState::completed)) continue;
    done.push_back(i);
    ranges.push_back({rw_[i].start, rw_[i].len});
  }
  if (done.empty()) return done;
  std::sort(ranges.begin(), ranges.end(), [](const AddrRange& a, const AddrRange& b) { return a.start < b.start; });
  std::vector<AddrRange> runs;
  for (const auto& r : ranges) {
    if (!runs.empty() && runs.back().end() == r.start) runs.back().len += r.len;
    else runs.push_back(r);
  }
  NodeRuntime::current().set_ranges_permission(Privileged{}, heap_id_, runs, Perm::read_write);
  for (uint32_t i : done) finish_release(i);
  return done;
}

size_t SealRing::active() const {
  std::lock_guard lk(mu_);
  return active_.size();
}

// ScopePool ----------------------------------------------------------------------

ScopePool::ScopePool(Heap heap, SealRing& ring, size_t scope_bytes, size_t count, uint32_t threshold)
    : heap_(heap), ring_(ring), threshold_(threshold) {
  if (threshold == 0) throw Error(Errc::invalid_argument, "batch threshold must be positive");
  for (size_t i = 0; i < count; ++i) all_.push_back(heap_.create_scope(scope_bytes));
  // Hand out scopes in address order so batches coalesce into long runs.
  free_.assign(all_.rbegin(), all_.rend());
}

ScopePool::~ScopePool() {
  try {
    flush();
  } catch (const Error&) {
  }
  for (auto& s : all_) {
    if (s.valid() && s.state() != ScopeState::sealed) s.destroy();
  }
}

Scope ScopePool::acquire() {
  if (free_.empty()) flush();
  if (free_.empty()) throw Error(Errc::out_of_space, "no scope available; pending seals are not complete");
  Scope s = free_.back();
  free_.pop_back();
  return s;
}

SealTicket ScopePool::seal(Scope& s) { return ring_.seal(s); }

void ScopePool::defer_release(const Scope& s, const SealTicket& t) {
  pending_.push_back({s, t});
  if (pending_.size() >= threshold_) flush();
}

size_t ScopePool::flush() {
  if (pending_.empty()) return 0;
  std::vector<uint32_t> idx;
  idx.reserve(pending_.size());
  for (const auto& p : pending_) idx.push_back(p.ticket.index);
  auto done = ring_.release_batch(idx);
  std::vector<bool> released(ring_.capacity(), false);
  for (uint32_t i : done) released[i] = true;
  std::vector<Pending> keep;
  for (auto& p : pending_) {
    if (released[p.ticket.index]) {
      p.scope.reset();
      free_.push_back(p.scope);
    } else {
      keep.push_back(p);
    }
  }
  pending_.swap(keep);
  return done.size();
}

}  // namespace rpcool
