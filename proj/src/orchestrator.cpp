#include "rpcool/orchestrator.hpp"

#include <unistd.h>

#include <algorithm>

namespace rpcool {

std::string HolderId::str() const {
  return std::to_string(node) + ":" + std::to_string(pid) + "#" + std::to_string(incarnation);
}

bool valid_channel_name(std::string_view name) {
  if (name.size() < 2 || name.front() != '/' || name.back() == '/') return false;
  size_t seg = 0;
  for (size_t i = 1; i <= name.size(); ++i) {
    if (i == name.size() || name[i] == '/') {
      if (seg == 0) return false;
      seg = 0;
    } else {
      ++seg;
    }
  }
  return true;
}

// AddressPool ---------------------------------------------------------------

AddressPool::AddressPool(uint64_t base, uint64_t span, uint64_t page) : page_(page) {
  free_.emplace(base, span);
}

std::optional<uint64_t> AddressPool::allocate(uint64_t size) {
  if (size == 0 || size % page_ != 0) return std::nullopt;
  for (auto it = free_.begin(); it != free_.end(); ++it) {
    if (it->second < size) continue;
    uint64_t start = it->first;
    uint64_t rest = it->second - size;
    free_.erase(it);
    if (rest > 0) free_.emplace(start + size, rest);
    return start;
  }
  return std::nullopt;
}

void AddressPool::release(uint64_t base, uint64_t size) {
  auto [it, inserted] = free_.emplace(base, size);
  if (!inserted) throw Error(Errc::corrupt_heap, "address range released twice");
  if (auto next = std::next(it); next != free_.end() && it->first + it->second == next->first) {
    it->second += next->second;
    free_.erase(next);
  }
  if (it != free_.begin()) {
    auto prev = std::prev(it);
    if (prev->first + prev->second == it->first) {
      prev->second += it->second;
      free_.erase(it);
    }
  }
}

uint64_t AddressPool::free_bytes() const {
  uint64_t total = 0;
  for (const auto& [start, len] : free_) total += len;
  return total;
}

// Orchestrator --------------------------------------------------------------

Orchestrator::Orchestrator(OrchestratorConfig cfg)
    : cfg_(std::move(cfg)), pool_(cfg_.pool_base, cfg_.pool_span, cfg_.page_size) {
  if (!cfg_.journal_path.empty()) {
    journal_.open(cfg_.journal_path, std::ios::app);
    if (!journal_) throw Error(Errc::config_error, "cannot open journal " + cfg_.journal_path);
  }
}

void Orchestrator::journal(const std::string& line) {
  if (journal_.is_open()) journal_ << line << '\n' << std::flush;
}

uint64_t Orchestrator::default_quota_for(const HolderId& h) const {
  if (auto it = cfg_.process_quota.find({h.node, h.pid}); it != cfg_.process_quota.end()) return it->second;
  if (auto it = cfg_.node_quota.find(h.node); it != cfg_.node_quota.end()) return it->second;
  return cfg_.default_quota;
}

Orchestrator::LedgerEntry& Orchestrator::ledger(const HolderId& h) {
  auto it = ledger_.find(h);
  if (it == ledger_.end()) it = ledger_.emplace(h, LedgerEntry{default_quota_for(h), 0}).first;
  return it->second;
}

Lease Orchestrator::new_lease(uint64_t heap_id, const HolderId& holder, Nanos now) {
  Lease l;
  l.id = next_lease_id_++;
  l.heap_id = heap_id;
  l.holder = holder;
  l.renew_period = cfg_.lease_term();
  l.expiry = now + l.renew_period;
  leases_.emplace(l.id, l);
  heaps_.at(heap_id).holders[holder] = l.id;
  ledger(holder).mapped += heaps_.at(heap_id).desc.size;
  journal("lease " + std::to_string(l.id) + " heap " + std::to_string(heap_id) + " holder " + holder.str());
  return l;
}

HeapGrant Orchestrator::new_heap(uint64_t size, const HolderId& holder, Nanos now, uint64_t channel_id) {
  if (size == 0) throw Error(Errc::invalid_argument, "heap size must be positive");
  size = round_up(size, cfg_.page_size);
  auto& entry = ledger(holder);
  if (entry.mapped + size > entry.quota)
    throw Error(Errc::quota_exceeded, "holder " + holder.str() + " maps " + std::to_string(entry.mapped) + " of " +
                                          std::to_string(entry.quota) + " bytes; return unused heaps");
  auto base = pool_.allocate(size);
  if (!base) throw Error(Errc::pool_exhausted, "no free range of " + std::to_string(size) + " bytes");
  HeapState hs;
  hs.desc.id = next_heap_id_++;
  hs.desc.base = *base;
  hs.desc.size = size;
  hs.desc.backing = "heap-" + std::to_string(hs.desc.id);
  if (channel_id != 0) hs.channels.insert(channel_id);
  uint64_t id = hs.desc.id;
  heaps_.emplace(id, std::move(hs));
  journal("heap " + std::to_string(id) + " base " + std::to_string(*base) + " size " + std::to_string(size));
  Lease l = new_lease(id, holder, now);
  return HeapGrant{heaps_.at(id).desc, l};
}

RegisterResult Orchestrator::register_channel(const RegisterRequest& req, Nanos now) {
  std::lock_guard lk(mu_);
  if (!valid_channel_name(req.name)) throw Error(Errc::malformed_name, req.name);
  if (channels_.contains(req.name)) throw Error(Errc::duplicate_name, req.name);
  uint64_t cid = next_channel_id_;
  HeapGrant g = new_heap(req.initial_heap_size, req.creator, now, cid);
  ++next_channel_id_;
  ChannelState ch;
  ch.record.name = req.name;
  ch.record.id = cid;
  ch.record.server = req.creator;
  ch.record.mode = req.mode;
  ch.record.pool_id = req.pool_id;
  ch.record.fallback_endpoint = req.fallback_endpoint;
  ch.record.allow_nodes = req.allow_nodes;
  ch.heap_ids.push_back(g.heap.id);
  auto& stored = channels_.emplace(req.name, std::move(ch)).first->second;
  channel_names_[cid] = req.name;
  journal("register " + req.name + " id " + std::to_string(cid));
  return RegisterResult{materialize(stored), g.lease};
}

ChannelRecord Orchestrator::materialize(const ChannelState& ch) const {
  ChannelRecord r = ch.record;
  r.heaps.clear();
  for (uint64_t id : ch.heap_ids)
    if (auto it = heaps_.find(id); it != heaps_.end()) r.heaps.push_back(it->second.desc);
  return r;
}

std::optional<ChannelRecord> Orchestrator::lookup_channel(std::string_view name) const {
  std::lock_guard lk(mu_);
  auto it = channels_.find(name);
  if (it == channels_.end()) return std::nullopt;
  return materialize(it->second);
}

void Orchestrator::close_channel(std::string_view name, const HolderId& holder) {
  std::lock_guard lk(mu_);
  auto it = channels_.find(name);
  if (it == channels_.end()) throw Error(Errc::unknown_channel, std::string(name));
  if (it->second.record.server != holder) throw Error(Errc::acl_denied, "only the channel creator may close it");
  uint64_t cid = it->second.record.id;
  for (uint64_t hid : it->second.heap_ids)
    if (auto h = heaps_.find(hid); h != heaps_.end()) h->second.channels.erase(cid);
  channel_names_.erase(cid);
  channels_.erase(it);
  journal("close " + std::string(name));
}

HeapGrant Orchestrator::allocate_heap(uint64_t size, const HolderId& holder, Nanos now, uint64_t channel_id) {
  std::lock_guard lk(mu_);
  if (channel_id != 0 && !channel_names_.contains(channel_id))
    throw Error(Errc::unknown_channel, "channel id " + std::to_string(channel_id));
  HeapGrant g = new_heap(size, holder, now, channel_id);
  if (channel_id != 0) channels_.find(channel_names_.at(channel_id))->second.heap_ids.push_back(g.heap.id);
  return g;
}

HeapGrant Orchestrator::attach_heap(uint64_t heap_id, const HolderId& holder, Nanos now) {
  std::lock_guard lk(mu_);
  auto it = heaps_.find(heap_id);
  if (it == heaps_.end()) throw Error(Errc::unknown_heap, std::to_string(heap_id));
  if (auto h = it->second.holders.find(holder); h != it->second.holders.end())
    return HeapGrant{it->second.desc, leases_.at(h->second)};
  auto& entry = ledger(holder);
  if (entry.mapped + it->second.desc.size > entry.quota)
    throw Error(Errc::quota_exceeded, "holder " + holder.str() + " maps " + std::to_string(entry.mapped) + " of " +
                                          std::to_string(entry.quota) + " bytes; return unused heaps");
  Lease l = new_lease(heap_id, holder, now);
  return HeapGrant{it->second.desc, l};
}

void Orchestrator::drop_lease(uint64_t lease_id) {
  auto it = leases_.find(lease_id);
  if (it == leases_.end()) return;
  const Lease l = it->second;
  leases_.erase(it);
  auto& heap = heaps_.at(l.heap_id);
  heap.holders.erase(l.holder);
  auto& entry = ledger(l.holder);
  entry.mapped -= std::min(entry.mapped, heap.desc.size);
}

void Orchestrator::reclaim(uint64_t heap_id) {
  auto it = heaps_.find(heap_id);
  if (it == heaps_.end() || !it->second.holders.empty()) return;
  pool_.release(it->second.desc.base, it->second.desc.size);
  for (uint64_t cid : it->second.channels) {
    auto name = channel_names_.find(cid);
    if (name == channel_names_.end()) continue;
    auto ch = channels_.find(name->second);
    auto& ids = ch->second.heap_ids;
    ids.erase(std::remove(ids.begin(), ids.end(), heap_id), ids.end());
    // A channel never outlives its last heap.
    if (ids.empty()) {
      journal("close " + ch->first + " (no live heaps)");
      channels_.erase(ch);
      channel_names_.erase(name);
    }
  }
  journal("reclaim heap " + std::to_string(heap_id));
  if (!cfg_.pool_dir.empty()) ::unlink((cfg_.pool_dir + "/" + it->second.desc.backing).c_str());
  heaps_.erase(it);
}

void Orchestrator::release_heap(uint64_t heap_id, const HolderId& holder) {
  std::lock_guard lk(mu_);
  auto it = heaps_.find(heap_id);
  if (it == heaps_.end()) throw Error(Errc::unknown_heap, std::to_string(heap_id));
  auto h = it->second.holders.find(holder);
  if (h == it->second.holders.end()) throw Error(Errc::unknown_lease, "holder does not map heap " + std::to_string(heap_id));
  drop_lease(h->second);
  reclaim(heap_id);
}

Nanos Orchestrator::renew_lease(uint64_t lease_id, Nanos now) {
  std::lock_guard lk(mu_);
  auto it = leases_.find(lease_id);
  if (it == leases_.end()) throw Error(Errc::unknown_lease, std::to_string(lease_id));
  Lease& l = it->second;
  if (l.expiry < now) throw Error(Errc::lease_expired, "lease " + std::to_string(lease_id) + " must be remapped");
  l.expiry = std::max(now + l.renew_period, l.expiry + Nanos(1));
  return l.expiry;
}

std::vector<FailureNotification> Orchestrator::expire_sweep(Nanos now) {
  std::lock_guard lk(mu_);
  struct Expired {
    HolderId holder;
    uint64_t heap_id;
  };
  std::vector<Expired> expired;
  for (const auto& [id, l] : leases_)
    if (l.expiry < now) expired.push_back({l.holder, l.heap_id});
  if (expired.empty()) return {};

  for (const auto& e : expired) drop_lease(heaps_.at(e.heap_id).holders.at(e.holder));

  std::vector<FailureNotification> out;
  std::set<uint64_t> touched;
  for (const auto& e : expired) {
    touched.insert(e.heap_id);
    const auto& heap = heaps_.at(e.heap_id);
    std::vector<std::string> names;
    for (uint64_t cid : heap.channels)
      if (auto n = channel_names_.find(cid); n != channel_names_.end()) names.push_back(n->second);
    for (const auto& [survivor, lease_id] : heap.holders)
      out.push_back(FailureNotification{survivor, e.holder, e.heap_id, names});
    journal("expired " + e.holder.str() + " heap " + std::to_string(e.heap_id));
  }
  for (uint64_t id : touched) reclaim(id);
  return out;
}

QuotaDecision Orchestrator::check_quota(const HolderId& holder, uint64_t additional) {
  std::lock_guard lk(mu_);
  const auto& e = ledger(holder);
  return QuotaDecision{e.mapped + additional <= e.quota, e.mapped, e.quota};
}

void Orchestrator::set_quota(const HolderId& holder, uint64_t bytes) {
  std::lock_guard lk(mu_);
  ledger(holder).quota = bytes;
}

std::vector<HeapDescriptor> Orchestrator::live_heaps() const {
  std::lock_guard lk(mu_);
  std::vector<HeapDescriptor> out;
  for (const auto& [id, h] : heaps_) out.push_back(h.desc);
  return out;
}

std::vector<HolderId> Orchestrator::holders_of(uint64_t heap_id) const {
  std::lock_guard lk(mu_);
  std::vector<HolderId> out;
  if (auto it = heaps_.find(heap_id); it != heaps_.end())
    for (const auto& [h, l] : it->second.holders) out.push_back(h);
  return out;
}

std::optional<Lease> Orchestrator::lease(uint64_t lease_id) const {
  std::lock_guard lk(mu_);
  if (auto it = leases_.find(lease_id); it != leases_.end()) return it->second;
  return std::nullopt;
}

std::optional<Lease> Orchestrator::lease_of(uint64_t heap_id, const HolderId& holder) const {
  std::lock_guard lk(mu_);
  auto it = heaps_.find(heap_id);
  if (it == heaps_.end()) return std::nullopt;
  auto h = it->second.holders.find(holder);
  if (h == it->second.holders.end()) return std::nullopt;
  return leases_.at(h->second);
}

uint64_t Orchestrator::mapped_bytes(const HolderId& holder) const {
  std::lock_guard lk(mu_);
  auto it = ledger_.find(holder);
  return it == ledger_.end() ? 0 : it->second.mapped;
}

uint64_t Orchestrator::pool_free_bytes() const {
  std::lock_guard lk(mu_);
  return pool_.free_bytes();
}

}  // namespace rpcool
