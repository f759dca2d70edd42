#include "rpcool/runtime.hpp"

#include <fcntl.h>
#include <pthread.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "rpcool/sandbox.hpp"

namespace rpcool {

namespace {

std::atomic<NodeRuntime*> g_current{nullptr};

void after_fork_child() {
  // Heaps are MADV_DONTFORK, so the child starts with none of them, and the
  // parent's runtime threads do not exist here.
  g_current.store(nullptr);
  AddressSpace::instance().clear();
  SandboxManager::instance().reset_after_fork();
}

uint32_t start_time_ticks() {
  std::ifstream in("/proc/self/stat");
  std::string line;
  std::getline(in, line);
  // Field 22 (starttime); skip past the parenthesized command name first.
  auto close = line.rfind(')');
  if (close == std::string::npos) return 0;
  std::istringstream rest(line.substr(close + 2));
  std::string tok;
  for (int field = 3; field <= 22 && rest >> tok; ++field)
    if (field == 22) return static_cast<uint32_t>(std::stoull(tok));
  return 0;
}

void mkdir_p(const std::string& dir) {
  std::string cur;
  std::istringstream in(dir);
  std::string part;
  if (!dir.empty() && dir[0] == '/') cur = "/";
  while (std::getline(in, part, '/')) {
    if (part.empty()) continue;
    cur += part + "/";
    ::mkdir(cur.c_str(), 0777);
  }
}

}  // namespace

HolderId local_holder(uint32_t node_id) {
  return HolderId{node_id, static_cast<uint32_t>(::getpid()), start_time_ticks()};
}

NodeRuntime::NodeRuntime(RuntimeConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  static std::once_flag atfork;
  std::call_once(atfork, [] { pthread_atfork(nullptr, nullptr, after_fork_child); });
  NodeRuntime* expected = nullptr;
  if (!g_current.compare_exchange_strong(expected, this))
    throw Error(Errc::invalid_argument, "a node runtime already exists in this process");
  try {
    // Protection keys must be allocated before any thread is spawned so that
    // every thread inherits access rights to them.
    SandboxManager::instance().configure(cfg_.sandbox_mode, cfg_.protection_keys_cached);
    install_fault_handler();
    self_ = local_holder(cfg_.node_id);
    orch_ = std::make_unique<OrchestratorClient>(wire::Endpoint::parse(cfg_.orchestrator), self_);
    orch_->on_notify([this](const FailureNotification& n) { dispatch_failure(n); });
  } catch (...) {
    g_current.store(nullptr);
    throw;
  }
  renewer_ = std::thread([this] { renew_loop(); });
}

NodeRuntime::~NodeRuntime() {
  stopping_ = true;
  renew_cv_.notify_all();
  if (renewer_.joinable()) renewer_.join();
  std::vector<uint64_t> ids = mapped_heap_ids();
  for (uint64_t id : ids) {
    if (auto* h = find(id)) {
      h->active_seals = 0;
      h->refs = 1;
    }
    try {
      unmap_heap(id);
    } catch (const Error&) {
      // Orchestrator may already be gone; the lease then simply lapses.
    }
  }
  orch_.reset();
  g_current.store(nullptr);
}

NodeRuntime& NodeRuntime::current() {
  NodeRuntime* rt = g_current.load();
  if (rt == nullptr) throw Error(Errc::unmapped, "no node runtime in this process");
  return *rt;
}

NodeRuntime* NodeRuntime::current_or_null() { return g_current.load(); }

MappedHeap& NodeRuntime::install(const HeapDescriptor& d, uint64_t lease_id, int fd, bool mirror) {
  void* p = nullptr;
  try {
    p = map_fixed(fd, 0, d.base, d.size, Perm::read_write);
  } catch (...) {
    ::close(fd);
    throw;
  }
  (void)p;
  ::madvise(reinterpret_cast<void*>(d.base), d.size, MADV_DONTFORK);
  auto h = std::make_unique<MappedHeap>();
  h->desc = d;
  h->lease_id = lease_id;
  h->fd = fd;
  h->mirror = mirror;
  h->page_size = cfg_.page_size;
  h->perms.assign(d.size / cfg_.page_size, Perm::read_write);
  h->refs = 1;
  SandboxManager::instance().on_shared_mapped(h->range());
  AddressSpace::instance().add_shared(d.id, h->range());
  auto& ref = *h;
  heaps_[d.id] = std::move(h);
  return ref;
}

MappedHeap& NodeRuntime::map_granted(const HeapGrant& g) {
  std::lock_guard lk(mu_);
  if (auto it = heaps_.find(g.heap.id); it != heaps_.end()) {
    ++it->second->refs;
    return *it->second;
  }
  mkdir_p(cfg_.pool_dir);
  std::string path = cfg_.pool_dir + "/" + g.heap.backing;
  int fd = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0666);
  if (fd < 0) throw_errno(Errc::unmapped, "open " + path);
  struct stat st {};
  if (::fstat(fd, &st) == 0 && static_cast<uint64_t>(st.st_size) < g.heap.size &&
      ::ftruncate(fd, static_cast<off_t>(g.heap.size)) != 0) {
    ::close(fd);
    throw_errno(Errc::unmapped, "ftruncate " + path);
  }
  return install(g.heap, g.lease.id, fd, false);
}

MappedHeap& NodeRuntime::map_heap(uint64_t heap_id) {
  {
    std::lock_guard lk(mu_);
    if (auto it = heaps_.find(heap_id); it != heaps_.end()) {
      ++it->second->refs;
      return *it->second;
    }
  }
  HeapGrant g = orch_->attach_heap(heap_id);
  try {
    return map_granted(g);
  } catch (...) {
    try {
      orch_->release_heap(heap_id);
    } catch (const Error&) {
    }
    throw;
  }
}

MappedHeap& NodeRuntime::allocate_heap(uint64_t size, uint64_t channel_id) {
  HeapGrant g = orch_->allocate_heap(size, channel_id);
  try {
    return map_granted(g);
  } catch (...) {
    try {
      orch_->release_heap(g.heap.id);
    } catch (const Error&) {
    }
    throw;
  }
}

MappedHeap& NodeRuntime::map_mirror(const HeapDescriptor& desc, uint64_t lease_id) {
  std::lock_guard lk(mu_);
  if (heaps_.count(desc.id)) throw Error(Errc::address_in_use, "heap " + std::to_string(desc.id) + " already mapped");
  int fd = ::memfd_create(("rpcool-mirror-" + std::to_string(desc.id)).c_str(), MFD_CLOEXEC);
  if (fd < 0) throw_errno(Errc::unmapped, "memfd_create");
  if (::fallocate(fd, 0, 0, static_cast<off_t>(desc.size)) != 0) {
    ::close(fd);
    throw_errno(Errc::unmapped, "fallocate mirror");
  }
  auto& h = install(desc, lease_id, fd, true);
  return h;
}

void NodeRuntime::unmap_heap(uint64_t heap_id) {
  std::unique_ptr<MappedHeap> h;
  {
    std::lock_guard lk(mu_);
    auto it = heaps_.find(heap_id);
    if (it == heaps_.end()) throw Error(Errc::unknown_heap, std::to_string(heap_id));
    if (it->second->active_seals.load() > 0)
      throw Error(Errc::active_seals, std::to_string(it->second->active_seals.load()) + " seal(s) outstanding");
    if (--it->second->refs > 0) return;
    h = std::move(it->second);
    heaps_.erase(it);
  }
  AddressSpace::instance().remove_shared(heap_id);
  SandboxManager::instance().on_shared_unmapped(h->range());
  unmap(h->addr(0), h->size());
  if (h->alias_) {
    if (SandboxManager::instance().mode() == SandboxMode::hardware)
      SandboxManager::instance().unregister_private({reinterpret_cast<uintptr_t>(h->alias_), h->size()});
    unmap(h->alias_, h->size());
  }
  ::close(h->fd);
  if (h->lease_id != 0) orch_->release_heap(heap_id);
}

MappedHeap* NodeRuntime::find(uint64_t heap_id) {
  std::lock_guard lk(mu_);
  auto it = heaps_.find(heap_id);
  return it == heaps_.end() ? nullptr : it->second.get();
}

MappedHeap* NodeRuntime::find_addr(uintptr_t addr) {
  std::lock_guard lk(mu_);
  for (auto& [id, h] : heaps_)
    if (h->range().contains(addr)) return h.get();
  return nullptr;
}

std::vector<uint64_t> NodeRuntime::mapped_heap_ids() {
  std::lock_guard lk(mu_);
  std::vector<uint64_t> out;
  for (auto& [id, h] : heaps_) out.push_back(id);
  return out;
}

void NodeRuntime::set_range_permission(Privileged p, uint64_t heap_id, AddrRange pages, Perm mode) {
  set_ranges_permission(p, heap_id, {pages}, mode);
}

void NodeRuntime::set_ranges_permission(Privileged, uint64_t heap_id, const std::vector<AddrRange>& ranges, Perm mode) {
  MappedHeap* h = find(heap_id);
  if (h == nullptr) throw Error(Errc::unmapped, "heap " + std::to_string(heap_id) + " is not mapped");
  for (const auto& r : ranges) {
    if (r.empty()) throw Error(Errc::empty_range, "permission change over zero pages");
    if (r.start % h->page_size != 0 || r.len % h->page_size != 0)
      throw Error(Errc::not_page_aligned, "permission ranges must be whole pages");
    if (!h->range().contains(r)) throw Error(Errc::out_of_bounds, "range outside heap");
  }
  std::lock_guard lk(perm_mu_);
  for (const auto& r : ranges) {
    if (::mprotect(reinterpret_cast<void*>(r.start), r.len, to_prot(mode)) != 0)
      throw_errno(Errc::out_of_bounds, "mprotect");
    uint64_t first = (r.start - h->base()) / h->page_size;
    std::fill_n(h->perms.begin() + static_cast<ptrdiff_t>(first), r.len / h->page_size, mode);
  }
}

std::vector<std::pair<AddrRange, Perm>> NodeRuntime::permission_runs(Privileged p) {
  return permission_runs(p, AddrRange{0, ~uintptr_t{0}});
}

std::vector<std::pair<AddrRange, Perm>> NodeRuntime::permission_runs(Privileged, AddrRange within) {
  std::vector<std::pair<AddrRange, Perm>> runs;
  std::lock_guard lk(mu_);
  for (auto& [id, h] : heaps_) {
    if (!h->range().overlaps(within)) continue;
    const uintptr_t lo = std::max(within.start, h->base());
    const uintptr_t hi = std::min(within.end(), h->base() + h->size());
    uint64_t n = (hi - h->base() + h->page_size - 1) / h->page_size;
    uint64_t i = (lo - h->base()) / h->page_size;
    while (i < n) {
      uint64_t j = i;
      while (j < n && h->perms[j] == h->perms[i]) ++j;
      runs.push_back({{h->base() + i * h->page_size, (j - i) * h->page_size}, h->perms[i]});
      i = j;
    }
  }
  return runs;
}

uint8_t* NodeRuntime::privileged_alias(Privileged, uint64_t heap_id) {
  std::lock_guard lk(mu_);
  auto it = heaps_.find(heap_id);
  if (it == heaps_.end()) throw Error(Errc::unmapped, "heap " + std::to_string(heap_id) + " is not mapped");
  MappedHeap& h = *it->second;
  if (h.alias_ == nullptr) {
    h.alias_ = map_alias(h.fd, 0, h.size(), Perm::read_write);
    ::madvise(h.alias_, h.size(), MADV_DONTFORK);
    // Sandboxed code must not reach the heap through the alias either.
    if (SandboxManager::instance().mode() == SandboxMode::hardware)
      SandboxManager::instance().register_private({reinterpret_cast<uintptr_t>(h.alias_), h.size()});
  }
  return static_cast<uint8_t*>(h.alias_);
}

uint64_t NodeRuntime::add_failure_listener(FailureFn fn) {
  std::lock_guard lk(listeners_mu_);
  uint64_t t = next_listener_++;
  listeners_[t] = std::move(fn);
  return t;
}

void NodeRuntime::remove_failure_listener(uint64_t token) {
  std::lock_guard lk(listeners_mu_);
  listeners_.erase(token);
}

void NodeRuntime::dispatch_failure(const FailureNotification& n) {
  std::vector<FailureFn> fns;
  {
    std::lock_guard lk(listeners_mu_);
    for (auto& [t, fn] : listeners_) fns.push_back(fn);
  }
  for (auto& fn : fns) fn(n);
}

void NodeRuntime::renew_all() {
  std::vector<std::pair<uint64_t, uint64_t>> leases;
  {
    std::lock_guard lk(mu_);
    for (auto& [id, h] : heaps_)
      if (h->lease_id != 0) leases.push_back({id, h->lease_id});
  }
  for (auto [heap, lease] : leases) {
    try {
      orch_->renew_lease(lease);
    } catch (const Error& e) {
      ++lease_failures_;
      std::fprintf(stderr, "rpcool: lease %llu on heap %llu not renewed: %s\n",
                   static_cast<unsigned long long>(lease), static_cast<unsigned long long>(heap), e.what());
    }
  }
}

void NodeRuntime::renew_loop() {
  std::unique_lock lk(renew_mu_);
  while (!stopping_) {
    renew_cv_.wait_for(lk, cfg_.renew_interval, [this] { return stopping_.load(); });
    if (stopping_) break;
    lk.unlock();
    renew_all();
    lk.lock();
  }
}

}  // namespace rpcool
