#include "rpcool/copy.hpp"

#include <cstring>
#include <deque>
#include <unordered_map>

#include "rpcool/rpc.hpp"
#include "rpcool/runtime.hpp"

namespace rpcool {

LayoutRegistry::LayoutRegistry() { layouts_["bytes"] = Layout{"bytes", 1, 1, {}}; }

LayoutRegistry& LayoutRegistry::global() {
  static LayoutRegistry r;
  return r;
}

void LayoutRegistry::add(Layout l) {
  if (l.size == 0 || l.align == 0 || (l.align & (l.align - 1)) != 0)
    throw Error(Errc::invalid_argument, "layout " + l.name + " needs a size and a power-of-two alignment");
  for (const auto& r : l.refs) {
    if (r.offset + sizeof(void*) > l.size) throw Error(Errc::invalid_argument, "reference field outside " + l.name);
    if (r.count_offset >= 0 && static_cast<uint64_t>(r.count_offset) + 8 > l.size)
      throw Error(Errc::invalid_argument, "count field outside " + l.name);
  }
  std::lock_guard lk(mu_);
  std::string name = l.name;
  if (!layouts_.emplace(name, std::move(l)).second) throw Error(Errc::duplicate_name, "layout " + name);
}

const Layout& LayoutRegistry::get(const std::string& name) const {
  std::lock_guard lk(mu_);
  auto it = layouts_.find(name);
  if (it == layouts_.end()) throw Error(Errc::unregistered_layout, name);
  return it->second;
}

bool LayoutRegistry::contains(const std::string& name) const {
  std::lock_guard lk(mu_);
  return layouts_.count(name) != 0;
}

namespace {

struct Copier {
  Heap& dst;
  AddrRange source;
  const LayoutRegistry& reg;
  CopyStats stats;

  struct Seen {
    uint8_t* copy;
    const Layout* layout;
    uint64_t count;
  };
  struct Job {
    const uint8_t* src;
    uint8_t* dst;
    const Layout* layout;
    uint64_t count;
  };
  std::unordered_map<uintptr_t, Seen> seen;
  std::deque<Job> todo;

  uint8_t* visit(const void* p, const Layout& l, uint64_t count) {
    auto a = reinterpret_cast<uintptr_t>(p);
    if (count == 0) return nullptr;
    if (count > source.len / l.size || !source.contains(a, count * l.size))
      throw Error(Errc::escaping_reference, "reference to " + l.name + " leaves the source heap");
    if (auto it = seen.find(a); it != seen.end()) {
      if (it->second.layout != &l || it->second.count != count)
        throw Error(Errc::invalid_argument, "object reached with two different layouts");
      return it->second.copy;
    }
    const uint64_t bytes = count * l.size;
    auto* out = static_cast<uint8_t*>(dst.allocate(bytes, l.align < 16 ? 16 : l.align));
    std::memcpy(out, p, bytes);
    seen.emplace(a, Seen{out, &l, count});
    todo.push_back({static_cast<const uint8_t*>(p), out, &l, count});
    ++stats.objects;
    stats.bytes += bytes;
    return out;
  }

  void run() {
    while (!todo.empty()) {
      Job j = todo.front();
      todo.pop_front();
      for (uint64_t i = 0; i < j.count; ++i) {
        const uint8_t* se = j.src + i * j.layout->size;
        uint8_t* de = j.dst + i * j.layout->size;
        for (const auto& f : j.layout->refs) {
          const void* target;
          std::memcpy(&target, se + f.offset, sizeof target);
          void* fresh = nullptr;
          if (target != nullptr) {
            uint64_t n = f.count;
            if (f.count_offset >= 0) std::memcpy(&n, se + f.count_offset, sizeof n);
            fresh = visit(target, reg.get(f.target), n);
          }
          std::memcpy(de + f.offset, &fresh, sizeof fresh);
        }
      }
    }
  }
};

}  // namespace

void* copy_from(Heap& dst, AddrRange source, const void* root, const std::string& layout, uint64_t count,
                const LayoutRegistry& reg, CopyStats* stats) {
  const Layout& l = reg.get(layout);
  if (root == nullptr) return nullptr;
  Copier c{dst, source, reg, {}, {}, {}};
  void* out = nullptr;
  try {
    out = c.visit(root, l, count);
    c.run();
  } catch (...) {
    for (auto& [src, s] : c.seen) dst.deallocate(s.copy);
    throw;
  }
  if (stats) *stats = c.stats;
  return out;
}

void* copy_from(Connection& dst, const void* root, const std::string& layout, const LayoutRegistry& reg,
                CopyStats* stats) {
  if (root == nullptr) {
    reg.get(layout);
    return nullptr;
  }
  MappedHeap* src = NodeRuntime::current().find_addr(reinterpret_cast<uintptr_t>(root));
  if (src == nullptr) throw Error(Errc::escaping_reference, "root is not inside a mapped heap");
  return copy_from(dst.heap(), src->range(), root, layout, 1, reg, stats);
}

}  // namespace rpcool
