#include "rpcool/cooldb.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>

namespace rpcool::cooldb {

const DocNode* DocNode::get(std::string_view name) const {
  if (kind != Kind::object) return nullptr;
  const DocField* f = fields();
  for (uint32_t i = 0; i < count; ++i)
    if (f[i].key() == name) return &f[i].value;
  return nullptr;
}

// Trees --------------------------------------------------------------------------

namespace {

uint64_t copy_chars(Allocator& a, std::string_view s) {
  auto* p = static_cast<char*>(a.allocate(std::max<size_t>(s.size(), 1), 1));
  std::memcpy(p, s.data(), s.size());
  return reinterpret_cast<uint64_t>(p);
}

void fill(Allocator& a, DocNode& n, const json& j) {
  n.count = 0;
  n.number = 0;
  n.ptr = 0;
  switch (j.type()) {
    case json::value_t::null:
    case json::value_t::discarded:
      n.kind = Kind::null;
      break;
    case json::value_t::boolean:
      n.kind = Kind::boolean;
      n.number = j.get<bool>() ? 1 : 0;
      break;
    case json::value_t::number_integer:
    case json::value_t::number_unsigned:
    case json::value_t::number_float:
      n.kind = Kind::number;
      n.number = j.get<double>();
      break;
    case json::value_t::string:
    case json::value_t::binary: {
      const auto& s = j.get_ref<const std::string&>();
      n.kind = Kind::string;
      n.count = static_cast<uint32_t>(s.size());
      n.ptr = copy_chars(a, s);
      break;
    }
    case json::value_t::array: {
      n.kind = Kind::array;
      n.count = static_cast<uint32_t>(j.size());
      auto* items = static_cast<DocNode*>(a.allocate(sizeof(DocNode) * std::max<size_t>(j.size(), 1), 8));
      for (size_t i = 0; i < j.size(); ++i) fill(a, items[i], j[i]);
      n.ptr = reinterpret_cast<uint64_t>(items);
      break;
    }
    case json::value_t::object: {
      n.kind = Kind::object;
      n.count = static_cast<uint32_t>(j.size());
      auto* fields = static_cast<DocField*>(a.allocate(sizeof(DocField) * std::max<size_t>(j.size(), 1), 8));
      size_t i = 0;
      for (auto it = j.begin(); it != j.end(); ++it, ++i) {
        fields[i].name = copy_chars(a, it.key());
        fields[i].name_len = static_cast<uint32_t>(it.key().size());
        fields[i].pad = 0;
        fill(a, fields[i].value, it.value());
      }
      n.ptr = reinterpret_cast<uint64_t>(fields);
      break;
    }
  }
}

void free_children(Heap& h, const DocNode& n) {
  switch (n.kind) {
    case Kind::string:
      if (n.ptr) h.deallocate(reinterpret_cast<void*>(n.ptr));
      break;
    case Kind::array:
      for (uint32_t i = 0; i < n.count; ++i) free_children(h, n.items()[i]);
      if (n.ptr) h.deallocate(reinterpret_cast<void*>(n.ptr));
      break;
    case Kind::object:
      for (uint32_t i = 0; i < n.count; ++i) {
        h.deallocate(reinterpret_cast<void*>(n.fields()[i].name));
        free_children(h, n.fields()[i].value);
      }
      if (n.ptr) h.deallocate(reinterpret_cast<void*>(n.ptr));
      break;
    default:
      break;
  }
}

size_t scope_bytes(const json& j) {
  auto r8 = [](size_t n) { return (n + 7) & ~size_t{7}; };
  switch (j.type()) {
    case json::value_t::string:
      return r8(std::max<size_t>(j.get_ref<const std::string&>().size(), 1));
    case json::value_t::array: {
      size_t t = r8(sizeof(DocNode) * std::max<size_t>(j.size(), 1));
      for (const auto& x : j) t += scope_bytes(x);
      return t;
    }
    case json::value_t::object: {
      size_t t = r8(sizeof(DocField) * std::max<size_t>(j.size(), 1));
      for (auto it = j.begin(); it != j.end(); ++it) t += r8(std::max<size_t>(it.key().size(), 1)) + scope_bytes(it.value());
      return t;
    }
    default:
      return 0;
  }
}

}  // namespace

DocNode* build(Allocator a, const json& j) {
  auto* root = static_cast<DocNode*>(a.allocate(sizeof(DocNode), 8));
  fill(a, *root, j);
  return root;
}

json to_json(const DocNode* n) {
  if (n == nullptr) return nullptr;
  switch (n->kind) {
    case Kind::null:
      return nullptr;
    case Kind::boolean:
      return n->number != 0;
    case Kind::number: {
      double v = n->number;
      if (std::floor(v) == v && std::fabs(v) < 9e15) return static_cast<int64_t>(v);
      return v;
    }
    case Kind::string:
      return std::string(n->str());
    case Kind::array: {
      json a = json::array();
      for (uint32_t i = 0; i < n->count; ++i) a.push_back(to_json(&n->items()[i]));
      return a;
    }
    case Kind::object: {
      json o = json::object();
      for (uint32_t i = 0; i < n->count; ++i) o[std::string(n->fields()[i].key())] = to_json(&n->fields()[i].value);
      return o;
    }
  }
  throw Error(Errc::corrupt_heap, "unknown document node kind");
}

void free_tree(Heap& h, DocNode* root) {
  if (root == nullptr) return;
  free_children(h, *root);
  h.deallocate(root);
}

bool within(const DocNode* root, AddrRange r, uint64_t max_nodes) {
  auto in = [&](uint64_t addr, uint64_t n) { return r.contains(addr, n == 0 ? 1 : n); };
  if (!in(reinterpret_cast<uint64_t>(root), sizeof(DocNode))) return false;
  std::vector<const DocNode*> stack{root};
  uint64_t seen = 0;
  while (!stack.empty()) {
    const DocNode* n = stack.back();
    stack.pop_back();
    if (++seen > max_nodes) return false;
    switch (n->kind) {
      case Kind::null:
      case Kind::boolean:
      case Kind::number:
        break;
      case Kind::string:
        if (!in(n->ptr, n->count)) return false;
        break;
      case Kind::array:
        if (n->count && !in(n->ptr, uint64_t{n->count} * sizeof(DocNode))) return false;
        for (uint32_t i = 0; i < n->count; ++i) stack.push_back(&n->items()[i]);
        break;
      case Kind::object:
        if (n->count && !in(n->ptr, uint64_t{n->count} * sizeof(DocField))) return false;
        for (uint32_t i = 0; i < n->count; ++i) {
          if (!in(n->fields()[i].name, n->fields()[i].name_len)) return false;
          stack.push_back(&n->fields()[i].value);
        }
        break;
      default:
        return false;
    }
  }
  return true;
}

// Predicates ---------------------------------------------------------------------

namespace {

[[noreturn]] void bad(const std::string& why) { throw Error(Errc::malformed_predicate, why); }

std::vector<std::string_view> tokenize(std::string_view s) {
  std::vector<std::string_view> out;
  size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

double number(std::string_view t) {
  double v = 0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || p != t.data() + t.size() || !std::isfinite(v)) bad("not a number: " + std::string(t));
  return v;
}

std::vector<std::string> path(std::string_view t) {
  std::vector<std::string> out;
  size_t start = 0;
  for (size_t i = 0; i <= t.size(); ++i) {
    if (i == t.size() || t[i] == '.') {
      if (i == start) bad("empty path segment in " + std::string(t));
      out.emplace_back(t.substr(start, i - start));
      start = i + 1;
    } else if (!(std::isalnum(static_cast<unsigned char>(t[i])) || t[i] == '_')) {
      bad("bad character in path " + std::string(t));
    }
  }
  return out;
}

bool compare(double v, Op op, double x) {
  switch (op) {
    case Op::lt: return v < x;
    case Op::le: return v <= x;
    case Op::gt: return v > x;
    case Op::ge: return v >= x;
    case Op::eq: return v == x;
  }
  return false;
}

}  // namespace

Predicate Predicate::parse(std::string_view text) {
  auto t = tokenize(text);
  if (t.empty()) bad("empty predicate");
  Predicate p;
  size_t i = 0;
  auto need = [&](const char* what) {
    if (i >= t.size()) bad(std::string("expected ") + what);
    return t[i++];
  };
  while (true) {
    auto pth = path(need("a field path"));
    auto op = need("an operator");
    if (iequals(op, "between")) {
      double lo = number(need("a lower bound"));
      if (!iequals(need("'and'"), "and")) bad("expected 'and' in between");
      double hi = number(need("an upper bound"));
      if (lo > hi) bad("empty range");
      p.terms.push_back({pth, Op::ge, lo});
      p.terms.push_back({pth, Op::le, hi});
    } else {
      Op o;
      if (op == "<") o = Op::lt;
      else if (op == "<=") o = Op::le;
      else if (op == ">") o = Op::gt;
      else if (op == ">=") o = Op::ge;
      else if (op == "==") o = Op::eq;
      else bad("unknown operator " + std::string(op));
      p.terms.push_back({pth, o, number(need("a number"))});
    }
    if (i == t.size()) break;
    if (!iequals(t[i++], "and")) bad("expected 'and' between comparisons");
  }
  return p;
}

bool Predicate::matches(const DocNode* doc) const {
  for (const auto& c : terms) {
    const DocNode* n = doc;
    for (const auto& seg : c.path) {
      n = n ? n->get(seg) : nullptr;
      if (!n) return false;
    }
    if (n->kind != Kind::number || !compare(n->number, c.op, c.value)) return false;
  }
  return true;
}

bool Predicate::matches(const json& doc) const {
  for (const auto& c : terms) {
    const json* n = &doc;
    for (const auto& seg : c.path) {
      if (!n->is_object()) return false;
      auto it = n->find(seg);
      if (it == n->end()) return false;
      n = &*it;
    }
    if (!n->is_number() || !compare(n->get<double>(), c.op, c.value)) return false;
  }
  return true;
}

// Server -------------------------------------------------------------------------

namespace {

AddrRange allowed_range(const CallContext& ctx) { return ctx.sandboxed() ? ctx.scope() : ctx.heap().range(); }

std::string read_chars(const CallContext& ctx, uint64_t data, uint64_t len) {
  if (!allowed_range(ctx).contains(data, std::max<uint64_t>(len, 1)))
    throw Error(Errc::invalid_argument, "key outside the argument range");
  return std::string(reinterpret_cast<const char*>(data), len);
}

std::string read_key(const CallContext& ctx, const KeyRef* k) {
  if (!allowed_range(ctx).contains(reinterpret_cast<uintptr_t>(k), sizeof(KeyRef)))
    throw Error(Errc::invalid_argument, "key outside the argument range");
  return read_chars(ctx, k->data, k->len);
}

uint64_t heap_id_of(const CallContext& ctx) {
  MappedHeap* h = NodeRuntime::current().find_addr(ctx.heap().base());
  if (h == nullptr) throw Error(Errc::unmapped, "connection heap is not mapped");
  return h->desc.id;
}

}  // namespace

Server::Server(Channel& ch) {
  ch.register_handler(kPut, [this](CallContext& ctx) { put(ctx); });
  ch.register_handler(kGet, [this](CallContext& ctx) { get(ctx); });
  ch.register_handler(kSearch, [this](CallContext& ctx) { search(ctx); });
  ch.register_handler(kErase, [this](CallContext& ctx) { erase(ctx); });
  ch.register_handler(kCount, [this](CallContext& ctx) {
    ctx.after_sandbox([this, &ctx] {
      uint64_t id = heap_id_of(ctx);
      std::lock_guard lk(mu_);
      uint64_t n = 0;
      for (auto& [k, e] : docs_) n += e.heap_id == id;
      ctx.respond(0, n);
    });
  });
}

size_t Server::size() const {
  std::lock_guard lk(mu_);
  return docs_.size();
}

void Server::put(CallContext& ctx) {
  AddrRange allowed = allowed_range(ctx);
  auto* req = ctx.arg_as<PutRequest>();
  if (!allowed.contains(reinterpret_cast<uintptr_t>(req), sizeof(PutRequest)))
    throw Error(Errc::invalid_argument, "request outside the argument range");
  std::string key = read_chars(ctx, req->key, req->key_len);
  const auto* root = reinterpret_cast<const DocNode*>(req->root);
  // Walking the tree inside a sandbox faults on any stray reference.
  if (!within(root, allowed)) throw Error(Errc::invalid_argument, "document escapes the argument range");
  Entry e{root, req->key, req->key_len, 0, ctx.sandboxed() ? ctx.scope().start : 0, !ctx.sandboxed()};
  ctx.after_sandbox([this, &ctx, key, e]() mutable {
    e.heap_id = heap_id_of(ctx);
    std::lock_guard lk(mu_);
    auto [it, fresh] = docs_.try_emplace(key, e);
    if (!fresh) {
      Entry old = it->second;
      it->second = e;
      if (old.heap_id == e.heap_id) drop(ctx, old);
    }
    ctx.respond(0, fresh ? 1 : 0);
  });
}

void Server::drop(CallContext& ctx, const Entry& e) {
  if (e.heap_owned) {
    free_tree(ctx.heap(), const_cast<DocNode*>(e.root));
    ctx.heap().deallocate(reinterpret_cast<void*>(e.key_addr));
  } else if (e.scope_start != 0) {
    try {
      ctx.heap().scope_at(e.scope_start).destroy();
    } catch (const Error&) {
      // Still sealed or already gone; the client keeps it.
    }
  }
}

void Server::get(CallContext& ctx) {
  std::string key = read_key(ctx, ctx.arg_as<KeyRef>());
  ctx.after_sandbox([this, &ctx, key] {
    uint64_t id = heap_id_of(ctx);
    std::lock_guard lk(mu_);
    auto it = docs_.find(key);
    if (it == docs_.end() || it->second.heap_id != id) throw Error(Errc::missing_key, key);
    ctx.respond(0, it->second.root);
  });
}

void Server::erase(CallContext& ctx) {
  std::string key = read_key(ctx, ctx.arg_as<KeyRef>());
  ctx.after_sandbox([this, &ctx, key] {
    uint64_t id = heap_id_of(ctx);
    std::lock_guard lk(mu_);
    auto it = docs_.find(key);
    if (it == docs_.end() || it->second.heap_id != id) throw Error(Errc::missing_key, key);
    Entry old = it->second;
    docs_.erase(it);
    drop(ctx, old);
    ctx.respond(0, 1);
  });
}

void Server::search(CallContext& ctx) {
  Predicate p = Predicate::parse(read_key(ctx, ctx.arg_as<KeyRef>()));
  ctx.after_sandbox([this, &ctx, p] {
    uint64_t id = heap_id_of(ctx);
    std::vector<const Entry*> hits;
    std::lock_guard lk(mu_);
    for (auto& [k, e] : docs_)
      if (e.heap_id == id && p.matches(e.root)) hits.push_back(&e);
    auto* out = static_cast<SearchResult*>(ctx.heap().allocate(sizeof(uint64_t) + sizeof(KeyRef) * std::max<size_t>(hits.size(), 1)));
    out->count = hits.size();
    for (size_t i = 0; i < hits.size(); ++i) out->items[i] = KeyRef{hits[i]->key_addr, hits[i]->key_len};
    ctx.respond(0, out);
  });
}

// Client -------------------------------------------------------------------------

namespace {

void check(const Response& r) {
  if (r.ok()) return;
  if (auto e = r.error()) throw Error(*e, "cooldb call failed");
  throw Error(Errc::handler_failed, "cooldb status " + std::to_string(r.status));
}

}  // namespace

Response Client::invoke(uint32_t fid, Scope* scope, const void* arg) {
  if (scope) return conn_.call(fid, *scope, arg, kFlagSealed | kFlagSandbox);
  return conn_.call(fid, arg);
}

void Client::put(const std::string& key, const json& doc) {
  if (secure_) {
    // The scope is handed over with the document and never reused.
    Scope s = conn_.heap().create_scope(scope_bytes(doc) + key.size() + 256);
    Allocator a(s);
    DocNode* root = build(a, doc);
    auto* req = s.make<PutRequest>();
    req->key = reinterpret_cast<uint64_t>(s.copy_in(key.data(), std::max<size_t>(key.size(), 1), 1));
    req->key_len = key.size();
    req->root = reinterpret_cast<uint64_t>(root);
    check(invoke(kPut, &s, req));
    return;
  }
  Heap& h = conn_.heap();
  Allocator a(h);
  DocNode* root = build(a, doc);
  auto* req = h.make<PutRequest>();
  auto* chars = static_cast<char*>(h.allocate(std::max<size_t>(key.size(), 1)));
  std::memcpy(chars, key.data(), key.size());
  *req = PutRequest{reinterpret_cast<uint64_t>(chars), key.size(), reinterpret_cast<uint64_t>(root)};
  Response r = invoke(kPut, nullptr, req);
  h.deallocate(req);
  if (!r.ok()) {
    free_tree(h, root);
    h.deallocate(chars);
  }
  check(r);
}

namespace {

template <class F>
Response with_key(Connection& c, bool secure, const std::string& text, F&& send) {
  if (secure) {
    Scope s = c.heap().create_scope(text.size() + 256);
    auto* k = s.make<KeyRef>();
    k->data = reinterpret_cast<uint64_t>(s.copy_in(text.data(), std::max<size_t>(text.size(), 1), 1));
    k->len = text.size();
    Response r = send(&s, k);
    if (s.state() != ScopeState::sealed) s.destroy();
    return r;
  }
  Heap& h = c.heap();
  auto* k = h.make<KeyRef>();
  auto* chars = static_cast<char*>(h.allocate(std::max<size_t>(text.size(), 1)));
  std::memcpy(chars, text.data(), text.size());
  *k = KeyRef{reinterpret_cast<uint64_t>(chars), text.size()};
  Response r = send(nullptr, k);
  h.deallocate(chars);
  h.deallocate(k);
  return r;
}

}  // namespace

const DocNode* Client::get(const std::string& key) {
  Response r = with_key(conn_, secure_, key, [&](Scope* s, KeyRef* k) { return invoke(kGet, s, k); });
  check(r);
  return r.as<DocNode>();
}

bool Client::erase(const std::string& key) {
  Response r = with_key(conn_, secure_, key, [&](Scope* s, KeyRef* k) { return invoke(kErase, s, k); });
  if (r.error() == Errc::missing_key) return false;
  check(r);
  return true;
}

std::vector<std::string> Client::search(const std::string& predicate) {
  Response r = with_key(conn_, secure_, predicate, [&](Scope* s, KeyRef* k) { return invoke(kSearch, s, k); });
  check(r);
  auto* res = r.as<SearchResult>();
  std::vector<std::string> out;
  out.reserve(res->count);
  for (uint64_t i = 0; i < res->count; ++i)
    out.emplace_back(reinterpret_cast<const char*>(res->items[i].data), res->items[i].len);
  conn_.heap().deallocate(res);
  return out;
}

uint64_t Client::count() {
  Response r = conn_.call(kCount);
  check(r);
  return r.ret;
}

// Generators ---------------------------------------------------------------------

namespace {

uint64_t splitmix(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::string random_word(std::mt19937_64& rng, size_t len) {
  static constexpr char kAlpha[] = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  std::string s(len, ' ');
  for (auto& c : s) c = kAlpha[rng() % (sizeof kAlpha - 1)];
  return s;
}

}  // namespace

std::string nobench_key(uint64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "doc-%08llu", static_cast<unsigned long long>(i));
  return buf;
}

json nobench_doc(uint64_t i, uint64_t n, uint64_t seed) {
  std::mt19937_64 rng(splitmix(seed ^ splitmix(i)));
  if (n == 0) n = 1;
  json d;
  d["str1"] = "s1-" + std::to_string(i);
  d["str2"] = random_word(rng, 12);
  d["num"] = rng() % n;
  d["bool"] = i % 2 == 0;
  if (i % 3 == 0) d["dyn1"] = random_word(rng, 8);
  else d["dyn1"] = rng() % n;
  switch (i % 4) {
    case 0: d["dyn2"] = rng() % n; break;
    case 1: d["dyn2"] = random_word(rng, 6); break;
    case 2: d["dyn2"] = (rng() & 1) != 0; break;
    default: d["dyn2"] = json::array({rng() % n, random_word(rng, 4)}); break;
  }
  d["nested_obj"] = {{"str", random_word(rng, 10)}, {"num", rng() % n}};
  json arr = json::array();
  for (uint64_t k = 0, m = rng() % 7; k < m; ++k) arr.push_back(random_word(rng, 5));
  d["nested_arr"] = arr;
  const uint64_t group = (i / 10) % 100;
  for (int k = 0; k < 10; ++k) {
    char name[16];
    std::snprintf(name, sizeof name, "sparse_%03llu", static_cast<unsigned long long>(group * 10 + k));
    d[name] = random_word(rng, 6);
  }
  d["thousandth"] = i % 1000;
  return d;
}

std::vector<std::string> nobench_queries(size_t count, uint64_t n, uint64_t seed) {
  std::mt19937_64 rng(splitmix(seed + 0x51ED));
  static const char* kFields[] = {"num", "nested_obj.num", "dyn1", "thousandth"};
  std::vector<std::string> out;
  if (n == 0) n = 1;
  for (size_t q = 0; q < count; ++q) {
    const char* f = kFields[rng() % 4];
    const uint64_t span = std::string_view(f) == "thousandth" ? 1000 : n;
    const uint64_t width = std::max<uint64_t>(1, span / 1000 * (1 + rng() % 5));
    const uint64_t lo = rng() % span;
    if (q % 2 == 0)
      out.push_back(std::string(f) + " between " + std::to_string(lo) + " and " + std::to_string(lo + width));
    else
      out.push_back(std::string(f) + " >= " + std::to_string(lo) + " and " + f + " < " + std::to_string(lo + width));
  }
  return out;
}

// YCSB ---------------------------------------------------------------------------

Workload parse_workload(std::string_view s) {
  if (s == "A" || s == "a") return Workload::A;
  if (s == "B" || s == "b") return Workload::B;
  if (s == "C" || s == "c") return Workload::C;
  if (s == "D" || s == "d") return Workload::D;
  throw Error(Errc::invalid_argument, "workload must be one of A, B, C, D");
}

namespace {

class Zipfian {
 public:
  Zipfian(uint64_t n, double theta = 0.99) : n_(std::max<uint64_t>(n, 1)), theta_(theta) {
    for (uint64_t i = 1; i <= n_; ++i) zetan_ += 1.0 / std::pow(static_cast<double>(i), theta_);
    const double zeta2 = 1.0 + 1.0 / std::pow(2.0, theta_);
    alpha_ = 1.0 / (1.0 - theta_);
    eta_ = (1.0 - std::pow(2.0 / static_cast<double>(n_), 1.0 - theta_)) / (1.0 - zeta2 / zetan_);
  }
  uint64_t next(std::mt19937_64& rng) {
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double uz = u * zetan_;
    if (uz < 1.0) return 0;
    if (uz < 1.0 + std::pow(0.5, theta_)) return 1;
    auto r = static_cast<uint64_t>(static_cast<double>(n_) * std::pow(eta_ * u - eta_ + 1.0, alpha_));
    return std::min(r, n_ - 1);
  }

 private:
  uint64_t n_;
  double theta_;
  double zetan_ = 0;
  double alpha_ = 0;
  double eta_ = 0;
};

}  // namespace

std::vector<YcsbOp> ycsb_ops(Workload w, uint64_t records, uint64_t ops, uint64_t seed) {
  std::mt19937_64 rng(splitmix(seed));
  Zipfian zipf(records);
  std::vector<YcsbOp> out;
  out.reserve(ops);
  uint64_t inserted = records;
  for (uint64_t i = 0; i < ops; ++i) {
    const uint64_t roll = rng() % 100;
    if (w == Workload::D) {
      if (roll < 5) {
        out.push_back({YcsbOpKind::insert, inserted++});
      } else {
        uint64_t back = zipf.next(rng);
        out.push_back({YcsbOpKind::read, back < inserted ? inserted - 1 - back : 0});
      }
      continue;
    }
    // Scatter popular ranks over the key space.
    const uint64_t key = splitmix(zipf.next(rng)) % std::max<uint64_t>(records, 1);
    const uint64_t update_pct = w == Workload::A ? 50 : w == Workload::B ? 5 : 0;
    out.push_back({roll < update_pct ? YcsbOpKind::update : YcsbOpKind::read, key});
  }
  return out;
}

json ycsb_record(uint64_t key, uint64_t seed) {
  std::mt19937_64 rng(splitmix(seed ^ splitmix(key + 1)));
  json r;
  for (int f = 0; f < 10; ++f) r["field" + std::to_string(f)] = random_word(rng, 100);
  return r;
}

YcsbResult run_ycsb(Client& c, Workload w, uint64_t records, uint64_t ops, uint64_t seed) {
  for (uint64_t k = 0; k < records; ++k) c.put("user" + std::to_string(k), ycsb_record(k, seed));
  auto stream = ycsb_ops(w, records, ops, seed);
  YcsbResult res;
  auto t0 = std::chrono::steady_clock::now();
  uint64_t version = 1;
  for (const auto& op : stream) {
    const std::string key = "user" + std::to_string(op.key);
    switch (op.kind) {
      case YcsbOpKind::read:
        try {
          c.get(key);
          ++res.reads;
        } catch (const Error& e) {
          if (e.code() != Errc::missing_key) throw;
          ++res.misses;
        }
        break;
      case YcsbOpKind::update:
        c.put(key, ycsb_record(op.key, seed + version++));
        ++res.updates;
        break;
      case YcsbOpKind::insert:
        c.put(key, ycsb_record(op.key, seed));
        ++res.inserts;
        break;
    }
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace rpcool::cooldb
