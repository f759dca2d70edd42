#pragma once

// Document store whose documents live in shared memory. Clients build a
// document tree in the connection heap and hand the server a reference; the
// server takes ownership and later returns references, never copies.
//
// DocNode (24 bytes): u32 kind, u32 count, f64 number, u64 pointer
//   kind 0 null, 1 boolean (number is 0 or 1), 2 number,
//   3 string (pointer -> count bytes), 4 array (pointer -> DocNode[count]),
//   5 object (pointer -> DocField[count])
// DocField (40 bytes): u64 name pointer, u32 name length, u32 pad, DocNode

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rpcool/heap.hpp"
#include "rpcool/rpc.hpp"

namespace rpcool::cooldb {

using json = nlohmann::json;

enum class Kind : uint32_t { null = 0, boolean = 1, number = 2, string = 3, array = 4, object = 5 };

struct DocField;

struct DocNode {
  Kind kind;
  uint32_t count;
  double number;
  uint64_t ptr;

  std::string_view str() const { return {reinterpret_cast<const char*>(ptr), count}; }
  const DocNode* items() const { return reinterpret_cast<const DocNode*>(ptr); }
  const DocField* fields() const { return reinterpret_cast<const DocField*>(ptr); }
  /// Object member by name, or null.
  const DocNode* get(std::string_view name) const;
};
static_assert(sizeof(DocNode) == 24);

struct DocField {
  uint64_t name;
  uint32_t name_len;
  uint32_t pad;
  DocNode value;

  std::string_view key() const { return {reinterpret_cast<const char*>(name), name_len}; }
};
static_assert(sizeof(DocField) == 40);

/// Allocation target for document trees: a heap or a scope.
class Allocator {
 public:
  explicit Allocator(Heap& h) : heap_(&h) {}
  explicit Allocator(Scope& s) : scope_(&s) {}
  void* allocate(size_t n, size_t align = 8) { return heap_ ? heap_->allocate(n, align < 16 ? 16 : align) : scope_->allocate(n, align); }

 private:
  Heap* heap_ = nullptr;
  Scope* scope_ = nullptr;
};

/// Builds a tree for `j`; the root node is a separate allocation.
DocNode* build(Allocator a, const json& j);
json to_json(const DocNode* n);
/// Releases a tree built with a heap allocator.
void free_tree(Heap& h, DocNode* root);
/// True if every byte of the tree lies in `r`; depth and size are bounded.
bool within(const DocNode* root, AddrRange r, uint64_t max_nodes = 1u << 22);

// Predicates ---------------------------------------------------------------------

enum class Op { lt, le, gt, ge, eq };

struct Comparison {
  std::vector<std::string> path;  // dotted path split into members
  Op op;
  double value;
};

/// Conjunction of numeric comparisons, e.g.
///   "num >= 100 and num < 200", "nested_obj.num between 5 and 9".
struct Predicate {
  std::vector<Comparison> terms;

  static Predicate parse(std::string_view text);  // Errc::malformed_predicate
  bool matches(const DocNode* doc) const;
  bool matches(const json& doc) const;
};

// Wire structures in the heap ---------------------------------------------------

struct PutRequest {
  uint64_t key;  // chars
  uint64_t key_len;
  uint64_t root;  // DocNode*
};

struct KeyRef {
  uint64_t data;
  uint64_t len;
};

struct SearchResult {
  uint64_t count;
  KeyRef items[1];  // `count` entries follow
};

inline constexpr uint32_t kPut = function_id("cooldb.put");
inline constexpr uint32_t kGet = function_id("cooldb.get");
inline constexpr uint32_t kSearch = function_id("cooldb.search");
inline constexpr uint32_t kErase = function_id("cooldb.erase");
inline constexpr uint32_t kCount = function_id("cooldb.count");

/// Registers the store's handlers on `ch` (before ch.start()).
class Server {
 public:
  explicit Server(Channel& ch);
  size_t size() const;

 private:
  struct Entry {
    const DocNode* root;
    uint64_t key_addr;
    uint64_t key_len;
    uint64_t heap_id;      // heap that holds the tree
    uint64_t scope_start;  // scope handed over with the tree, or 0
    bool heap_owned;       // allocated block by block (freeable)
  };
  static void drop(CallContext& ctx, const Entry& e);
  void put(CallContext& ctx);
  void get(CallContext& ctx);
  void search(CallContext& ctx);
  void erase(CallContext& ctx);

  mutable std::mutex mu_;
  std::map<std::string, Entry, std::less<>> docs_;
};

class Client {
 public:
  /// `secure` seals and sandboxes every call (arguments built in scopes).
  explicit Client(Connection& c, bool secure = false) : conn_(c), secure_(secure) {}

  void put(const std::string& key, const json& doc);
  /// Reference into shared memory owned by the server.
  const DocNode* get(const std::string& key);
  std::vector<std::string> search(const std::string& predicate);
  bool erase(const std::string& key);
  uint64_t count();

 private:
  Response invoke(uint32_t fid, Scope* scope, const void* arg);
  Connection& conn_;
  bool secure_;
};

// Generators ---------------------------------------------------------------------

/// NoBench-style synthetic document `i` of `n`, deterministic in (seed, i).
json nobench_doc(uint64_t i, uint64_t n, uint64_t seed);
std::string nobench_key(uint64_t i);
/// Random numeric-range queries over the generated documents' numeric fields.
std::vector<std::string> nobench_queries(size_t count, uint64_t n, uint64_t seed);

enum class Workload { A, B, C, D };
Workload parse_workload(std::string_view s);

enum class YcsbOpKind { read, update, insert };
struct YcsbOp {
  YcsbOpKind kind;
  uint64_t key;
};

/// Operation stream: A 50/50 read/update, B 95/5 read/update, C read only,
/// D 95/5 read/insert with reads skewed to recent inserts. Keys of A-C follow
/// a Zipfian distribution (theta 0.99).
std::vector<YcsbOp> ycsb_ops(Workload w, uint64_t records, uint64_t ops, uint64_t seed);
json ycsb_record(uint64_t key, uint64_t seed);

struct YcsbResult {
  uint64_t reads = 0;
  uint64_t updates = 0;
  uint64_t inserts = 0;
  uint64_t misses = 0;
  double seconds = 0;
};
YcsbResult run_ycsb(Client& c, Workload w, uint64_t records, uint64_t ops, uint64_t seed);

}  // namespace rpcool::cooldb
