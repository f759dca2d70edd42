#pragma once

// Benchmark harness: latency rows, report emission and the built-in suites.
//
// Latency is measured with the monotonic clock around each operation. The
// first 10% of the requested operations are run as warmup and discarded, so a
// row of n samples costs about 1.1 n operations.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rpcool/cooldb.hpp"
#include "rpcool/rpc.hpp"

namespace rpcool::bench {

using json = nlohmann::json;

struct Row {
  std::string name;
  double mean_us = 0;
  double p50_us = 0;
  double p99_us = 0;
  double throughput = 0;  // operations per second, 0 when not applicable
  std::string transport;  // "shm", "fallback" or "local"
  std::string flags;      // "plain", "secure", ...
  uint64_t samples = 0;
};

/// Summarizes per-operation latencies (microseconds). `wall_seconds` > 0
/// fills the throughput column.
Row summarize(std::string name, const std::vector<double>& samples_us, std::string transport, std::string flags,
              double wall_seconds = 0);

struct Report {
  std::vector<Row> rows;
  std::map<std::string, std::string> metadata;

  const Row* find(std::string_view name, std::string_view transport = {}, std::string_view flags = {}) const;
  void append(const Report& other);
};

/// Host, kernel, CPU count, page size and sandbox mode.
std::map<std::string, std::string> host_metadata();

json to_json(const Report& r);
Report report_from_json(const json& j);

enum class Format { csv, markdown };
Format parse_format(std::string_view s);  // "csv", "md" or "markdown"

/// Columns: name, mean_us, p50_us, p99_us, throughput_ops, transport, flags,
/// samples. One line per row after the header; no metadata.
std::string render_csv(const Report& r);
/// Table in the same column order, followed by a metadata list.
std::string render_markdown(const Report& r);
/// Errc::empty_report when there are no rows (unless allowed),
/// Errc::unwritable_path when the file cannot be written.
void emit(const Report& r, Format f, const std::string& path, bool allow_empty = false);

struct SuiteOptions {
  /// Measured operations per row (after warmup).
  uint64_t samples = 100000;
  /// Rows with fewer samples are rejected (Errc::invalid_argument).
  uint64_t min_samples = 100000;
  uint64_t seed = 1;
};

struct NoopOptions : SuiteOptions {
  Transport transport = Transport::shared_memory;
  bool secure = false;
  /// Client threads sharing the connection; each issues one call at a time.
  uint32_t clients = 1;
};

/// No-op RPC round trips. The harness serves the channel in this process and
/// measures from a forked client process. samples == 0 yields an empty report.
Report bench_noop(const NoopOptions& o);

/// One row per operation: cached sandbox enter+exit (1 / 1024 pages),
/// uncached sandbox setup+enter+exit, seal+release standard and batched
/// (1 / 1024 pages), byte copy (1 / 1024 pages).
Report bench_micro(const SuiteOptions& o);

struct CoolDbOptions {
  uint64_t docs = 10000;
  uint64_t queries = 1000;
  bool secure = false;
  uint64_t seed = 1;
  /// YCSB mixes to run after the document suite (records = docs).
  std::vector<cooldb::Workload> ycsb;
  uint64_t ycsb_ops = 100000;
};

/// Loads generated documents, then times gets and predicate searches.
Report bench_cooldb(const CoolDbOptions& o);

struct SecurityResult {
  uint64_t attempts = 0;
  uint64_t violations = 0;  // answered with sandbox_violation
  uint64_t leaks = 0;       // responses carrying secret bytes
  uint64_t other = 0;       // any other outcome
  bool benign_ok = false;   // a well-formed call succeeded afterwards
  double seconds = 0;
};

/// Hostile-client storm: sealed, sandboxed calls whose argument points at a
/// sentinel-filled private page, at heap pages outside the scope and at
/// unmapped pool addresses; then one benign call.
SecurityResult bench_security(uint64_t hostile_calls, uint64_t seed = 1);

// Row names of the micro suite.
inline constexpr std::string_view kSandboxCached1 = "sandbox enter+exit (cached, 1 page)";
inline constexpr std::string_view kSandboxCached1024 = "sandbox enter+exit (cached, 1024 pages)";
inline constexpr std::string_view kSandboxUncached = "sandbox setup+enter+exit (uncached)";
inline constexpr std::string_view kSealStandard1 = "seal+release (standard, 1 page)";
inline constexpr std::string_view kSealStandard1024 = "seal+release (standard, 1024 pages)";
inline constexpr std::string_view kSealBatch1 = "seal+release (batch, 1 page)";
inline constexpr std::string_view kSealBatch1024 = "seal+release (batch, 1024 pages)";
inline constexpr std::string_view kCopy1 = "copy (1 page)";
inline constexpr std::string_view kCopy1024 = "copy (1024 pages)";
inline constexpr std::string_view kNoop = "noop rpc";

}  // namespace rpcool::bench
