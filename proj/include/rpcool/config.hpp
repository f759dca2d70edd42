#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace rpcool {

using Nanos = std::chrono::nanoseconds;
using Micros = std::chrono::microseconds;

inline constexpr uint64_t KiB = 1024;
inline constexpr uint64_t MiB = 1024 * KiB;
inline constexpr uint64_t GiB = 1024 * MiB;
inline constexpr uint64_t TiB = 1024 * GiB;

inline constexpr std::string_view kDefaultOrchestratorEndpoint = "127.0.0.1:7470";
inline constexpr std::string_view kDefaultPoolDir = "/dev/shm/rpcool";

/// Host page size (sysconf), cached.
uint64_t host_page_size() noexcept;

inline constexpr uint64_t round_up(uint64_t v, uint64_t to) { return (v + to - 1) / to * to; }

/// Settings of the global orchestrator.
struct OrchestratorConfig {
  uint64_t pool_base = 0x7C00'0000'0000ULL;
  uint64_t pool_span = 1 * TiB;
  uint64_t page_size = 4096;
  uint64_t default_quota = 256 * MiB;
  /// Holders renew once per interval; a lease lapses after `missed_renewals`
  /// intervals without renewal.
  Nanos renew_interval = std::chrono::seconds(1);
  uint32_t missed_renewals = 3;
  /// Per-node quota overrides ("quota.node.<id>") and per-process overrides
  /// ("quota.node.<id>.pid.<pid>").
  std::map<uint32_t, uint64_t> node_quota;
  std::map<std::pair<uint32_t, uint32_t>, uint64_t> process_quota;
  std::string journal_path;
  /// When set, backing files of reclaimed heaps are removed from this directory.
  std::string pool_dir;

  Nanos lease_term() const { return renew_interval * missed_renewals; }

  /// Parses an admin config file. Unknown keys are rejected.
  static OrchestratorConfig from_file(const std::string& path);
  static OrchestratorConfig from_string(std::string_view text);
};

/// Busy-wait thresholds and sleeps applied between poll bursts.
struct BusyWaitConfig {
  double low_load = 0.25;
  double high_load = 0.50;
  Micros sleep_low{0};
  Micros sleep_mid{5};
  Micros sleep_high{150};
  /// Length of one polling burst before the policy sleep is consulted.
  Micros burst{50};
};

enum class SandboxModeRequest { automatic, hardware, portable };

/// Settings of the per-node trusted runtime.
struct RuntimeConfig {
  uint32_t node_id = 1;
  std::string orchestrator = std::string(kDefaultOrchestratorEndpoint);
  std::string pool_dir = std::string(kDefaultPoolDir);
  /// False models a peer outside the shared-memory domain; channels then use
  /// the fallback transport.
  bool pool_access = true;
  uint64_t page_size = host_page_size();
  uint32_t protection_keys_total = 16;
  uint32_t protection_keys_reserved = 2;
  uint32_t protection_keys_cached = 14;
  uint32_t batch_release_threshold = 1024;
  uint32_t seal_ring_capacity = 4096;
  BusyWaitConfig busy_wait;
  Nanos renew_interval = std::chrono::seconds(1);
  SandboxModeRequest sandbox_mode = SandboxModeRequest::automatic;
  std::string fallback_listen;  // empty: ephemeral port on 127.0.0.1

  /// Applies RPCOOL_ORCH, RPCOOL_POOL_DIR, RPCOOL_SANDBOX_MODE and
  /// RPCOOL_FALLBACK_LISTEN on top of the defaults.
  static RuntimeConfig from_env();
  /// Throws Errc::config_error when a value is out of range.
  void validate() const;
};

/// Parses sizes such as "4096", "64KiB", "256MiB", "1TiB", "0x7C0000000000".
std::optional<uint64_t> parse_size(std::string_view text);

std::optional<std::string> env(const char* name);

}  // namespace rpcool
