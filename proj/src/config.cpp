#include "rpcool/config.hpp"

#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

#include "rpcool/error.hpp"

namespace rpcool {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::ok: return "ok";
    case Errc::invalid_argument: return "invalid argument";
    case Errc::duplicate_name: return "duplicate name";
    case Errc::malformed_name: return "malformed name";
    case Errc::quota_exceeded: return "quota exceeded";
    case Errc::pool_exhausted: return "pool exhausted";
    case Errc::unknown_channel: return "unknown channel";
    case Errc::unknown_heap: return "unknown heap";
    case Errc::unknown_lease: return "unknown lease";
    case Errc::lease_expired: return "lease expired";
    case Errc::acl_denied: return "acl denied";
    case Errc::protocol_error: return "protocol error";
    case Errc::orchestrator_unreachable: return "orchestrator unreachable";
    case Errc::address_in_use: return "address in use";
    case Errc::unmapped: return "unmapped";
    case Errc::out_of_bounds: return "out of bounds";
    case Errc::empty_range: return "empty range";
    case Errc::active_seals: return "active seals";
    case Errc::not_page_aligned: return "not page aligned";
    case Errc::out_of_space: return "out of space";
    case Errc::invalid_align: return "invalid alignment";
    case Errc::foreign_address: return "foreign address";
    case Errc::double_free: return "double free";
    case Errc::scope_sealed: return "scope sealed";
    case Errc::scope_destroyed: return "scope destroyed";
    case Errc::scope_exhausted: return "scope exhausted";
    case Errc::corrupt_heap: return "corrupt heap";
    case Errc::ring_full: return "ring full";
    case Errc::overlapping_seal: return "overlapping seal";
    case Errc::not_complete: return "rpc not complete";
    case Errc::wrong_state: return "wrong state";
    case Errc::wrong_role: return "wrong role";
    case Errc::seal_unverified: return "seal verification failed";
    case Errc::nested_sandbox: return "nested sandbox";
    case Errc::range_outside_heaps: return "range outside heaps";
    case Errc::foreign_sandbox: return "sandbox owned by another thread";
    case Errc::sandbox_ended: return "sandbox already ended";
    case Errc::sandbox_unavailable: return "sandbox unavailable";
    case Errc::sandbox_violation: return "sandbox violation";
    case Errc::duplicate_handler: return "duplicate handler";
    case Errc::already_responded: return "already responded";
    case Errc::transport_down: return "transport down";
    case Errc::descriptor_mismatch: return "descriptor mismatch";
    case Errc::connection_refused: return "connection refused";
    case Errc::timeout: return "timeout";
    case Errc::unknown_function: return "unknown function";
    case Errc::handler_failed: return "handler failed";
    case Errc::unregistered_layout: return "unregistered layout";
    case Errc::escaping_reference: return "escaping reference";
    case Errc::missing_key: return "missing key";
    case Errc::malformed_predicate: return "malformed predicate";
    case Errc::empty_report: return "empty report";
    case Errc::unwritable_path: return "unwritable path";
    case Errc::config_error: return "config error";
    case Errc::bench_failed: return "benchmark failed";
  }
  return "unknown error";
}

void throw_errno(Errc code, const std::string& what) {
  throw Error(code, what + ": " + std::strerror(errno));
}

uint64_t host_page_size() noexcept {
  static const uint64_t size = static_cast<uint64_t>(::sysconf(_SC_PAGESIZE));
  return size;
}

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr || *v == '\0') return std::nullopt;
  return std::string(v);
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::optional<uint32_t> parse_u32(std::string_view s) {
  uint32_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<Nanos> parse_duration(std::string_view s) {
  struct Unit {
    std::string_view suffix;
    int64_t ns;
  };
  static constexpr Unit units[] = {{"ns", 1}, {"us", 1000}, {"ms", 1'000'000}, {"s", 1'000'000'000}};
  for (const auto& u : units) {
    if (s.size() > u.suffix.size() && s.ends_with(u.suffix)) {
      auto num = s.substr(0, s.size() - u.suffix.size());
      // "ms" also ends with "s": reject a trailing letter in the number part.
      if (!num.empty() && (num.back() < '0' || num.back() > '9')) continue;
      int64_t v = 0;
      auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), v);
      if (ec != std::errc{} || p != num.data() + num.size() || v <= 0) return std::nullopt;
      return Nanos(v * u.ns);
    }
  }
  return std::nullopt;
}

std::string unquote(std::string_view v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return std::string(v.substr(1, v.size() - 2));
  return std::string(v);
}

}  // namespace

std::optional<uint64_t> parse_size(std::string_view text) {
  text = trim(text);
  if (text.empty()) return std::nullopt;
  if (text.starts_with("0x") || text.starts_with("0X")) {
    std::string digits;
    for (char c : text.substr(2))
      if (c != '_') digits.push_back(c);
    uint64_t v = 0;
    auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v, 16);
    if (ec != std::errc{} || p != digits.data() + digits.size()) return std::nullopt;
    return v;
  }
  size_t i = 0;
  while (i < text.size() && text[i] >= '0' && text[i] <= '9') ++i;
  if (i == 0) return std::nullopt;
  uint64_t v = 0;
  std::from_chars(text.data(), text.data() + i, v);
  auto suffix = trim(text.substr(i));
  uint64_t mult = 1;
  if (suffix.empty() || suffix == "B") mult = 1;
  else if (suffix == "KiB" || suffix == "K") mult = KiB;
  else if (suffix == "MiB" || suffix == "M") mult = MiB;
  else if (suffix == "GiB" || suffix == "G") mult = GiB;
  else if (suffix == "TiB" || suffix == "T") mult = TiB;
  else return std::nullopt;
  return v * mult;
}

OrchestratorConfig OrchestratorConfig::from_string(std::string_view text) {
  OrchestratorConfig cfg;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw Error(Errc::config_error, "line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string_view::npos) fail("expected key = value");
    std::string key(trim(line.substr(0, eq)));
    std::string value = unquote(trim(line.substr(eq + 1)));
    if (!section.empty()) key = section + "." + key;

    auto need_size = [&]() {
      auto v = parse_size(value);
      if (!v) fail("bad size for " + key);
      return *v;
    };
    if (key == "pool.base") cfg.pool_base = need_size();
    else if (key == "pool.span") cfg.pool_span = need_size();
    else if (key == "pool.page_size") cfg.page_size = need_size();
    else if (key == "quota.default") cfg.default_quota = need_size();
    else if (key == "lease.renew_interval") {
      auto d = parse_duration(value);
      if (!d) fail("bad duration for " + key);
      cfg.renew_interval = *d;
    } else if (key == "lease.missed_renewals") {
      auto n = parse_u32(value);
      if (!n || *n == 0) fail("bad count for " + key);
      cfg.missed_renewals = *n;
    } else if (key == "journal.path") {
      cfg.journal_path = value;
    } else if (key == "pool.dir") {
      cfg.pool_dir = value;
    } else if (key.starts_with("quota.node.")) {
      // quota.node.<node> or quota.node.<node>.pid.<pid>
      std::string_view rest = std::string_view(key).substr(std::strlen("quota.node."));
      auto dot = rest.find(".pid.");
      if (dot == std::string_view::npos) {
        auto node = parse_u32(rest);
        if (!node) fail("bad node id in " + key);
        cfg.node_quota[*node] = need_size();
      } else {
        auto node = parse_u32(rest.substr(0, dot));
        auto pid = parse_u32(rest.substr(dot + 5));
        if (!node || !pid) fail("bad holder in " + key);
        cfg.process_quota[{*node, *pid}] = need_size();
      }
    } else {
      fail("unknown key " + key);
    }
  }
  if (cfg.page_size == 0 || (cfg.page_size & (cfg.page_size - 1)) != 0) fail("page size must be a power of two");
  if (cfg.pool_base % cfg.page_size != 0 || cfg.pool_span % cfg.page_size != 0 || cfg.pool_span == 0)
    fail("pool range must be page aligned and non-empty");
  return cfg;
}

OrchestratorConfig OrchestratorConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::config_error, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str());
}

RuntimeConfig RuntimeConfig::from_env() {
  RuntimeConfig cfg;
  if (auto v = env("RPCOOL_ORCH")) cfg.orchestrator = *v;
  if (auto v = env("RPCOOL_POOL_DIR")) cfg.pool_dir = *v;
  if (auto v = env("RPCOOL_FALLBACK_LISTEN")) cfg.fallback_listen = *v;
  if (auto v = env("RPCOOL_SANDBOX_MODE")) {
    if (*v == "hardware") cfg.sandbox_mode = SandboxModeRequest::hardware;
    else if (*v == "portable") cfg.sandbox_mode = SandboxModeRequest::portable;
    else if (*v == "auto") cfg.sandbox_mode = SandboxModeRequest::automatic;
    else throw Error(Errc::config_error, "RPCOOL_SANDBOX_MODE must be hardware, portable or auto");
  }
  return cfg;
}

void RuntimeConfig::validate() const {
  auto bad = [](const char* what) { throw Error(Errc::config_error, what); };
  if (page_size == 0 || (page_size & (page_size - 1)) != 0) bad("page size must be a power of two");
  if (protection_keys_total == 0 || protection_keys_reserved == 0 || protection_keys_cached == 0)
    bad("protection key budget must be positive");
  if (protection_keys_reserved + protection_keys_cached > protection_keys_total) bad("protection key budget overcommitted");
  if (batch_release_threshold == 0) bad("batch release threshold must be positive");
  if (seal_ring_capacity == 0) bad("seal ring capacity must be positive");
  if (!(busy_wait.low_load > 0 && busy_wait.low_load < busy_wait.high_load && busy_wait.high_load < 1))
    bad("busy-wait thresholds must satisfy 0 < low < high < 1");
  if (busy_wait.sleep_low > busy_wait.sleep_mid || busy_wait.sleep_mid > busy_wait.sleep_high)
    bad("busy-wait sleeps must be ordered");
  if (renew_interval.count() <= 0) bad("renew interval must be positive");
}

}  // namespace rpcool
