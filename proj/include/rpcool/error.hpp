#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace rpcool {

/// Error codes shared by every module. The numeric values travel on the
/// orchestrator wire as the u16 reply status, so never renumber them.
enum class Errc : uint16_t {
  ok = 0,
  invalid_argument = 1,
  duplicate_name = 2,
  malformed_name = 3,
  quota_exceeded = 4,
  pool_exhausted = 5,
  unknown_channel = 6,
  unknown_heap = 7,
  unknown_lease = 8,
  lease_expired = 9,
  acl_denied = 10,
  protocol_error = 11,
  orchestrator_unreachable = 12,

  address_in_use = 20,
  unmapped = 21,
  out_of_bounds = 22,
  empty_range = 23,
  active_seals = 24,
  not_page_aligned = 25,

  out_of_space = 30,
  invalid_align = 31,
  foreign_address = 32,
  double_free = 33,
  scope_sealed = 34,
  scope_destroyed = 35,
  scope_exhausted = 36,
  corrupt_heap = 37,

  ring_full = 40,
  overlapping_seal = 41,
  not_complete = 42,
  wrong_state = 43,
  wrong_role = 44,
  seal_unverified = 45,

  nested_sandbox = 50,
  range_outside_heaps = 51,
  foreign_sandbox = 52,
  sandbox_ended = 53,
  sandbox_unavailable = 54,
  sandbox_violation = 55,

  duplicate_handler = 60,
  already_responded = 61,
  transport_down = 62,
  descriptor_mismatch = 63,
  connection_refused = 64,
  timeout = 65,
  unknown_function = 66,
  handler_failed = 67,

  unregistered_layout = 70,
  escaping_reference = 71,

  missing_key = 80,
  malformed_predicate = 81,
  empty_report = 82,
  unwritable_path = 83,
  config_error = 84,
  bench_failed = 85,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  explicit Error(Errc code) : std::runtime_error(std::string(to_string(code))), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Throws Error(code, what) built from errno.
[[noreturn]] void throw_errno(Errc code, const std::string& what);

}  // namespace rpcool
