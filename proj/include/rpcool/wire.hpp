#pragma once

// Little-endian field codec and length-prefixed framing shared by the
// orchestrator protocol and the fallback transport.
//
// Orchestrator frame:  u32 length | u16 type | payload
// Fallback frame:      u32 length | u8 type  | payload
// In both, `length` counts the bytes after the length field (type + payload).

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rpcool/error.hpp"

namespace rpcool::wire {

class Writer {
 public:
  Writer& u8(uint8_t v) {
    buf_.push_back(v);
    return *this;
  }
  Writer& u16(uint16_t v) { return put(v, 2); }
  Writer& u32(uint32_t v) { return put(v, 4); }
  Writer& u64(uint64_t v) { return put(v, 8); }
  Writer& i64(int64_t v) { return put(static_cast<uint64_t>(v), 8); }
  /// u16 length + UTF-8 bytes.
  Writer& str(std::string_view s);
  Writer& bytes(std::span<const std::byte> b);

  const std::vector<uint8_t>& data() const { return buf_; }
  std::vector<uint8_t> take() { return std::move(buf_); }
  size_t size() const { return buf_.size(); }

 private:
  Writer& put(uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    return *this;
  }
  std::vector<uint8_t> buf_;
};

/// Throws Errc::protocol_error on underflow.
class Reader {
 public:
  explicit Reader(std::span<const uint8_t> data) : data_(data) {}

  uint8_t u8() { return static_cast<uint8_t>(get(1)); }
  uint16_t u16() { return static_cast<uint16_t>(get(2)); }
  uint32_t u32() { return static_cast<uint32_t>(get(4)); }
  uint64_t u64() { return get(8); }
  int64_t i64() { return static_cast<int64_t>(get(8)); }
  std::string str();
  void bytes(std::span<std::byte> out);

  size_t remaining() const { return data_.size() - pos_; }
  void expect_end() const {
    if (remaining() != 0) throw Error(Errc::protocol_error, "trailing bytes in frame");
  }

 private:
  uint64_t get(int n);
  std::span<const uint8_t> data_;
  size_t pos_ = 0;
};

struct Frame {
  uint16_t type = 0;
  std::vector<uint8_t> payload;
};

inline constexpr uint32_t kMaxFrame = 64 * 1024 * 1024;

/// Width of the type field: 2 for the orchestrator protocol, 1 for fallback.
enum class TypeWidth { u8 = 1, u16 = 2 };

std::vector<uint8_t> encode_frame(TypeWidth width, uint16_t type, std::span<const uint8_t> payload);

/// Blocking full write; throws Errc::transport_down.
void write_all(int fd, std::span<const uint8_t> data);
/// Blocking full read; returns false on clean EOF before the first byte.
bool read_exact(int fd, std::span<uint8_t> out);
void write_frame(int fd, TypeWidth width, uint16_t type, std::span<const uint8_t> payload);
/// Returns false on clean EOF.
bool read_frame(int fd, TypeWidth width, Frame& out);

// Sockets ------------------------------------------------------------------

struct Endpoint {
  std::string host;
  uint16_t port = 0;
  std::string str() const { return host + ":" + std::to_string(port); }
  static Endpoint parse(std::string_view text);
};

/// Owning file descriptor.
class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(o.release()) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) reset(o.release());
    return *this;
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  ~Fd() { reset(); }

  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }
  int release() {
    int f = fd_;
    fd_ = -1;
    return f;
  }
  void reset(int fd = -1);

 private:
  int fd_ = -1;
};

Fd tcp_connect(const Endpoint& ep);
/// Binds and listens; port 0 picks an ephemeral port (see bound_endpoint).
Fd tcp_listen(const Endpoint& ep);
Endpoint bound_endpoint(int fd);
void set_nodelay(int fd);

}  // namespace rpcool::wire
