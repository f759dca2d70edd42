#include "rpcool/wire.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>

namespace rpcool::wire {

Writer& Writer::str(std::string_view s) {
  if (s.size() > 0xFFFF) throw Error(Errc::invalid_argument, "string longer than 65535 bytes");
  u16(static_cast<uint16_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
  return *this;
}

Writer& Writer::bytes(std::span<const std::byte> b) {
  auto* p = reinterpret_cast<const uint8_t*>(b.data());
  buf_.insert(buf_.end(), p, p + b.size());
  return *this;
}

uint64_t Reader::get(int n) {
  if (remaining() < static_cast<size_t>(n)) throw Error(Errc::protocol_error, "truncated frame");
  uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += n;
  return v;
}

std::string Reader::str() {
  uint16_t n = u16();
  if (remaining() < n) throw Error(Errc::protocol_error, "truncated string");
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

void Reader::bytes(std::span<std::byte> out) {
  if (remaining() < out.size()) throw Error(Errc::protocol_error, "truncated bytes");
  std::memcpy(out.data(), data_.data() + pos_, out.size());
  pos_ += out.size();
}

std::vector<uint8_t> encode_frame(TypeWidth width, uint16_t type, std::span<const uint8_t> payload) {
  const size_t tw = static_cast<size_t>(width);
  const size_t len = tw + payload.size();
  if (len > kMaxFrame) throw Error(Errc::invalid_argument, "frame too large");
  std::vector<uint8_t> out;
  out.reserve(4 + len);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(len >> (8 * i)));
  out.push_back(static_cast<uint8_t>(type));
  if (width == TypeWidth::u16) out.push_back(static_cast<uint8_t>(type >> 8));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

void write_all(int fd, std::span<const uint8_t> data) {
  size_t off = 0;
  while (off < data.size()) {
    ssize_t n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == ENOTSOCK) n = ::write(fd, data.data() + off, data.size() - off);
      if (n < 0) throw_errno(Errc::transport_down, "write");
    }
    off += static_cast<size_t>(n);
  }
}

bool read_exact(int fd, std::span<uint8_t> out) {
  size_t off = 0;
  while (off < out.size()) {
    ssize_t n = ::read(fd, out.data() + off, out.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw_errno(Errc::transport_down, "read");
    }
    if (n == 0) {
      if (off == 0) return false;
      throw Error(Errc::transport_down, "peer closed mid-frame");
    }
    off += static_cast<size_t>(n);
  }
  return true;
}

void write_frame(int fd, TypeWidth width, uint16_t type, std::span<const uint8_t> payload) {
  write_all(fd, encode_frame(width, type, payload));
}

bool read_frame(int fd, TypeWidth width, Frame& out) {
  uint8_t hdr[4];
  if (!read_exact(fd, hdr)) return false;
  uint32_t len = hdr[0] | (hdr[1] << 8) | (hdr[2] << 16) | (static_cast<uint32_t>(hdr[3]) << 24);
  const uint32_t tw = static_cast<uint32_t>(width);
  if (len < tw || len > kMaxFrame) throw Error(Errc::protocol_error, "bad frame length");
  uint8_t t[2] = {0, 0};
  if (!read_exact(fd, std::span<uint8_t>(t, tw))) throw Error(Errc::transport_down, "peer closed mid-frame");
  out.type = static_cast<uint16_t>(t[0] | (t[1] << 8));
  out.payload.resize(len - tw);
  if (!out.payload.empty() && !read_exact(fd, out.payload)) throw Error(Errc::transport_down, "peer closed mid-frame");
  return true;
}

Endpoint Endpoint::parse(std::string_view text) {
  auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0) throw Error(Errc::config_error, "endpoint must be host:port");
  Endpoint ep;
  ep.host = std::string(text.substr(0, colon));
  auto port = text.substr(colon + 1);
  unsigned v = 0;
  auto [p, ec] = std::from_chars(port.data(), port.data() + port.size(), v);
  if (ec != std::errc{} || p != port.data() + port.size() || v > 65535)
    throw Error(Errc::config_error, "bad port in endpoint");
  ep.port = static_cast<uint16_t>(v);
  return ep;
}

void Fd::reset(int fd) {
  if (fd_ >= 0) ::close(fd_);
  fd_ = fd;
}

namespace {
sockaddr_in make_addr(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  std::string host = ep.host == "localhost" ? "127.0.0.1" : ep.host;
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
    throw Error(Errc::config_error, "only IPv4 literal hosts are supported: " + ep.host);
  return addr;
}
}  // namespace

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

Fd tcp_connect(const Endpoint& ep) {
  sockaddr_in addr = make_addr(ep);
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) throw_errno(Errc::connection_refused, "socket");
  if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
    throw_errno(Errc::connection_refused, "connect " + ep.str());
  set_nodelay(fd.get());
  return fd;
}

Fd tcp_listen(const Endpoint& ep) {
  sockaddr_in addr = make_addr(ep);
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd) throw_errno(Errc::connection_refused, "socket");
  int one = 1;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
    throw_errno(Errc::connection_refused, "bind " + ep.str());
  if (::listen(fd.get(), 128) != 0) throw_errno(Errc::connection_refused, "listen");
  return fd;
}

Endpoint bound_endpoint(int fd) {
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  if (::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0) throw_errno(Errc::protocol_error, "getsockname");
  char buf[INET_ADDRSTRLEN];
  ::inet_ntop(AF_INET, &addr.sin_addr, buf, sizeof buf);
  return Endpoint{buf, ntohs(addr.sin_port)};
}

}  // namespace rpcool::wire
