#pragma once

// Orchestrator wire protocol. Every frame is
//
//   u32 length (LE, bytes after this field) | u16 type (LE) | payload
//
// Requests start with a u64 correlation id; replies reuse the request type
// and start with the same correlation id followed by a u16 status (an Errc
// value). A non-zero status is followed by a UTF-8 message string instead of
// the body. NOTIFY is server-initiated and carries correlation id 0.
//
// Strings are u16 length + UTF-8; integers little-endian.

#include <cstdint>

#include "rpcool/orchestrator.hpp"
#include "rpcool/wire.hpp"

namespace rpcool::proto {

enum class MsgType : uint16_t {
  register_channel = 1,
  lookup_channel = 2,
  alloc_heap = 3,
  release_heap = 4,
  renew_lease = 5,
  notify = 6,
  quota_query = 7,
  close_channel = 8,
};

inline void put(wire::Writer& w, const HolderId& h) { w.u32(h.node).u32(h.pid).u32(h.incarnation); }
inline HolderId get_holder(wire::Reader& r) {
  HolderId h;
  h.node = r.u32();
  h.pid = r.u32();
  h.incarnation = r.u32();
  return h;
}

inline void put(wire::Writer& w, const HeapDescriptor& d) { w.u64(d.id).u64(d.base).u64(d.size).str(d.backing); }
inline HeapDescriptor get_heap(wire::Reader& r) {
  HeapDescriptor d;
  d.id = r.u64();
  d.base = r.u64();
  d.size = r.u64();
  d.backing = r.str();
  return d;
}

inline void put(wire::Writer& w, const Lease& l) {
  w.u64(l.id).u64(l.heap_id);
  put(w, l.holder);
  w.i64(l.expiry.count()).i64(l.renew_period.count());
}
inline Lease get_lease(wire::Reader& r) {
  Lease l;
  l.id = r.u64();
  l.heap_id = r.u64();
  l.holder = get_holder(r);
  l.expiry = Nanos(r.i64());
  l.renew_period = Nanos(r.i64());
  return l;
}

inline void put(wire::Writer& w, const ChannelRecord& c) {
  w.u64(c.id).str(c.name).u8(static_cast<uint8_t>(c.mode));
  put(w, c.server);
  w.str(c.pool_id).str(c.fallback_endpoint);
  w.u16(static_cast<uint16_t>(c.allow_nodes.size()));
  for (uint32_t n : c.allow_nodes) w.u32(n);
  w.u16(static_cast<uint16_t>(c.heaps.size()));
  for (const auto& h : c.heaps) put(w, h);
}
inline ChannelRecord get_channel(wire::Reader& r) {
  ChannelRecord c;
  c.id = r.u64();
  c.name = r.str();
  uint8_t mode = r.u8();
  if (mode > 1) throw Error(Errc::protocol_error, "bad heap mode");
  c.mode = static_cast<HeapMode>(mode);
  c.server = get_holder(r);
  c.pool_id = r.str();
  c.fallback_endpoint = r.str();
  uint16_t n = r.u16();
  for (uint16_t i = 0; i < n; ++i) c.allow_nodes.push_back(r.u32());
  n = r.u16();
  for (uint16_t i = 0; i < n; ++i) c.heaps.push_back(get_heap(r));
  return c;
}

inline void put(wire::Writer& w, const FailureNotification& n) {
  put(w, n.failed);
  w.u64(n.heap_id).u16(static_cast<uint16_t>(n.channels.size()));
  for (const auto& c : n.channels) w.str(c);
}
inline FailureNotification get_notification(wire::Reader& r) {
  FailureNotification n;
  n.failed = get_holder(r);
  n.heap_id = r.u64();
  uint16_t k = r.u16();
  for (uint16_t i = 0; i < k; ++i) n.channels.push_back(r.str());
  return n;
}

}  // namespace rpcool::proto
