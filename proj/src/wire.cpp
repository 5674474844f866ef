#include "mpudp/wire.hpp"

#include <arpa/inet.h>

#include <cstring>

namespace mpudp::wire {

namespace {

void put_be16(uint8_t* out, uint16_t v) {
  out[0] = static_cast<uint8_t>(v >> 8);
  out[1] = static_cast<uint8_t>(v & 0xFF);
}

uint16_t get_be16(const uint8_t* in) {
  return static_cast<uint16_t>((in[0] << 8) | in[1]);
}

void check_flags_exclusive(uint16_t flags, const char* context) {
  if ((flags & PROBE_FLAG) && (flags & ADDR_FLAG)) {
    throw WireError(WireError::Kind::MalformedFlags,
                    std::string(context) + ": PROBE_FLAG and ADDR_FLAG are mutually exclusive");
  }
}

}  // namespace

PacketHeader::PacketHeader(Direction dir, uint16_t flow, uint64_t seq,
                           uint16_t flg, uint16_t ts, uint16_t tsr)
    : direction(dir), flow_id(flow), seqno(seq), flags(flg),
      timestamp(ts), timestamp_reply(tsr) {
  if (flow_id > MAX_FLOW_ID) {
    throw WireError(WireError::Kind::Malformed, "flow_id exceeds 15 bits");
  }
  if (seqno > MAX_SEQNO) {
    throw WireError(WireError::Kind::Malformed, "seqno exceeds 48 bits");
  }
  if (flags & ~(PROBE_FLAG | ADDR_FLAG)) {
    throw WireError(WireError::Kind::Malformed, "unknown flag bits set on emit");
  }
  check_flags_exclusive(flags, "PacketHeader");
}

std::array<uint8_t, HEADER_SIZE> encode_header(const PacketHeader& h) {
  std::array<uint8_t, HEADER_SIZE> out{};
  const uint64_t nonce = h.nonce();
  for (int i = 0; i < 8; i++) {
    out[i] = static_cast<uint8_t>(nonce >> (56 - 8 * i));
  }
  put_be16(out.data() + 8, h.flags);
  put_be16(out.data() + 10, h.timestamp);
  put_be16(out.data() + 12, h.timestamp_reply);
  return out;
}

PacketHeader decode_header(std::span<const uint8_t> b) {
  if (b.size() < HEADER_SIZE) {
    throw WireError(WireError::Kind::TooShort, "packet shorter than 14 octets");
  }
  uint64_t nonce = 0;
  for (int i = 0; i < 8; i++) {
    nonce = (nonce << 8) | b[i];
  }
  PacketHeader h;
  h.direction = (nonce >> 63) ? Direction::ToClient : Direction::ToServer;
  h.flow_id = static_cast<uint16_t>((nonce >> 48) & MAX_FLOW_ID);
  h.seqno = nonce & MAX_SEQNO;
  h.flags = get_be16(b.data() + 8);
  h.timestamp = get_be16(b.data() + 10);
  h.timestamp_reply = get_be16(b.data() + 12);
  check_flags_exclusive(h.flags, "decode_header");
  return h;
}

bool AddressRecord::is_loopback() const {
  if (family == Family::IPv4) {
    return addr[0] == 127;  // 127.0.0.0/8
  }
  // ::1
  for (int i = 0; i < 15; i++) {
    if (addr[i] != 0) return false;
  }
  return addr[15] == 1;
}

bool AddressRecord::is_link_local() const {
  if (family == Family::IPv4) {
    return addr[0] == 169 && addr[1] == 254;  // 169.254.0.0/16
  }
  // fe80::/10
  return addr[0] == 0xFE && (addr[1] & 0xC0) == 0x80;
}

AddressRecord AddressRecord::from_string(const std::string& ip, uint16_t port) {
  AddressRecord r;
  r.port = port;
  in_addr a4{};
  if (inet_pton(AF_INET, ip.c_str(), &a4) == 1) {
    r.family = Family::IPv4;
    std::memcpy(r.addr.data(), &a4, 4);
    return r;
  }
  in6_addr a6{};
  if (inet_pton(AF_INET6, ip.c_str(), &a6) == 1) {
    r.family = Family::IPv6;
    std::memcpy(r.addr.data(), &a6, 16);
    return r;
  }
  throw WireError(WireError::Kind::Malformed, "unparseable address: " + ip);
}

std::string AddressRecord::ip_string() const {
  char buf[INET6_ADDRSTRLEN] = {0};
  if (family == Family::IPv4) {
    in_addr a4{};
    std::memcpy(&a4, addr.data(), 4);
    inet_ntop(AF_INET, &a4, buf, sizeof(buf));
  } else {
    in6_addr a6{};
    std::memcpy(&a6, addr.data(), 16);
    inet_ntop(AF_INET6, &a6, buf, sizeof(buf));
  }
  return buf;
}

std::string AddressRecord::to_string() const {
  if (family == Family::IPv4) {
    return ip_string() + ":" + std::to_string(port);
  }
  return "[" + ip_string() + "]:" + std::to_string(port);
}

std::vector<uint8_t> encode_address_list(const std::vector<AddressRecord>& addrs) {
  std::vector<uint8_t> out;
  for (const auto& a : addrs) {
    out.push_back(a.submessage_len());
    out.push_back(static_cast<uint8_t>(a.family));
    out.push_back(static_cast<uint8_t>(a.port >> 8));
    out.push_back(static_cast<uint8_t>(a.port & 0xFF));
    out.insert(out.end(), a.addr.begin(), a.addr.begin() + a.addr_len());
  }
  return out;
}

std::vector<AddressRecord> decode_address_list(std::span<const uint8_t> b) {
  std::vector<AddressRecord> out;
  std::size_t pos = 0;
  while (pos < b.size()) {
    const uint8_t len = b[pos];  // does not count itself
    if (len < 4) {
      throw WireError(WireError::Kind::Malformed, "address sub-message length < 4");
    }
    if (pos + 1 + len > b.size()) {
      throw WireError(WireError::Kind::Malformed, "address sub-message overruns buffer");
    }
    const uint8_t family = b[pos + 1];
    if (family == 4 || family == 6) {
      const std::size_t want = family == 4 ? 7 : 19;
      if (len != want) {
        throw WireError(WireError::Kind::Malformed,
                        "address sub-message length inconsistent with family");
      }
      AddressRecord r;
      r.family = family == 4 ? AddressRecord::Family::IPv4 : AddressRecord::Family::IPv6;
      r.port = get_be16(b.data() + pos + 2);
      std::memcpy(r.addr.data(), b.data() + pos + 4, len - 3);
      out.push_back(r);
    }
    // unknown family: skip the sub-message
    pos += 1 + len;
  }
  return out;
}

std::vector<uint8_t> Packet::serialize() const {
  auto h = encode_header(header);
  std::vector<uint8_t> out(h.begin(), h.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

}  // namespace mpudp::wire
