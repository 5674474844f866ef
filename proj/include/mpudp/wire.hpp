#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpudp::wire {

/* Message-type flags. Either none or exactly one is set per packet. */
constexpr uint16_t PROBE_FLAG = 0x0001;
constexpr uint16_t ADDR_FLAG = 0x0002;

constexpr std::size_t HEADER_SIZE = 14;
constexpr uint16_t MAX_FLOW_ID = 0x7FFF;           // 15-bit flow IDs
constexpr uint64_t MAX_SEQNO = (1ULL << 48) - 1;   // 48-bit sequence numbers

enum class Direction : uint8_t { ToServer = 0, ToClient = 1 };

class WireError : public std::runtime_error {
public:
  enum class Kind { TooShort, MalformedFlags, Malformed };

  WireError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const { return kind_; }

private:
  Kind kind_;
};

/*
 * The 14-octet packet header.  Octets 0-7 are the 64-bit nonce
 * (direction | flow ID | seqno), followed by flags, timestamp and
 * timestamp reply, all big-endian.
 */
struct PacketHeader {
  Direction direction = Direction::ToServer;
  uint16_t flow_id = 0;
  uint64_t seqno = 0;
  uint16_t flags = 0;
  uint16_t timestamp = 0;
  uint16_t timestamp_reply = 0;

  PacketHeader() = default;

  /* Validates field ranges and flag exclusivity; throws WireError. */
  PacketHeader(Direction dir, uint16_t flow, uint64_t seq, uint16_t flg,
               uint16_t ts, uint16_t tsr);

  uint64_t nonce() const {
    return (static_cast<uint64_t>(direction) << 63) |
           (static_cast<uint64_t>(flow_id) << 48) | seqno;
  }

  bool is_probe() const { return flags & PROBE_FLAG; }
  bool is_addr() const { return flags & ADDR_FLAG; }
  bool is_data() const { return !is_probe() && !is_addr(); }

  bool operator==(const PacketHeader&) const = default;
};

std::array<uint8_t, HEADER_SIZE> encode_header(const PacketHeader& h);

/* Decodes the first 14 octets of b.  Throws WireError{TooShort} if
 * b is shorter, WireError{MalformedFlags} if both PROBE_FLAG and
 * ADDR_FLAG are set.  Unknown flag bits are kept as-is. */
PacketHeader decode_header(std::span<const uint8_t> b);

struct AddressRecord {
  enum class Family : uint8_t { IPv4 = 4, IPv6 = 6 };

  Family family = Family::IPv4;
  uint16_t port = 0;
  std::array<uint8_t, 16> addr{};  // first 4 octets used for IPv4

  std::size_t addr_len() const {
    return family == Family::IPv4 ? 4 : 16;
  }

  /* Encoded sub-message length field: 3 + address length. */
  uint8_t submessage_len() const {
    return static_cast<uint8_t>(3 + addr_len());
  }

  bool is_loopback() const;
  bool is_link_local() const;

  /* Parse a numeric address ("192.0.2.1" or "2001:db8::1"). */
  static AddressRecord from_string(const std::string& ip, uint16_t port);
  std::string ip_string() const;
  std::string to_string() const;  // "ip:port" / "[ip]:port"

  auto operator<=>(const AddressRecord&) const = default;
};

std::vector<uint8_t> encode_address_list(const std::vector<AddressRecord>& addrs);

/* Parses consecutive sub-messages.  Unknown families are skipped.
 * Throws WireError{Malformed} on truncated or inconsistent records. */
std::vector<AddressRecord> decode_address_list(std::span<const uint8_t> b);

struct Packet {
  PacketHeader header;
  std::vector<uint8_t> payload;

  /* header + payload, exactly 14 octets for probes and address requests */
  std::vector<uint8_t> serialize() const;
};

}  // namespace mpudp::wire
