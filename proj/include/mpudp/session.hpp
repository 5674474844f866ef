#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mpudp/clock_rtt.hpp"
#include "mpudp/flows.hpp"
#include "mpudp/wire.hpp"

namespace mpudp::session {

using flows::FlowKey;
using rtt::ClockMs;
using wire::AddressRecord;

enum class Role { Client, Server };

/* A datagram with concrete source and destination addresses; the
 * transport must honor the source (no wildcards). */
struct OutgoingDatagram {
  AddressRecord src;
  AddressRecord dst;
  std::vector<uint8_t> payload;
};

struct IncomingDatagram {
  AddressRecord src;
  AddressRecord dst;
  std::vector<uint8_t> payload;
};

class NoFlowError : public std::runtime_error {
public:
  NoFlowError() : std::runtime_error("no flow available to send on") {}
};

/*
 * AEAD-shaped seal/open interface keyed per session.  The nonce is the
 * 8-octet packet nonce; a nonce is never sealed twice per direction.
 */
class Cipher {
public:
  virtual ~Cipher() = default;
  virtual std::vector<uint8_t> seal(const std::array<uint8_t, 8>& nonce,
                                    std::span<const uint8_t> plaintext) const = 0;
  virtual std::optional<std::vector<uint8_t>> open(
      const std::array<uint8_t, 8>& nonce,
      std::span<const uint8_t> ciphertext) const = 0;
};

/*
 * Identity transform plus a 16-octet tag derived from the key (all
 * zeros for an empty key).  Preserves nonce and framing semantics
 * without any cryptographic protection.
 */
class NullCipher : public Cipher {
public:
  static constexpr std::size_t TAG_SIZE = 16;

  NullCipher() = default;
  explicit NullCipher(std::span<const uint8_t> key);

  std::vector<uint8_t> seal(const std::array<uint8_t, 8>& nonce,
                            std::span<const uint8_t> plaintext) const override;
  std::optional<std::vector<uint8_t>> open(
      const std::array<uint8_t, 8>& nonce,
      std::span<const uint8_t> ciphertext) const override;

private:
  std::array<uint8_t, TAG_SIZE> tag_{};
};

struct EndpointConfig {
  double max_delack_ms = 100.0;
  ClockMs addr_request_interval_ms = 30000;
  std::shared_ptr<const Cipher> cipher;  // NullCipher when unset
};

/* Measurement and selection callbacks, used for tracing and logging. */
class EndpointObserver {
public:
  virtual ~EndpointObserver() = default;
  virtual void on_packet_sent(const wire::PacketHeader&, std::size_t wire_size) {}
  virtual void on_srtt_update(uint16_t flow_id, double srtt_ms) {}
  virtual void on_idle_increment(uint16_t flow_id, double increment_ms) {}
  virtual void on_flow_selected(uint16_t flow_id) {}
};

struct ReceiveResult {
  std::optional<std::vector<uint8_t>> app_payload;
  std::vector<OutgoingDatagram> actions;
};

/*
 * One endpoint of a multipath session.  Single-threaded by contract:
 * receive/advance/send must be externally serialized; the host event
 * loop calls advance whenever next_wakeup comes due and pushes
 * datagrams in via receive.
 */
class Endpoint {
public:
  static Endpoint make_client(std::vector<AddressRecord> local_addrs,
                              const AddressRecord& server_addr,
                              EndpointConfig cfg, ClockMs now);
  static Endpoint make_server(std::vector<AddressRecord> local_addrs,
                              EndpointConfig cfg);

  Role role() const { return role_; }

  /* Emits an application data packet on the current flow. */
  OutgoingDatagram send_data(std::span<const uint8_t> app_payload, ClockMs now);

  /* Full receive pipeline: open, decode, in-order control updates,
   * flag dispatch.  Undecodable or unauthenticated input is dropped
   * silently (empty result). */
  ReceiveResult receive(const IncomingDatagram& dgram, ClockMs now);

  /* Client: ask the server for its address list. */
  OutgoingDatagram request_addresses(ClockMs now);

  /* Earliest pending deadline: probe schedule/expiry, next address
   * request (client), pending delayed probe reply (server). */
  std::optional<ClockMs> next_wakeup() const;

  /* Fires every deadline at or before now.  Idempotent per instant. */
  std::vector<OutgoingDatagram> advance(ClockMs now);

  /* Set when enough consecutive unanswered probe timeouts accumulated
   * with no sign of the peer; the host should allocate a fresh local
   * port and call port_hop. */
  bool port_hop_pending() const { return hop_pending_; }

  /* Moves local sending to new_port, retaining recent old ports for
   * receipt.  Flow state (estimators, seqnos) is preserved. */
  void port_hop(uint16_t new_port, ClockMs now);

  const std::vector<uint16_t>& retained_ports() const { return retained_ports_; }

  /* Local address changes (interface up/down); client rebuilds flows. */
  void set_local_addresses(std::vector<AddressRecord> addrs, ClockMs now);
  void add_local_address(const AddressRecord& addr, ClockMs now);
  void remove_local_address(const AddressRecord& addr, ClockMs now);

  const std::vector<AddressRecord>& local_addresses() const { return local_addrs_; }
  const std::vector<AddressRecord>& remote_addresses() const { return remote_addrs_; }

  const flows::FlowTable& flow_table() const { return table_; }
  std::optional<uint16_t> current_flow() const { return current_flow_; }
  ClockMs last_heard() const { return last_heard_; }

  void set_observer(EndpointObserver* obs) { observer_ = obs; }

private:
  Endpoint(Role role, std::vector<AddressRecord> local_addrs, EndpointConfig cfg);

  wire::Direction send_direction() const {
    return role_ == Role::Client ? wire::Direction::ToServer
                                 : wire::Direction::ToClient;
  }

  OutgoingDatagram seal_packet(flows::Flow& flow, uint16_t flags,
                               std::span<const uint8_t> payload, ClockMs now,
                               std::optional<uint64_t> seqno = std::nullopt);
  void refresh_current_flow();
  void note_heard(ClockMs now);
  flows::Flow* bootstrap_fallback();
  void merge_remote_addresses(const std::vector<AddressRecord>& addrs, ClockMs now);

  Role role_;
  EndpointConfig cfg_;
  flows::FlowTable table_;
  std::vector<AddressRecord> local_addrs_;
  std::vector<AddressRecord> remote_addrs_;
  std::optional<uint16_t> current_flow_;

  // client schedule
  std::optional<ClockMs> next_addr_request_at_;

  // server delayed probe reply
  struct PendingReply {
    uint16_t flow_id;
    ClockMs due_at;
  };
  std::optional<PendingReply> pending_reply_;

  // port hopping
  bool hop_pending_ = false;
  uint32_t consecutive_timeouts_ = 0;
  std::vector<uint16_t> retained_ports_;
  static constexpr std::size_t RETAINED_PORT_COUNT = 3;
  static constexpr uint32_t HOP_TIMEOUT_THRESHOLD = 3;

  ClockMs last_heard_ = 0;
  EndpointObserver* observer_ = nullptr;
};

}  // namespace mpudp::session
