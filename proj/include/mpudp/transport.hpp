#pragma once

#include <deque>
#include <optional>
#include <vector>

#include "mpudp/session.hpp"

namespace mpudp::transport {

using session::IncomingDatagram;
using session::OutgoingDatagram;
using wire::AddressRecord;

/*
 * Datagram transport with explicit per-packet source addresses.  Two
 * implementations: real UDP sockets (below) and the in-memory pair
 * used by the simulator and the tests.
 */
class DatagramTransport {
public:
  virtual ~DatagramTransport() = default;

  virtual bool send(const OutgoingDatagram& dgram) = 0;

  /* Waits up to timeout_ms (0: just poll) for one datagram. */
  virtual std::optional<IncomingDatagram> receive(int timeout_ms) = 0;

  /* Allocates a fresh local sending port, retaining old ones for
   * receipt.  Returns the new port. */
  virtual uint16_t open_local_port() = 0;
};

/*
 * One wildcard-bound socket per network-layer protocol and per port
 * generation.  The source address of each outgoing packet is set with
 * IP_PKTINFO / IPV6_PKTINFO control messages; the destination address
 * of each incoming packet is recovered the same way.
 */
class UdpTransport : public DatagramTransport {
public:
  /* port 0 binds an ephemeral port (both families on the same number). */
  explicit UdpTransport(uint16_t port = 0);
  ~UdpTransport() override;
  UdpTransport(const UdpTransport&) = delete;
  UdpTransport& operator=(const UdpTransport&) = delete;

  bool send(const OutgoingDatagram& dgram) override;
  std::optional<IncomingDatagram> receive(int timeout_ms) override;
  uint16_t open_local_port() override;

  uint16_t current_port() const;
  int last_errno() const { return last_errno_; }

  /* Host addresses via getifaddrs, tagged with the given port. */
  static std::vector<AddressRecord> gather_local_addresses(uint16_t port);

private:
  struct Generation {
    int fd4 = -1;
    int fd6 = -1;
    uint16_t port = 0;
  };

  static constexpr std::size_t MAX_GENERATIONS = 4;  // current + 3 retained

  Generation bind_generation(uint16_t port);
  void prune();

  std::deque<Generation> generations_;  // newest last
  int last_errno_ = 0;
};

/* In-memory transport: one end of a connected pair.  Deterministic and
 * loss-free; tests script drops and address rewriting on top. */
class PairTransport : public DatagramTransport {
public:
  static std::pair<std::shared_ptr<PairTransport>, std::shared_ptr<PairTransport>>
  make_pair(uint16_t port_a, uint16_t port_b);

  bool send(const OutgoingDatagram& dgram) override;
  std::optional<IncomingDatagram> receive(int timeout_ms) override;
  uint16_t open_local_port() override { return next_port_++; }

private:
  std::weak_ptr<PairTransport> peer_;
  std::deque<IncomingDatagram> inbox_;
  uint16_t next_port_ = 40001;
};

}  // namespace mpudp::transport
