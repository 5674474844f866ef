#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mpudp/clock_rtt.hpp"
#include "mpudp/wire.hpp"

namespace mpudp::flows {

using rtt::ClockMs;
using wire::AddressRecord;

class FlowError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class FlowIdExhausted : public FlowError {
public:
  FlowIdExhausted() : FlowError("more than 2^15 simultaneous address pairs") {}
};

/* A usable pair must match family, loopback-ness and link-local-ness. */
bool filter_pair(const AddressRecord& src, const AddressRecord& dst);

struct FlowKey {
  AddressRecord src;
  AddressRecord dst;

  auto operator<=>(const FlowKey&) const = default;
};

struct OutstandingProbe {
  uint64_t seqno = 0;
  ClockMs sent_at = 0;

  bool operator==(const OutstandingProbe&) const = default;
};

/*
 * One (source, destination) path and its measurement state.  Sequence
 * numbers continue across flow-ID reuse so the (direction, flow, seqno)
 * nonce never repeats.
 */
struct Flow {
  uint16_t id = 0;
  FlowKey key;
  rtt::RttEstimator estimator;
  rtt::TimestampState ts_state;
  uint64_t next_seqno_out = 0;
  std::optional<uint64_t> max_seqno_in;
  ClockMs next_probe_at = 0;
  std::optional<OutstandingProbe> probe_outstanding;

  uint64_t take_seqno() {
    if (next_seqno_out > wire::MAX_SEQNO) {
      throw FlowError("48-bit sequence space exhausted on flow");
    }
    return next_seqno_out++;
  }

  bool in_order(uint64_t seqno) const {
    return !max_seqno_in || seqno > *max_seqno_in;
  }

  bool operator==(const Flow&) const = default;
};

/* Result of handing an in-order header to a flow. */
struct ReceiptEffects {
  std::optional<double> rtt_sample_ms;  // set when SRTT was updated
  bool cleared_outstanding_probe = false;
};

/* Updates max_seqno_in and timestamp state; samples the RTT when the
 * echoed timestamp allows it.  Caller guarantees in-order. */
ReceiptEffects on_in_order_receipt(Flow& f, const wire::PacketHeader& h, ClockMs now);

/* A probe the caller must emit, with its already-consumed seqno. */
struct ProbeEmission {
  uint16_t flow_id = 0;
  uint64_t seqno = 0;
  /* set when this probe was triggered by an RTO expiry */
  std::optional<double> idle_increment;
  /* the flow's dRTO as it was when the expiry fired */
  double drto_at_expiry = 0.0;
};

class FlowTable {
public:
  bool empty() const { return flows_.empty(); }
  std::size_t size() const { return flows_.size(); }

  Flow* find(uint16_t id);
  const Flow* find(uint16_t id) const;

  const std::map<uint16_t, Flow>& all() const { return flows_; }

  /* Creates the bootstrap flow (ID 0). */
  Flow& create_bootstrap(const FlowKey& key, ClockMs now);

  /* Server side: adopt a client-allocated flow ID. */
  Flow& learn(uint16_t id, const FlowKey& key, ClockMs now);

  /*
   * Completes the table against the filtered cartesian product of
   * local x remote.  Flows whose pair is still in the product are left
   * untouched; new pairs reuse the lowest flow ID whose pair dropped
   * out of the product (keeping its seqno counter, resetting
   * measurement state), else take the lowest never-used ID >= 1.
   */
  void rebuild(const std::vector<AddressRecord>& local,
               const std::vector<AddressRecord>& remote, ClockMs now);

  /* Lowest-metric flow among those with a sample; ties to lowest ID. */
  std::optional<uint16_t> select_best() const;

  /* Earliest of scheduled probes and outstanding-probe expiries. */
  std::optional<ClockMs> next_probe_deadline() const;

  /* Fires due probes and expiries.  Expired outstanding probes add one
   * RTO to idle time and re-probe immediately. */
  std::vector<ProbeEmission> on_timer(ClockMs now, double max_delack_ms);

  /* Port hop: every flow keeps its path and estimator state, only the
   * source port of its key changes. */
  void update_local_port(uint16_t new_port);

  bool operator==(const FlowTable&) const = default;

private:
  std::map<uint16_t, Flow> flows_;
};

/* Expiry deadline of an outstanding probe (whole milliseconds). */
ClockMs probe_expiry_deadline(const Flow& f);

}  // namespace mpudp::flows
