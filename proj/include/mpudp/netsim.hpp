#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mpudp/session.hpp"

namespace mpudp::netsim {

using rtt::ClockMs;
using wire::AddressRecord;

class ScenarioError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/* A bidirectional wire between one address of each host.  Matching is
 * by (host, IP address); ports play no role in routing. */
struct LinkModel {
  std::string id;
  std::string host_a;
  AddressRecord addr_a;
  std::string host_b;
  AddressRecord addr_b;
  ClockMs one_way_delay_ms = 0;
  double loss_prob = 0.0;
  bool up = true;
};

struct ScenarioEvent {
  enum class Kind { SetDelay, SetLoss, SetUp, SendData, AddAddress, RemoveAddress };

  ClockMs at = 0;
  Kind kind = Kind::SendData;
  std::string link_id;  // SetDelay / SetLoss / SetUp
  std::string host;     // SendData / AddAddress / RemoveAddress
  ClockMs delay_ms = 0;
  double loss = 0.0;
  bool up = true;
  std::size_t n_bytes = 0;
  AddressRecord addr;
};

struct HostSpec {
  std::string name;
  std::vector<AddressRecord> addrs;
};

struct Scenario {
  HostSpec client;  // first declared host
  HostSpec server;  // second declared host
  std::vector<LinkModel> links;
  std::vector<ScenarioEvent> events;  // sorted by time
  uint64_t seed = 0;
  ClockMs run_until_ms = 0;  // 0: last event + 2 s
  /* extra delay before a restored link becomes usable (routing recovery) */
  ClockMs link_up_extra_delay_ms = 0;
};

/* Line-based scenario text; see README for the directive grammar. */
Scenario parse_scenario(std::istream& in);
Scenario parse_scenario_file(const std::string& path);

enum class TraceKind {
  PacketSent,
  PacketDelivered,
  PacketLost,
  SrttUpdate,
  FlowSelected,
  IdleIncrement,
};

enum class Host : uint8_t { Client = 0, Server = 1 };

struct TraceRecord {
  ClockMs at = 0;
  TraceKind kind = TraceKind::PacketSent;
  uint16_t flow_id = 0;
  double value = 0.0;  // bytes for packet records, ms otherwise
  /* not part of the CSV schema; used by overhead_report and tests */
  Host host = Host::Client;
  bool is_probe = false;
};

const char* trace_kind_name(TraceKind kind);

/* CSV with header `time_ms,kind,flow_id,value`. */
void write_csv(std::ostream& out, const std::vector<TraceRecord>& trace);

/*
 * Deterministic discrete-event execution of a scenario: the first host
 * runs a client endpoint sending scripted data, the second a server
 * endpoint echoing every data payload.  Identical (scenario, seed)
 * yields identical traces.
 */
class Simulator {
public:
  Simulator(Scenario scenario, uint64_t seed);
  ~Simulator();
  Simulator(const Simulator&) = delete;
  Simulator& operator=(const Simulator&) = delete;

  /* Inspection hook invoked for every packet either endpoint emits. */
  void set_packet_hook(
      std::function<void(Host, const wire::PacketHeader&, std::size_t)> hook) {
    packet_hook_ = std::move(hook);
  }

  std::vector<TraceRecord> run();

  const session::Endpoint& client() const { return *client_; }
  const session::Endpoint& server() const { return *server_; }

private:
  struct Delivery {
    ClockMs at = 0;
    uint64_t seq = 0;
    Host to = Host::Server;
    session::IncomingDatagram dgram;
    std::size_t link_index = 0;
    std::size_t wire_size = 0;
    uint16_t flow_id = 0;
  };

  class Recorder;

  void process_event(const ScenarioEvent& ev);
  void route(Host from, const session::OutgoingDatagram& dgram);
  void deliver(const Delivery& d);
  void pump(Host who);
  void send_scripted_data(Host who, std::size_t n_bytes);
  session::Endpoint& endpoint(Host who);
  const LinkModel* find_link(Host from, const AddressRecord& src,
                             const AddressRecord& dst, std::size_t* index);
  double draw_uniform();

  Scenario sc_;
  uint64_t seed_;
  ClockMs now_ = 0;
  uint64_t next_delivery_seq_ = 0;
  uint64_t rng_state_ = 0;
  std::optional<session::Endpoint> client_;
  std::optional<session::Endpoint> server_;
  std::unique_ptr<Recorder> recorder_client_;
  std::unique_ptr<Recorder> recorder_server_;
  std::vector<Delivery> deliveries_;  // min-heap by (at, seq)
  std::vector<TraceRecord> trace_;
  std::function<void(Host, const wire::PacketHeader&, std::size_t)> packet_hook_;
  uint16_t next_hop_port_ = 50001;
};

/* Convenience wrapper: construct, run, return the trace. */
std::vector<TraceRecord> run(const Scenario& scenario, uint64_t seed);

/* Probing cost of one flow: frame bytes over the probe interval. */
double probe_overhead_bps(double frame_size_bytes, double interval_ms);

struct OverheadRow {
  uint16_t flow_id = 0;
  std::size_t probe_count = 0;
  double mean_interval_ms = 0.0;
  double bytes_per_sec = 0.0;
};

/* Per-flow probing overhead measured from client probe sends in
 * [window_start, window_end); frame size is frame_overhead + 14. */
std::vector<OverheadRow> overhead_report(
    const std::vector<TraceRecord>& trace, double frame_overhead_bytes,
    ClockMs window_start = 0,
    ClockMs window_end = ~static_cast<ClockMs>(0));

/* IPv6 / IPv4 framing defaults reproducing the measured ~90 B and
 * ~72 B probe frames. */
constexpr double FRAME_OVERHEAD_IPV6 = 76.0;
constexpr double FRAME_OVERHEAD_IPV4 = 58.0;

}  // namespace mpudp::netsim
