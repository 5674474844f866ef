#include "mpudp/netsim.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

namespace mpudp::netsim {

namespace {

bool same_ip(const AddressRecord& a, const AddressRecord& b) {
  return a.family == b.family && a.addr == b.addr;
}

uint64_t splitmix64(uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

const char* trace_kind_name(TraceKind kind) {
  switch (kind) {
    case TraceKind::PacketSent: return "PacketSent";
    case TraceKind::PacketDelivered: return "PacketDelivered";
    case TraceKind::PacketLost: return "PacketLost";
    case TraceKind::SrttUpdate: return "SrttUpdate";
    case TraceKind::FlowSelected: return "FlowSelected";
    case TraceKind::IdleIncrement: return "IdleIncrement";
  }
  return "?";
}

void write_csv(std::ostream& out, const std::vector<TraceRecord>& trace) {
  out << "time_ms,kind,flow_id,value\n";
  char buf[128];
  for (const auto& r : trace) {
    const bool fractional =
        r.kind == TraceKind::SrttUpdate || r.kind == TraceKind::IdleIncrement;
    if (fractional) {
      std::snprintf(buf, sizeof(buf), "%llu,%s,%u,%.3f\n",
                    static_cast<unsigned long long>(r.at),
                    trace_kind_name(r.kind), r.flow_id, r.value);
    } else {
      std::snprintf(buf, sizeof(buf), "%llu,%s,%u,%.0f\n",
                    static_cast<unsigned long long>(r.at),
                    trace_kind_name(r.kind), r.flow_id, r.value);
    }
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// scenario parsing

namespace {

struct LineParser {
  int lineno = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ScenarioError("line " + std::to_string(lineno) + ": " + msg);
  }

  uint64_t parse_u64(const std::string& tok, const char* what) const {
    try {
      std::size_t pos = 0;
      uint64_t v = std::stoull(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      fail(std::string("bad ") + what + ": '" + tok + "'");
    }
  }

  double parse_double(const std::string& tok, const char* what) const {
    try {
      std::size_t pos = 0;
      double v = std::stod(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      fail(std::string("bad ") + what + ": '" + tok + "'");
    }
  }

  AddressRecord parse_addr(const std::string& fam, const std::string& ip,
                           uint16_t port) const {
    AddressRecord r;
    try {
      r = AddressRecord::from_string(ip, port);
    } catch (const wire::WireError&) {
      fail("unparseable address '" + ip + "'");
    }
    if (fam == "4" && r.family != AddressRecord::Family::IPv4) {
      fail("address '" + ip + "' is not IPv4");
    }
    if (fam == "6" && r.family != AddressRecord::Family::IPv6) {
      fail("address '" + ip + "' is not IPv6");
    }
    if (fam != "4" && fam != "6") {
      fail("address family must be 4 or 6, got '" + fam + "'");
    }
    return r;
  }
};

std::string next_token(std::istringstream& ss) {
  std::string tok;
  ss >> tok;
  return tok;
}

}  // namespace

Scenario parse_scenario(std::istream& in) {
  Scenario sc;
  std::vector<HostSpec> hosts;
  LineParser lp;

  auto find_host = [&](const std::string& name) -> HostSpec* {
    for (auto& h : hosts) {
      if (h.name == name) return &h;
    }
    return nullptr;
  };
  auto require_host = [&](const std::string& name) -> HostSpec& {
    HostSpec* h = find_host(name);
    if (!h) lp.fail("unknown host '" + name + "'");
    return *h;
  };
  auto require_link = [&](const std::string& id) {
    for (const auto& l : sc.links) {
      if (l.id == id) return;
    }
    lp.fail("unknown link '" + id + "'");
  };

  std::string line;
  while (std::getline(in, line)) {
    lp.lineno++;
    if (auto hash = line.find('#'); hash != std::string::npos) {
      line.erase(hash);
    }
    std::istringstream ss(line);
    std::string cmd;
    if (!(ss >> cmd)) continue;

    if (cmd == "host") {
      const std::string name = next_token(ss);
      if (name.empty()) lp.fail("host needs a name");
      if (find_host(name)) lp.fail("duplicate host '" + name + "'");
      if (hosts.size() == 2) lp.fail("a scenario has exactly two hosts");
      hosts.push_back(HostSpec{name, {}});
    } else if (cmd == "addr") {
      const std::string host = next_token(ss);
      const std::string fam = next_token(ss);
      const std::string ip = next_token(ss);
      const std::string port = next_token(ss);
      if (port.empty()) lp.fail("addr <host> <4|6> <ip> <port>");
      auto p = lp.parse_u64(port, "port");
      if (p > 0xFFFF) lp.fail("port out of range");
      require_host(host).addrs.push_back(
          lp.parse_addr(fam, ip, static_cast<uint16_t>(p)));
    } else if (cmd == "link") {
      LinkModel l;
      l.id = next_token(ss);
      if (l.id.empty()) lp.fail("link needs an id");
      for (const auto& existing : sc.links) {
        if (existing.id == l.id) lp.fail("duplicate link '" + l.id + "'");
      }
      for (int side = 0; side < 2; side++) {
        const std::string ep = next_token(ss);
        const auto colon = ep.find(':');
        if (colon == std::string::npos) lp.fail("link endpoint must be host:addr");
        const std::string host = ep.substr(0, colon);
        const std::string ip = ep.substr(colon + 1);
        require_host(host);
        AddressRecord addr;
        try {
          addr = AddressRecord::from_string(ip, 0);
        } catch (const wire::WireError&) {
          lp.fail("unparseable link address '" + ip + "'");
        }
        if (side == 0) {
          l.host_a = host;
          l.addr_a = addr;
        } else {
          l.host_b = host;
          l.addr_b = addr;
        }
      }
      std::string kv;
      while (!(kv = next_token(ss)).empty()) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) lp.fail("expected key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, eq);
        const std::string val = kv.substr(eq + 1);
        if (key == "delay") {
          l.one_way_delay_ms = lp.parse_u64(val, "delay");
        } else if (key == "loss") {
          l.loss_prob = lp.parse_double(val, "loss");
          if (l.loss_prob < 0.0 || l.loss_prob > 1.0) lp.fail("loss not in [0,1]");
        } else {
          lp.fail("unknown link option '" + key + "'");
        }
      }
      if (l.host_a == l.host_b) lp.fail("link endpoints on the same host");
      sc.links.push_back(l);
    } else if (cmd == "seed") {
      sc.seed = lp.parse_u64(next_token(ss), "seed");
    } else if (cmd == "run") {
      sc.run_until_ms = lp.parse_u64(next_token(ss), "run time");
    } else if (cmd == "linkupdelay") {
      sc.link_up_extra_delay_ms = lp.parse_u64(next_token(ss), "linkupdelay");
    } else if (cmd == "at") {
      ScenarioEvent ev;
      ev.at = lp.parse_u64(next_token(ss), "event time");
      const std::string what = next_token(ss);
      if (what == "setdelay") {
        ev.kind = ScenarioEvent::Kind::SetDelay;
        ev.link_id = next_token(ss);
        require_link(ev.link_id);
        ev.delay_ms = lp.parse_u64(next_token(ss), "delay");
      } else if (what == "setloss") {
        ev.kind = ScenarioEvent::Kind::SetLoss;
        ev.link_id = next_token(ss);
        require_link(ev.link_id);
        ev.loss = lp.parse_double(next_token(ss), "loss");
        if (ev.loss < 0.0 || ev.loss > 1.0) lp.fail("loss not in [0,1]");
      } else if (what == "setup") {
        ev.kind = ScenarioEvent::Kind::SetUp;
        ev.link_id = next_token(ss);
        require_link(ev.link_id);
        const std::string state = next_token(ss);
        if (state == "up") {
          ev.up = true;
        } else if (state == "down") {
          ev.up = false;
        } else {
          lp.fail("setup expects up|down, got '" + state + "'");
        }
      } else if (what == "senddata") {
        ev.kind = ScenarioEvent::Kind::SendData;
        ev.host = next_token(ss);
        require_host(ev.host);
        ev.n_bytes = lp.parse_u64(next_token(ss), "byte count");
        if (ev.n_bytes == 0) lp.fail("senddata needs at least 1 byte");
      } else if (what == "addaddr") {
        ev.kind = ScenarioEvent::Kind::AddAddress;
        ev.host = next_token(ss);
        require_host(ev.host);
        const std::string fam = next_token(ss);
        const std::string ip = next_token(ss);
        const auto port = lp.parse_u64(next_token(ss), "port");
        if (port > 0xFFFF) lp.fail("port out of range");
        ev.addr = lp.parse_addr(fam, ip, static_cast<uint16_t>(port));
      } else if (what == "deladdr") {
        ev.kind = ScenarioEvent::Kind::RemoveAddress;
        ev.host = next_token(ss);
        require_host(ev.host);
        const std::string ip = next_token(ss);
        try {
          ev.addr = AddressRecord::from_string(ip, 0);
        } catch (const wire::WireError&) {
          lp.fail("unparseable address '" + ip + "'");
        }
      } else {
        lp.fail("unknown event '" + what + "'");
      }
      sc.events.push_back(ev);
    } else {
      lp.fail("unknown directive '" + cmd + "'");
    }
  }

  lp.lineno = 0;
  if (hosts.size() != 2) {
    throw ScenarioError("a scenario needs exactly two hosts (client, then server)");
  }
  for (const auto& h : hosts) {
    if (h.addrs.empty()) {
      throw ScenarioError("host '" + h.name + "' has no addresses");
    }
  }
  sc.client = hosts[0];
  sc.server = hosts[1];
  std::stable_sort(sc.events.begin(), sc.events.end(),
                   [](const ScenarioEvent& a, const ScenarioEvent& b) {
                     return a.at < b.at;
                   });
  return sc;
}

Scenario parse_scenario_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::ios_base::failure("cannot open scenario file: " + path);
  }
  return parse_scenario(in);
}

// ---------------------------------------------------------------------------
// simulator

class Simulator::Recorder : public session::EndpointObserver {
public:
  Recorder(Simulator& sim, Host host) : sim_(sim), host_(host) {}

  void on_packet_sent(const wire::PacketHeader& h, std::size_t wire_size) override {
    sim_.trace_.push_back({sim_.now_, TraceKind::PacketSent, h.flow_id,
                           static_cast<double>(wire_size), host_, h.is_probe()});
    if (sim_.packet_hook_) {
      sim_.packet_hook_(host_, h, wire_size);
    }
  }

  void on_srtt_update(uint16_t flow_id, double srtt_ms) override {
    if (host_ == Host::Client) {
      sim_.trace_.push_back(
          {sim_.now_, TraceKind::SrttUpdate, flow_id, srtt_ms, host_, false});
    }
  }

  void on_idle_increment(uint16_t flow_id, double increment_ms) override {
    if (host_ == Host::Client) {
      sim_.trace_.push_back({sim_.now_, TraceKind::IdleIncrement, flow_id,
                             increment_ms, host_, false});
    }
  }

  void on_flow_selected(uint16_t flow_id) override {
    if (host_ == Host::Client) {
      sim_.trace_.push_back(
          {sim_.now_, TraceKind::FlowSelected, flow_id, 0.0, host_, false});
    }
  }

private:
  Simulator& sim_;
  Host host_;
};

Simulator::Simulator(Scenario scenario, uint64_t seed)
    : sc_(std::move(scenario)), seed_(seed), rng_state_(seed) {
  if (sc_.client.addrs.empty() || sc_.server.addrs.empty()) {
    throw ScenarioError("both hosts need at least one address");
  }

  // A restored link only becomes usable after routing has recovered.
  if (sc_.link_up_extra_delay_ms > 0) {
    for (auto& ev : sc_.events) {
      if (ev.kind == ScenarioEvent::Kind::SetUp && ev.up) {
        ev.at += sc_.link_up_extra_delay_ms;
      }
    }
    std::stable_sort(sc_.events.begin(), sc_.events.end(),
                     [](const ScenarioEvent& a, const ScenarioEvent& b) {
                       return a.at < b.at;
                     });
  }

  session::EndpointConfig cfg;
  cfg.cipher = std::make_shared<session::NullCipher>();
  // The simulated application acknowledges immediately; the delayed-ack
  // allowance is an embedding-supplied bound, zero here.
  cfg.max_delack_ms = 0.0;
  server_.emplace(session::Endpoint::make_server(sc_.server.addrs, cfg));
  try {
    client_.emplace(session::Endpoint::make_client(
        sc_.client.addrs, sc_.server.addrs.front(), cfg, 0));
  } catch (const flows::FlowError& e) {
    throw ScenarioError(std::string("cannot bootstrap client: ") + e.what());
  }

  recorder_client_ = std::make_unique<Recorder>(*this, Host::Client);
  recorder_server_ = std::make_unique<Recorder>(*this, Host::Server);
  client_->set_observer(recorder_client_.get());
  server_->set_observer(recorder_server_.get());
}

Simulator::~Simulator() = default;

session::Endpoint& Simulator::endpoint(Host who) {
  return who == Host::Client ? *client_ : *server_;
}

const LinkModel* Simulator::find_link(Host from, const AddressRecord& src,
                                      const AddressRecord& dst,
                                      std::size_t* index) {
  const std::string& from_host =
      from == Host::Client ? sc_.client.name : sc_.server.name;
  const std::string& to_host =
      from == Host::Client ? sc_.server.name : sc_.client.name;
  for (std::size_t i = 0; i < sc_.links.size(); i++) {
    const LinkModel& l = sc_.links[i];
    const bool forward = l.host_a == from_host && same_ip(l.addr_a, src) &&
                         l.host_b == to_host && same_ip(l.addr_b, dst);
    const bool backward = l.host_b == from_host && same_ip(l.addr_b, src) &&
                          l.host_a == to_host && same_ip(l.addr_a, dst);
    if (forward || backward) {
      *index = i;
      return &l;
    }
  }
  return nullptr;
}

double Simulator::draw_uniform() {
  return static_cast<double>(splitmix64(rng_state_) >> 11) * 0x1.0p-53;
}

void Simulator::route(Host from, const session::OutgoingDatagram& dgram) {
  const uint16_t flow_id =
      static_cast<uint16_t>(((dgram.payload[0] & 0x7F) << 8) | dgram.payload[1]);
  const std::size_t wire_size =
      dgram.payload.size() >= session::NullCipher::TAG_SIZE
          ? dgram.payload.size() - session::NullCipher::TAG_SIZE
          : dgram.payload.size();

  std::size_t index = 0;
  const LinkModel* link = find_link(from, dgram.src, dgram.dst, &index);
  if (!link || !link->up) {
    trace_.push_back({now_, TraceKind::PacketLost, flow_id,
                      static_cast<double>(wire_size), from, false});
    return;
  }
  if (link->loss_prob > 0.0 && draw_uniform() < link->loss_prob) {
    trace_.push_back({now_, TraceKind::PacketLost, flow_id,
                      static_cast<double>(wire_size), from, false});
    return;
  }

  Delivery d;
  d.at = now_ + link->one_way_delay_ms;
  d.seq = next_delivery_seq_++;
  d.to = from == Host::Client ? Host::Server : Host::Client;
  d.dgram = session::IncomingDatagram{dgram.src, dgram.dst, dgram.payload};
  d.link_index = index;
  d.wire_size = wire_size;
  d.flow_id = flow_id;
  deliveries_.push_back(std::move(d));
  std::push_heap(deliveries_.begin(), deliveries_.end(),
                 [](const Delivery& a, const Delivery& b) {
                   return a.at > b.at || (a.at == b.at && a.seq > b.seq);
                 });
}

void Simulator::deliver(const Delivery& d) {
  const Host sender = d.to == Host::Client ? Host::Server : Host::Client;
  // A link that went down mid-flight loses its packets.
  if (!sc_.links[d.link_index].up) {
    trace_.push_back({now_, TraceKind::PacketLost, d.flow_id,
                      static_cast<double>(d.wire_size), sender, false});
    return;
  }
  trace_.push_back({now_, TraceKind::PacketDelivered, d.flow_id,
                    static_cast<double>(d.wire_size), sender, false});

  auto result = endpoint(d.to).receive(d.dgram, now_);
  for (const auto& action : result.actions) {
    route(d.to, action);
  }
  if (d.to == Host::Server && result.app_payload && !result.app_payload->empty()) {
    // the scripted server application echoes every data payload
    try {
      route(Host::Server, server_->send_data(*result.app_payload, now_));
    } catch (const session::NoFlowError&) {
    }
  }
}

void Simulator::pump(Host who) {
  session::Endpoint& ep = endpoint(who);
  const auto wakeup = ep.next_wakeup();
  if (!wakeup || *wakeup > now_) {
    return;
  }
  for (const auto& dgram : ep.advance(now_)) {
    route(who, dgram);
  }
  if (who == Host::Client && client_->port_hop_pending()) {
    client_->port_hop(next_hop_port_++, now_);
  }
}

void Simulator::send_scripted_data(Host who, std::size_t n_bytes) {
  std::vector<uint8_t> payload(n_bytes);
  for (std::size_t i = 0; i < n_bytes; i++) {
    payload[i] = static_cast<uint8_t>('a' + (i % 26));
  }
  try {
    route(who, endpoint(who).send_data(payload, now_));
  } catch (const session::NoFlowError&) {
    // a server with no traffic yet has no flow to speak on
  }
}

void Simulator::process_event(const ScenarioEvent& ev) {
  switch (ev.kind) {
    case ScenarioEvent::Kind::SetDelay:
    case ScenarioEvent::Kind::SetLoss:
    case ScenarioEvent::Kind::SetUp:
      for (auto& l : sc_.links) {
        if (l.id != ev.link_id) continue;
        if (ev.kind == ScenarioEvent::Kind::SetDelay) {
          l.one_way_delay_ms = ev.delay_ms;
        } else if (ev.kind == ScenarioEvent::Kind::SetLoss) {
          l.loss_prob = ev.loss;
        } else {
          l.up = ev.up;
        }
        break;
      }
      break;
    case ScenarioEvent::Kind::SendData:
      send_scripted_data(ev.host == sc_.client.name ? Host::Client : Host::Server,
                         ev.n_bytes);
      break;
    case ScenarioEvent::Kind::AddAddress:
      endpoint(ev.host == sc_.client.name ? Host::Client : Host::Server)
          .add_local_address(ev.addr, now_);
      break;
    case ScenarioEvent::Kind::RemoveAddress:
      endpoint(ev.host == sc_.client.name ? Host::Client : Host::Server)
          .remove_local_address(ev.addr, now_);
      break;
  }
}

std::vector<TraceRecord> Simulator::run() {
  const ClockMs end = sc_.run_until_ms != 0
                          ? sc_.run_until_ms
                          : (sc_.events.empty() ? 2000 : sc_.events.back().at + 2000);
  std::size_t next_event = 0;

  auto heap_cmp = [](const Delivery& a, const Delivery& b) {
    return a.at > b.at || (a.at == b.at && a.seq > b.seq);
  };

  while (true) {
    std::optional<ClockMs> next;
    auto consider = [&next](std::optional<ClockMs> t) {
      if (t && (!next || *t < *next)) next = t;
    };
    std::optional<ClockMs> t_scenario;
    if (next_event < sc_.events.size()) t_scenario = sc_.events[next_event].at;
    std::optional<ClockMs> t_delivery;
    if (!deliveries_.empty()) t_delivery = deliveries_.front().at;
    consider(t_scenario);
    consider(t_delivery);
    consider(client_->next_wakeup());
    consider(server_->next_wakeup());

    if (!next || *next > end) {
      break;
    }
    now_ = *next;

    if (t_scenario && *t_scenario == now_) {
      process_event(sc_.events[next_event++]);
      continue;
    }
    if (t_delivery && *t_delivery == now_) {
      std::pop_heap(deliveries_.begin(), deliveries_.end(), heap_cmp);
      Delivery d = std::move(deliveries_.back());
      deliveries_.pop_back();
      deliver(d);
      continue;
    }
    pump(Host::Client);
    pump(Host::Server);
  }
  return std::move(trace_);
}

std::vector<TraceRecord> run(const Scenario& scenario, uint64_t seed) {
  Simulator sim(scenario, seed);
  return sim.run();
}

// ---------------------------------------------------------------------------
// probing overhead

double probe_overhead_bps(double frame_size_bytes, double interval_ms) {
  return frame_size_bytes * 1000.0 / interval_ms;
}

std::vector<OverheadRow> overhead_report(const std::vector<TraceRecord>& trace,
                                         double frame_overhead_bytes,
                                         ClockMs window_start,
                                         ClockMs window_end) {
  std::map<uint16_t, std::vector<ClockMs>> sends;
  for (const auto& r : trace) {
    if (r.kind != TraceKind::PacketSent || r.host != Host::Client || !r.is_probe) {
      continue;
    }
    if (r.at < window_start || r.at >= window_end) {
      continue;
    }
    sends[r.flow_id].push_back(r.at);
  }

  const double frame_size = frame_overhead_bytes + wire::HEADER_SIZE;
  std::vector<OverheadRow> rows;
  for (const auto& [flow_id, times] : sends) {
    OverheadRow row;
    row.flow_id = flow_id;
    row.probe_count = times.size();
    if (times.size() >= 2) {
      row.mean_interval_ms = static_cast<double>(times.back() - times.front()) /
                             static_cast<double>(times.size() - 1);
      row.bytes_per_sec = probe_overhead_bps(frame_size, row.mean_interval_ms);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mpudp::netsim
