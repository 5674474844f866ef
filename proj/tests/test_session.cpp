#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "mpudp/session.hpp"
#include "mpudp/transport.hpp"

using namespace mpudp;
using rtt::ClockMs;
using session::Endpoint;
using session::IncomingDatagram;
using session::OutgoingDatagram;
using wire::AddressRecord;

namespace {

AddressRecord A(const char* ip, uint16_t port) {
  return AddressRecord::from_string(ip, port);
}

IncomingDatagram incoming(const OutgoingDatagram& d) {
  return IncomingDatagram{d.src, d.dst, d.payload};
}

/* Opens a null-cipher datagram for inspection. */
struct Decoded {
  wire::PacketHeader header;
  std::vector<uint8_t> payload;
};

Decoded decode(const OutgoingDatagram& d) {
  session::NullCipher cipher;
  std::array<uint8_t, 8> nonce;
  std::copy_n(d.payload.begin(), 8, nonce.begin());
  auto plain = cipher.open(nonce, std::span(d.payload).subspan(8));
  REQUIRE(plain.has_value());
  REQUIRE(plain->size() >= 6);
  std::array<uint8_t, 14> hdr;
  std::copy_n(nonce.begin(), 8, hdr.begin());
  std::copy_n(plain->begin(), 6, hdr.begin() + 8);
  Decoded out;
  out.header = wire::decode_header(hdr);
  out.payload.assign(plain->begin() + 6, plain->end());
  return out;
}

std::size_t wire_size(const OutgoingDatagram& d) {
  return d.payload.size() - session::NullCipher::TAG_SIZE;
}

Endpoint make_test_client(ClockMs now = 0) {
  return Endpoint::make_client({A("10.0.0.1", 7001), A("10.0.1.1", 7001)},
                               A("10.9.0.1", 6001), {}, now);
}

Endpoint make_test_server() {
  return Endpoint::make_server({A("10.9.0.1", 6001), A("10.9.1.1", 6001)}, {});
}

/* Delivers every action both ways until the exchange settles. */
void settle(Endpoint& client, Endpoint& server, std::vector<OutgoingDatagram> out,
            bool from_client, ClockMs now) {
  std::vector<std::pair<bool, OutgoingDatagram>> queue;
  for (auto& d : out) queue.emplace_back(from_client, std::move(d));
  while (!queue.empty()) {
    auto [fc, d] = std::move(queue.front());
    queue.erase(queue.begin());
    auto result = (fc ? server : client).receive(incoming(d), now);
    for (auto& a : result.actions) queue.emplace_back(!fc, std::move(a));
  }
}

}  // namespace

TEST_CASE("client bootstrap: flow 0 plus compatible pairs, addr request first") {
  Endpoint client = make_test_client();
  CHECK(client.flow_table().size() == 2);  // (l0,s0)=0, (l1,s0)=1
  CHECK(client.flow_table().find(0)->key.src == A("10.0.0.1", 7001));
  CHECK(client.current_flow() == 0);

  CHECK(client.next_wakeup() == 0);
  auto out = client.advance(0);
  REQUIRE(out.size() >= 2);
  const auto first = decode(out[0]);
  CHECK(first.header.is_addr());
  CHECK(first.payload.empty());
  CHECK(wire_size(out[0]) == 14);  // header only, like a probe

  std::set<uint16_t> probed;
  for (std::size_t i = 1; i < out.size(); i++) {
    const auto d = decode(out[i]);
    CHECK(d.header.is_probe());
    CHECK(wire_size(out[i]) == 14);
    probed.insert(d.header.flow_id);
  }
  CHECK(probed == std::set<uint16_t>{0, 1});

  // idempotent for the same instant
  CHECK(client.advance(0).empty());
}

TEST_CASE("client without a compatible local address cannot bootstrap") {
  CHECK_THROWS_AS(Endpoint::make_client({A("2001:db8::1", 7001)},
                                        A("10.9.0.1", 6001), {}, 0),
                  flows::FlowError);
}

TEST_CASE("address gathering grows the table to the filtered product") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();

  auto out = client.advance(0);
  settle(client, server, std::move(out), true, 5);

  // oracle: brute-force filtered cartesian product
  std::size_t expect = 0;
  for (const auto& l : client.local_addresses()) {
    for (const auto& r : server.local_addresses()) {
      if (flows::filter_pair(l, r)) expect++;
    }
  }
  CHECK(expect == 4);
  CHECK(client.flow_table().size() == expect);
  CHECK(client.remote_addresses().size() == 2);

  // existing flows were not modified by the merge
  CHECK(client.flow_table().find(0)->key.dst == A("10.9.0.1", 6001));
}

TEST_CASE("probe reply is delayed up to max_delack and is 14 octets") {
  session::EndpointConfig cfg;
  cfg.max_delack_ms = 100;
  Endpoint client = make_test_client();
  Endpoint server = Endpoint::make_server({A("10.9.0.1", 6001)}, cfg);

  auto out = client.advance(0);
  // deliver only the probe on flow 0 (skip the addr request at out[0])
  const auto probe = decode(out[1]);
  REQUIRE(probe.header.is_probe());
  REQUIRE(probe.header.flow_id == 0);
  auto result = server.receive(incoming(out[1]), 10);
  CHECK(result.actions.empty());  // reply deferred
  CHECK(!result.app_payload);
  CHECK(server.next_wakeup() == 110);

  CHECK(server.advance(109).empty());
  auto replies = server.advance(110);
  REQUIRE(replies.size() == 1);
  const auto reply = decode(replies[0]);
  CHECK(reply.header.is_probe());
  CHECK(wire_size(replies[0]) == 14);
  CHECK(reply.header.flow_id == 0);

  // wire rtt is 10 up + 30 down; the echo corrects for the 100 ms hold
  client.receive(incoming(replies[0]), 140);
  CHECK(client.flow_table().find(0)->estimator.srtt() == 40.0);
}

TEST_CASE("data pending on the same flow cancels the delayed reply") {
  session::EndpointConfig cfg;
  cfg.max_delack_ms = 100;
  Endpoint client = make_test_client();
  Endpoint server = Endpoint::make_server({A("10.9.0.1", 6001)}, cfg);

  auto out = client.advance(0);
  // data first so the server's current flow exists
  auto data = client.send_data(std::vector<uint8_t>{'h', 'i'}, 1);
  server.receive(incoming(data), 5);
  server.receive(incoming(out[1]), 10);  // probe on flow 0
  REQUIRE(server.next_wakeup() == 110);

  auto echo = server.send_data(std::vector<uint8_t>{'h', 'i'}, 20);
  CHECK(!server.next_wakeup());  // piggybacked: pending reply cancelled
  const auto d = decode(echo);
  CHECK(d.header.timestamp_reply != rtt::TIMESTAMP_NONE);
}

TEST_CASE("a second probe on another flow flushes the pending reply early") {
  session::EndpointConfig cfg;
  cfg.max_delack_ms = 100;
  Endpoint client = make_test_client();
  Endpoint server = Endpoint::make_server({A("10.9.0.1", 6001)}, cfg);

  auto out = client.advance(0);  // [addr, probe flow0, probe flow1]
  REQUIRE(out.size() == 3);
  auto r1 = server.receive(incoming(out[1]), 10);
  CHECK(r1.actions.empty());
  auto r2 = server.receive(incoming(out[2]), 12);
  REQUIRE(r2.actions.size() == 1);  // flow 0's reply, flushed
  CHECK(decode(r2.actions[0]).header.flow_id == decode(out[1]).header.flow_id);
  // flow 1's reply still pending
  CHECK(server.next_wakeup() == 112);
}

TEST_CASE("out-of-order data delivers payload but touches no control state") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();

  // client sends two data packets; deliver them in reverse order
  auto d1 = client.send_data(std::vector<uint8_t>{'1'}, 10);
  auto d2 = client.send_data(std::vector<uint8_t>{'2'}, 20);

  auto r2 = server.receive(incoming(d2), 30);
  REQUIRE(r2.app_payload);
  CHECK(*r2.app_payload == std::vector<uint8_t>{'2'});
  CHECK(server.current_flow() == decode(d2).header.flow_id);

  const auto table_before = server.flow_table();
  auto r1 = server.receive(incoming(d1), 40);
  REQUIRE(r1.app_payload);
  CHECK(*r1.app_payload == std::vector<uint8_t>{'1'});
  CHECK(server.flow_table() == table_before);  // no estimator/seqno change
  CHECK(server.current_flow() == decode(d2).header.flow_id);
}

TEST_CASE("out-of-order address request is ignored entirely") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();

  auto newer = client.send_data(std::vector<uint8_t>{'x'}, 5);
  auto request = client.request_addresses(10);

  server.receive(incoming(newer), 20);  // raises max seqno past the request
  auto result = server.receive(incoming(request), 25);
  CHECK(result.actions.empty());
  CHECK(!result.app_payload);
}

TEST_CASE("replaying one captured address request yields exactly one reply") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();

  auto request = client.request_addresses(0);
  std::size_t replies = 0;
  for (int i = 0; i < 100; i++) {
    auto result = server.receive(incoming(request), 5 + i);
    for (const auto& a : result.actions) {
      CHECK(decode(a).header.is_addr());
      replies++;
    }
  }
  CHECK(replies == 1);
}

TEST_CASE("addr reply payload is a pure address list") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();
  auto request = client.request_addresses(0);
  auto result = server.receive(incoming(request), 5);
  REQUIRE(result.actions.size() == 1);
  const auto reply = decode(result.actions[0]);
  CHECK(reply.header.is_addr());
  const auto listed = wire::decode_address_list(reply.payload);
  CHECK(listed == server.local_addresses());
}

TEST_CASE("client drops unknown flow ids, bad direction, bad auth") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();

  // learn flow 0 on the server and get a valid reply skeleton
  client.send_data(std::vector<uint8_t>{'x'}, 0);
  auto probe_out = client.advance(0);
  server.receive(incoming(probe_out[1]), 1);
  auto replies = server.advance(101);
  REQUIRE(replies.size() == 1);

  // unknown flow id: flip a flow-id bit in the nonce (tag stays valid)
  auto bogus = replies[0];
  bogus.payload[1] ^= 0x10;
  // wrong direction: a client-direction packet reflected back
  auto reflected = client.send_data(std::vector<uint8_t>{'y'}, 150);
  // corrupted tag: dropped silently
  auto tampered = replies[0];
  tampered.payload.back() ^= 0xFF;

  const auto table_before = client.flow_table();
  client.receive(incoming(bogus), 200);
  CHECK(client.flow_table() == table_before);
  client.receive(incoming(reflected), 202);
  CHECK(client.flow_table() == table_before);
  client.receive(incoming(tampered), 203);
  CHECK(client.flow_table() == table_before);

  // both flag bits set: malformed, dropped; craft via raw null-cipher seal
  auto valid = decode(replies[0]);
  wire::PacketHeader h = valid.header;
  h.flags = wire::PROBE_FLAG | wire::ADDR_FLAG;
  const auto hdr = wire::encode_header(h);
  std::array<uint8_t, 8> nonce;
  std::copy_n(hdr.begin(), 8, nonce.begin());
  session::NullCipher cipher;
  std::vector<uint8_t> plain(hdr.begin() + 8, hdr.end());
  auto sealed = cipher.seal(nonce, plain);
  OutgoingDatagram crafted = replies[0];
  crafted.payload.assign(nonce.begin(), nonce.end());
  crafted.payload.insert(crafted.payload.end(), sealed.begin(), sealed.end());
  client.receive(incoming(crafted), 204);
  CHECK(client.flow_table() == table_before);
}

TEST_CASE("server learns flows implicitly and keeps them for the session") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();
  CHECK(server.flow_table().empty());
  CHECK_THROWS_AS(server.send_data(std::vector<uint8_t>{'x'}, 0),
                  session::NoFlowError);

  auto d = client.send_data(std::vector<uint8_t>{'x'}, 0);
  server.receive(incoming(d), 3);
  CHECK(server.flow_table().size() == 1);
  const flows::Flow* f = server.flow_table().find(0);
  REQUIRE(f != nullptr);
  CHECK(f->key.src == A("10.9.0.1", 6001));   // our side
  CHECK(f->key.dst == A("10.0.0.1", 7001));   // the client
  CHECK(server.current_flow() == 0);
}

TEST_CASE("server replies only to in-order probes") {
  Endpoint client = make_test_client();
  session::EndpointConfig cfg;
  cfg.max_delack_ms = 0;  // immediate replies for this test
  Endpoint server = Endpoint::make_server({A("10.9.0.1", 6001)}, cfg);

  auto out = client.advance(0);  // [addr, probe0, probe1]
  auto newer = client.send_data(std::vector<uint8_t>{'x'}, 1);
  server.receive(incoming(newer), 2);  // flow 0 max seqno moves past the probe
  auto r = server.receive(incoming(out[1]), 3);
  CHECK(r.actions.empty());  // stale probe
  auto r2 = server.receive(incoming(out[2]), 4);  // flow 1 probe is in-order
  CHECK(r2.actions.size() == 1);
}

TEST_CASE("client current flow tracks select_best with bootstrap fallback") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();
  CHECK(client.current_flow() == 0);  // no samples yet: bootstrap

  auto out = client.advance(0);
  settle(client, server, std::move(out), true, 5);
  CHECK(client.flow_table().select_best().has_value());
  CHECK(client.current_flow() == client.flow_table().select_best());

  // distinct path latencies: the faster flow wins
  Endpoint fresh = make_test_client();
  session::EndpointConfig immediate;
  immediate.max_delack_ms = 0;
  Endpoint srv2 = Endpoint::make_server(
      {A("10.9.0.1", 6001), A("10.9.1.1", 6001)}, immediate);
  auto probes = fresh.advance(0);  // [addr, probe flow0, probe flow1]
  REQUIRE(probes.size() == 3);
  auto r0 = srv2.receive(incoming(probes[1]), 5);
  REQUIRE(r0.actions.size() == 1);
  auto r1 = srv2.receive(incoming(probes[2]), 5);
  REQUIRE(r1.actions.size() == 1);
  fresh.receive(incoming(r1.actions[0]), 30);   // flow 1 replies fast
  fresh.receive(incoming(r0.actions[0]), 605);  // flow 0 replies slowly

  REQUIRE(fresh.flow_table().find(1)->estimator.has_sample());
  CHECK(fresh.flow_table().find(0)->estimator.srtt() >
        fresh.flow_table().find(1)->estimator.srtt());
  CHECK(fresh.current_flow() == fresh.flow_table().select_best());
  CHECK(fresh.current_flow() == 1);
}

TEST_CASE("next_wakeup is the earliest pending deadline") {
  Endpoint client = make_test_client();
  // after construction: addr request due immediately
  CHECK(client.next_wakeup() == 0);
  client.advance(0);
  // probes outstanding now; expiry = bootstrap rto (1000 ms)
  CHECK(client.next_wakeup() == 1000);

  Endpoint idle_server = make_test_server();
  CHECK(!idle_server.next_wakeup());
}

TEST_CASE("port hop: trigger after three qualifying expiries in silence") {
  Endpoint client = make_test_client();  // two flows -> faster accumulation
  client.advance(0);
  CHECK(!client.port_hop_pending());

  // never deliver anything; walk through expiries
  for (ClockMs t = 0; t <= 20000 && !client.port_hop_pending(); t += 1) {
    auto wake = client.next_wakeup();
    if (wake && *wake <= t) client.advance(t);
  }
  CHECK(client.port_hop_pending());
}

TEST_CASE("in-order receipt resets the hop countdown") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();
  client.advance(0);

  for (ClockMs t = 0; t <= 6900; t += 1) {
    auto wake = client.next_wakeup();
    if (wake && *wake <= t) client.advance(t);
  }
  CHECK(!client.port_hop_pending());  // counter at 2 (expiries at 3000, 7000)

  // a late reply on any flow resets the count
  auto data = client.send_data(std::vector<uint8_t>{'x'}, 6901);
  server.receive(incoming(data), 6902);
  auto echo = server.send_data(std::vector<uint8_t>{'y'}, 6903);
  client.receive(incoming(echo), 6904);

  for (ClockMs t = 6905; t <= 16000; t += 1) {
    auto wake = client.next_wakeup();
    if (wake && *wake <= t) client.advance(t);
  }
  CHECK(!client.port_hop_pending());
}

TEST_CASE("port hop preserves estimators and updates source ports") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();
  auto out = client.advance(0);
  settle(client, server, std::move(out), true, 5);

  const auto best_before = client.flow_table().select_best();
  const double srtt_before = client.flow_table().find(0)->estimator.srtt();

  client.port_hop(7002, 100);
  CHECK(client.flow_table().select_best() == best_before);
  CHECK(client.flow_table().find(0)->estimator.srtt() == srtt_before);
  CHECK(client.flow_table().find(0)->key.src.port == 7002);
  CHECK(client.local_addresses()[0].port == 7002);
  REQUIRE(client.retained_ports().size() == 1);
  CHECK(client.retained_ports()[0] == 7001);

  // a reply addressed to the retained old port is still accepted
  auto data = client.send_data(std::vector<uint8_t>{'x'}, 101);
  CHECK(data.src.port == 7002);
  server.receive(incoming(data), 102);
  auto echo = server.send_data(std::vector<uint8_t>{'y'}, 103);
  auto stale_echo = echo;
  stale_echo.dst.port = 7001;  // delivered via the old socket
  auto result = client.receive(incoming(stale_echo), 104);
  REQUIRE(result.app_payload);
  CHECK(*result.app_payload == std::vector<uint8_t>{'y'});
}

TEST_CASE("server follows the client across a port hop") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();
  auto d1 = client.send_data(std::vector<uint8_t>{'a'}, 0);
  server.receive(incoming(d1), 1);
  CHECK(server.flow_table().find(0)->key.dst.port == 7001);

  client.port_hop(7050, 10);
  auto d2 = client.send_data(std::vector<uint8_t>{'b'}, 11);
  server.receive(incoming(d2), 12);
  CHECK(server.flow_table().find(0)->key.dst.port == 7050);
  auto echo = server.send_data(std::vector<uint8_t>{'c'}, 13);
  CHECK(echo.dst.port == 7050);
}

TEST_CASE("nonces are never sealed twice per direction") {
  class RecordingCipher : public session::Cipher {
  public:
    std::vector<uint8_t> seal(const std::array<uint8_t, 8>& nonce,
                              std::span<const uint8_t> p) const override {
      CHECK(seen_.insert(nonce).second);
      return inner_.seal(nonce, p);
    }
    std::optional<std::vector<uint8_t>> open(
        const std::array<uint8_t, 8>& nonce,
        std::span<const uint8_t> c) const override {
      return inner_.open(nonce, c);
    }

  private:
    session::NullCipher inner_;
    mutable std::set<std::array<uint8_t, 8>> seen_;
  };

  session::EndpointConfig cfg;
  cfg.cipher = std::make_shared<RecordingCipher>();
  Endpoint client = Endpoint::make_client(
      {A("10.0.0.1", 7001), A("10.0.1.1", 7001)}, A("10.9.0.1", 6001), cfg, 0);
  Endpoint server = Endpoint::make_server(
      {A("10.9.0.1", 6001), A("10.9.1.1", 6001)}, cfg);

  ClockMs now = 0;
  for (int round = 0; round < 200; round++) {
    now += 97;
    auto wake = client.next_wakeup();
    if (wake && *wake <= now) {
      settle(client, server, client.advance(now), true, now);
    }
    settle(client, server, {client.send_data(std::vector<uint8_t>{'x'}, now)},
           true, now);
    auto swake = server.next_wakeup();
    if (swake && *swake <= now) {
      settle(client, server, server.advance(now), false, now);
    }
  }
}

TEST_CASE("keyed null ciphers interoperate only with matching keys") {
  const std::vector<uint8_t> key1 = {1, 2, 3};
  const std::vector<uint8_t> key2 = {9, 9};
  session::EndpointConfig c1;
  c1.cipher = std::make_shared<session::NullCipher>(key1);
  session::EndpointConfig c2;
  c2.cipher = std::make_shared<session::NullCipher>(key2);

  Endpoint client =
      Endpoint::make_client({A("10.0.0.1", 7001)}, A("10.9.0.1", 6001), c1, 0);
  Endpoint good = Endpoint::make_server({A("10.9.0.1", 6001)}, c1);
  Endpoint bad = Endpoint::make_server({A("10.9.0.1", 6001)}, c2);

  auto d = client.send_data(std::vector<uint8_t>{'x'}, 0);
  auto accepted = good.receive(incoming(d), 1);
  CHECK(accepted.app_payload);
  auto rejected = bad.receive(incoming(d), 1);
  CHECK(!rejected.app_payload);
  CHECK(bad.flow_table().empty());
}

TEST_CASE("reordered control stream: srtt matches the in-order prefix oracle") {
  Endpoint client = make_test_client();
  Endpoint server = make_test_server();
  // prime: the server must have heard the client to fill timestamp state
  auto d0 = client.send_data(std::vector<uint8_t>{'p'}, 0);
  server.receive(incoming(d0), 2);

  // server->client data at distinct times, delivered shuffled
  std::vector<OutgoingDatagram> batch;
  for (int i = 0; i < 40; i++) {
    batch.push_back(server.send_data(std::vector<uint8_t>{static_cast<uint8_t>(i)},
                                     10 + 7 * static_cast<ClockMs>(i)));
  }
  std::vector<std::size_t> order(batch.size());
  for (std::size_t i = 0; i < order.size(); i++) order[i] = i;
  std::mt19937_64 rng(123);
  std::shuffle(order.begin(), order.end(), rng);

  // capture flow 0 state before the batch for the oracle
  const flows::Flow* f0 = client.flow_table().find(0);
  bool o_has = f0->estimator.has_sample();
  double o_srtt = f0->estimator.srtt();
  double o_var = f0->estimator.srttvar();
  std::optional<uint64_t> o_max = f0->max_seqno_in;

  std::multiset<std::vector<uint8_t>> delivered;
  ClockMs t = 500;
  for (const auto idx : order) {
    t += 3;
    auto r = client.receive(incoming(batch[idx]), t);
    if (r.app_payload) delivered.insert(*r.app_payload);

    // oracle: independent record-max walk with its own EWMA
    const auto dec = decode(batch[idx]);
    if (!o_max || dec.header.seqno > *o_max) {
      o_max = dec.header.seqno;
      if (dec.header.timestamp_reply != rtt::TIMESTAMP_NONE) {
        const auto diff = static_cast<uint16_t>(
            rtt::make_timestamp(t) - dec.header.timestamp_reply);
        if (diff < 32000) {
          if (!o_has) {
            o_srtt = diff;
            o_var = diff / 2.0;
            o_has = true;
          } else {
            o_var = 0.75 * o_var + 0.25 * std::abs(o_srtt - diff);
            o_srtt = 0.875 * o_srtt + 0.125 * diff;
          }
        }
      }
    }
  }

  CHECK(delivered.size() == batch.size());
  CHECK(client.flow_table().find(0)->estimator.srtt() == o_srtt);
  CHECK(client.flow_table().find(0)->estimator.srttvar() == o_var);
  CHECK(client.flow_table().find(0)->max_seqno_in == o_max);
}
