#include "mpudp/session.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mpudp::session {

using flows::Flow;

NullCipher::NullCipher(std::span<const uint8_t> key) {
  if (!key.empty()) {
    for (std::size_t i = 0; i < TAG_SIZE; i++) {
      tag_[i] = key[i % key.size()];
    }
  }
}

std::vector<uint8_t> NullCipher::seal(const std::array<uint8_t, 8>&,
                                      std::span<const uint8_t> plaintext) const {
  std::vector<uint8_t> out(plaintext.begin(), plaintext.end());
  out.insert(out.end(), tag_.begin(), tag_.end());
  return out;
}

std::optional<std::vector<uint8_t>> NullCipher::open(
    const std::array<uint8_t, 8>&, std::span<const uint8_t> ciphertext) const {
  if (ciphertext.size() < TAG_SIZE) {
    return std::nullopt;
  }
  const std::size_t body = ciphertext.size() - TAG_SIZE;
  if (!std::equal(tag_.begin(), tag_.end(), ciphertext.begin() + body)) {
    return std::nullopt;
  }
  return std::vector<uint8_t>(ciphertext.begin(), ciphertext.begin() + body);
}

Endpoint::Endpoint(Role role, std::vector<AddressRecord> local_addrs,
                   EndpointConfig cfg)
    : role_(role), cfg_(std::move(cfg)), local_addrs_(std::move(local_addrs)) {
  if (!cfg_.cipher) {
    cfg_.cipher = std::make_shared<NullCipher>();
  }
}

Endpoint Endpoint::make_client(std::vector<AddressRecord> local_addrs,
                               const AddressRecord& server_addr,
                               EndpointConfig cfg, ClockMs now) {
  Endpoint ep(Role::Client, std::move(local_addrs), std::move(cfg));
  auto it = std::find_if(ep.local_addrs_.begin(), ep.local_addrs_.end(),
                         [&](const AddressRecord& a) {
                           return flows::filter_pair(a, server_addr);
                         });
  if (it == ep.local_addrs_.end()) {
    throw flows::FlowError("no local address compatible with the server address");
  }
  ep.remote_addrs_.push_back(server_addr);
  ep.table_.create_bootstrap(FlowKey{*it, server_addr}, now);
  ep.table_.rebuild(ep.local_addrs_, ep.remote_addrs_, now);
  ep.next_addr_request_at_ = now;
  ep.current_flow_ = 0;
  ep.last_heard_ = now;
  return ep;
}

Endpoint Endpoint::make_server(std::vector<AddressRecord> local_addrs,
                               EndpointConfig cfg) {
  return Endpoint(Role::Server, std::move(local_addrs), std::move(cfg));
}

OutgoingDatagram Endpoint::seal_packet(Flow& flow, uint16_t flags,
                                       std::span<const uint8_t> payload,
                                       ClockMs now,
                                       std::optional<uint64_t> seqno) {
  const uint64_t seq = seqno ? *seqno : flow.take_seqno();
  const wire::PacketHeader header(send_direction(), flow.id, seq, flags,
                                  rtt::make_timestamp(now),
                                  rtt::make_timestamp_reply(flow.ts_state, now));
  if (observer_) {
    observer_->on_packet_sent(header, wire::HEADER_SIZE + payload.size());
  }

  const auto hdr = wire::encode_header(header);
  std::array<uint8_t, 8> nonce;
  std::copy_n(hdr.begin(), 8, nonce.begin());

  std::vector<uint8_t> plaintext(hdr.begin() + 8, hdr.end());
  plaintext.insert(plaintext.end(), payload.begin(), payload.end());
  const auto sealed = cfg_.cipher->seal(nonce, plaintext);

  OutgoingDatagram d;
  d.src = flow.key.src;
  d.dst = flow.key.dst;
  d.payload.assign(nonce.begin(), nonce.end());
  d.payload.insert(d.payload.end(), sealed.begin(), sealed.end());
  return d;
}

flows::Flow* Endpoint::bootstrap_fallback() {
  if (table_.empty()) {
    return nullptr;
  }
  if (Flow* f = table_.find(0)) {
    return f;
  }
  return table_.find(table_.all().begin()->first);
}

void Endpoint::refresh_current_flow() {
  if (role_ != Role::Client) {
    return;
  }
  std::optional<uint16_t> chosen = table_.select_best();
  if (!chosen) {
    if (Flow* f = bootstrap_fallback()) {
      chosen = f->id;
    }
  }
  if (chosen != current_flow_) {
    current_flow_ = chosen;
    if (observer_ && chosen) {
      observer_->on_flow_selected(*chosen);
    }
  }
}

void Endpoint::note_heard(ClockMs now) {
  last_heard_ = now;
  consecutive_timeouts_ = 0;
  hop_pending_ = false;
}

OutgoingDatagram Endpoint::send_data(std::span<const uint8_t> app_payload,
                                     ClockMs now) {
  refresh_current_flow();
  Flow* flow = current_flow_ ? table_.find(*current_flow_) : nullptr;
  if (!flow) {
    throw NoFlowError();
  }
  if (role_ == Role::Server && pending_reply_ &&
      pending_reply_->flow_id == flow->id) {
    // the data packet carries the timestamps the probe reply would have
    pending_reply_.reset();
  }
  return seal_packet(*flow, 0, app_payload, now);
}

OutgoingDatagram Endpoint::request_addresses(ClockMs now) {
  refresh_current_flow();
  Flow* flow = current_flow_ ? table_.find(*current_flow_) : nullptr;
  if (!flow) {
    throw NoFlowError();
  }
  next_addr_request_at_ = now + cfg_.addr_request_interval_ms;
  return seal_packet(*flow, wire::ADDR_FLAG, {}, now);
}

void Endpoint::merge_remote_addresses(const std::vector<AddressRecord>& addrs,
                                      ClockMs now) {
  for (const auto& a : addrs) {
    if (std::find(remote_addrs_.begin(), remote_addrs_.end(), a) ==
        remote_addrs_.end()) {
      remote_addrs_.push_back(a);
    }
  }
  table_.rebuild(local_addrs_, remote_addrs_, now);
}

ReceiveResult Endpoint::receive(const IncomingDatagram& dgram, ClockMs now) {
  ReceiveResult result;
  const auto& buf = dgram.payload;
  if (buf.size() < 8) {
    return result;
  }
  std::array<uint8_t, 8> nonce;
  std::copy_n(buf.begin(), 8, nonce.begin());

  const auto plain =
      cfg_.cipher->open(nonce, std::span(buf).subspan(8));
  if (!plain || plain->size() < 6) {
    return result;  // failed authentication or truncated: drop silently
  }

  std::array<uint8_t, wire::HEADER_SIZE> hdr_bytes;
  std::copy_n(nonce.begin(), 8, hdr_bytes.begin());
  std::copy_n(plain->begin(), 6, hdr_bytes.begin() + 8);
  wire::PacketHeader header;
  try {
    header = wire::decode_header(hdr_bytes);
  } catch (const wire::WireError&) {
    return result;  // malformed flags: drop
  }

  // Only accept packets addressed to our role (no reflection).
  const auto expected = role_ == Role::Client ? wire::Direction::ToClient
                                              : wire::Direction::ToServer;
  if (header.direction != expected) {
    return result;
  }

  std::vector<uint8_t> payload(plain->begin() + 6, plain->end());

  Flow* flow = table_.find(header.flow_id);
  if (!flow) {
    if (role_ == Role::Client) {
      return result;  // the client allocates flow IDs; unknown means bogus
    }
    flow = &table_.learn(header.flow_id, FlowKey{dgram.dst, dgram.src}, now);
  }

  const bool in_order = flow->in_order(header.seqno);
  if (in_order) {
    if (role_ == Role::Server) {
      // Track the client across roaming and port hops.
      const FlowKey observed{dgram.dst, dgram.src};
      if (!(flow->key == observed)) {
        flow->key = observed;
      }
    }
    const auto effects = flows::on_in_order_receipt(*flow, header, now);
    if (effects.rtt_sample_ms && observer_) {
      observer_->on_srtt_update(flow->id, flow->estimator.srtt());
    }
    note_heard(now);
    if (role_ == Role::Server && header.is_data()) {
      current_flow_ = flow->id;
    }
  }

  if (header.is_probe()) {
    if (role_ == Role::Server && in_order) {
      if (cfg_.max_delack_ms <= 0) {
        result.actions.push_back(seal_packet(*flow, wire::PROBE_FLAG, {}, now));
      } else {
        if (pending_reply_ && pending_reply_->flow_id != flow->id) {
          // flush the other flow's reply early rather than lose it
          if (Flow* other = table_.find(pending_reply_->flow_id)) {
            result.actions.push_back(
                seal_packet(*other, wire::PROBE_FLAG, {}, now));
          }
          pending_reply_.reset();
        }
        if (!pending_reply_) {
          pending_reply_ = PendingReply{
              flow->id,
              now + static_cast<ClockMs>(std::llround(cfg_.max_delack_ms))};
        }
      }
    }
    // client side: a probe reply carries only timestamps, handled above
  } else if (header.is_addr()) {
    if (role_ == Role::Server) {
      // Address requests are honored in-order only (amplification guard).
      if (in_order) {
        const auto list = wire::encode_address_list(local_addrs_);
        result.actions.push_back(
            seal_packet(*flow, wire::ADDR_FLAG, list, now));
      }
    } else {
      try {
        merge_remote_addresses(wire::decode_address_list(payload), now);
      } catch (const wire::WireError&) {
        // malformed address list: drop
      }
    }
  } else {
    // data: the payload is delivered even out-of-order
    result.app_payload = std::move(payload);
  }

  refresh_current_flow();
  return result;
}

std::optional<ClockMs> Endpoint::next_wakeup() const {
  std::optional<ClockMs> wakeup;
  auto consider = [&wakeup](ClockMs t) {
    if (!wakeup || t < *wakeup) wakeup = t;
  };
  if (role_ == Role::Client) {
    if (auto d = table_.next_probe_deadline()) consider(*d);
    if (next_addr_request_at_) consider(*next_addr_request_at_);
  } else if (pending_reply_) {
    consider(pending_reply_->due_at);
  }
  return wakeup;
}

std::vector<OutgoingDatagram> Endpoint::advance(ClockMs now) {
  std::vector<OutgoingDatagram> out;
  if (role_ == Role::Client) {
    if (next_addr_request_at_ && now >= *next_addr_request_at_) {
      out.push_back(request_addresses(now));
    }
    for (const auto& e : table_.on_timer(now, cfg_.max_delack_ms)) {
      Flow* flow = table_.find(e.flow_id);
      if (e.idle_increment) {
        if (observer_) {
          observer_->on_idle_increment(e.flow_id, *e.idle_increment);
        }
        // Count expiries only while nothing in-order has been heard on
        // any flow for at least the expiring flow's dRTO.
        if (static_cast<double>(now - last_heard_) >= e.drto_at_expiry) {
          if (++consecutive_timeouts_ >= HOP_TIMEOUT_THRESHOLD) {
            hop_pending_ = true;
          }
        }
      }
      out.push_back(seal_packet(*flow, wire::PROBE_FLAG, {}, now, e.seqno));
    }
  } else if (pending_reply_ && now >= pending_reply_->due_at) {
    Flow* flow = table_.find(pending_reply_->flow_id);
    pending_reply_.reset();
    if (flow) {
      out.push_back(seal_packet(*flow, wire::PROBE_FLAG, {}, now));
    }
  }
  refresh_current_flow();
  return out;
}

void Endpoint::port_hop(uint16_t new_port, ClockMs now) {
  if (role_ != Role::Client || local_addrs_.empty()) {
    return;
  }
  for (const auto& a : local_addrs_) {
    if (std::find(retained_ports_.begin(), retained_ports_.end(), a.port) ==
        retained_ports_.end()) {
      retained_ports_.push_back(a.port);
    }
  }
  while (retained_ports_.size() > RETAINED_PORT_COUNT) {
    retained_ports_.erase(retained_ports_.begin());
  }
  for (auto& a : local_addrs_) {
    a.port = new_port;
  }
  table_.update_local_port(new_port);
  consecutive_timeouts_ = 0;
  hop_pending_ = false;
  (void)now;
}

void Endpoint::set_local_addresses(std::vector<AddressRecord> addrs, ClockMs now) {
  local_addrs_ = std::move(addrs);
  if (role_ == Role::Client) {
    table_.rebuild(local_addrs_, remote_addrs_, now);
    refresh_current_flow();
  }
}

void Endpoint::add_local_address(const AddressRecord& addr, ClockMs now) {
  if (std::find(local_addrs_.begin(), local_addrs_.end(), addr) !=
      local_addrs_.end()) {
    return;
  }
  auto addrs = local_addrs_;
  addrs.push_back(addr);
  set_local_addresses(std::move(addrs), now);
}

void Endpoint::remove_local_address(const AddressRecord& addr, ClockMs now) {
  auto addrs = local_addrs_;
  addrs.erase(std::remove_if(addrs.begin(), addrs.end(),
                             [&](const AddressRecord& a) {
                               return a.family == addr.family &&
                                      a.addr == addr.addr;
                             }),
              addrs.end());
  set_local_addresses(std::move(addrs), now);
}

}  // namespace mpudp::session
