#include "mpudp/flows.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace mpudp::flows {

bool filter_pair(const AddressRecord& src, const AddressRecord& dst) {
  return src.family == dst.family &&
         src.is_loopback() == dst.is_loopback() &&
         src.is_link_local() == dst.is_link_local();
}

ReceiptEffects on_in_order_receipt(Flow& f, const wire::PacketHeader& h, ClockMs now) {
  ReceiptEffects effects;
  f.max_seqno_in = h.seqno;
  f.ts_state.record(h.timestamp, now);
  if (auto sample = rtt::rtt_sample(h.timestamp_reply, now)) {
    f.estimator.update(*sample);
    effects.rtt_sample_ms = sample;
    if (f.probe_outstanding) {
      f.probe_outstanding.reset();
      effects.cleared_outstanding_probe = true;
    }
  }
  return effects;
}

ClockMs probe_expiry_deadline(const Flow& f) {
  const auto rto = static_cast<ClockMs>(std::ceil(f.estimator.rto()));
  return f.probe_outstanding->sent_at + std::max<ClockMs>(rto, 1);
}

Flow* FlowTable::find(uint16_t id) {
  auto it = flows_.find(id);
  return it == flows_.end() ? nullptr : &it->second;
}

const Flow* FlowTable::find(uint16_t id) const {
  auto it = flows_.find(id);
  return it == flows_.end() ? nullptr : &it->second;
}

Flow& FlowTable::create_bootstrap(const FlowKey& key, ClockMs now) {
  Flow f;
  f.id = 0;
  f.key = key;
  f.next_probe_at = now;
  return flows_.emplace(0, std::move(f)).first->second;
}

Flow& FlowTable::learn(uint16_t id, const FlowKey& key, ClockMs now) {
  Flow f;
  f.id = id;
  f.key = key;
  f.next_probe_at = now;
  return flows_.emplace(id, std::move(f)).first->second;
}

void FlowTable::rebuild(const std::vector<AddressRecord>& local,
                        const std::vector<AddressRecord>& remote, ClockMs now) {
  // Filtered cartesian product, in deterministic enumeration order.
  std::vector<FlowKey> product;
  std::set<FlowKey> product_set;
  for (const auto& s : local) {
    for (const auto& d : remote) {
      if (!filter_pair(s, d)) continue;
      FlowKey key{s, d};
      if (product_set.insert(key).second) {
        product.push_back(key);
      }
    }
  }

  std::set<FlowKey> covered;
  std::vector<uint16_t> reusable;  // ascending: std::map iteration order
  for (const auto& [id, flow] : flows_) {
    if (product_set.contains(flow.key)) {
      covered.insert(flow.key);
    } else {
      reusable.push_back(id);
    }
  }

  std::size_t next_reusable = 0;
  uint32_t next_fresh = 1;
  for (const auto& key : product) {
    if (covered.contains(key)) continue;
    if (next_reusable < reusable.size()) {
      Flow& f = flows_.at(reusable[next_reusable++]);
      // A reused ID names a different path: keep only the seqno counter.
      f.key = key;
      f.estimator.reset();
      f.ts_state.reset();
      f.max_seqno_in.reset();
      f.next_probe_at = now;
      f.probe_outstanding.reset();
    } else {
      while (flows_.contains(static_cast<uint16_t>(next_fresh))) {
        next_fresh++;
      }
      if (next_fresh > wire::MAX_FLOW_ID) {
        throw FlowIdExhausted();
      }
      learn(static_cast<uint16_t>(next_fresh), key, now);
    }
  }
}

std::optional<uint16_t> FlowTable::select_best() const {
  std::optional<uint16_t> best;
  double best_metric = 0.0;
  for (const auto& [id, flow] : flows_) {
    if (!flow.estimator.has_sample()) continue;
    const double metric = flow.estimator.selection_metric();
    if (!best || metric < best_metric) {
      best = id;
      best_metric = metric;
    }
  }
  return best;
}

std::optional<ClockMs> FlowTable::next_probe_deadline() const {
  std::optional<ClockMs> deadline;
  auto consider = [&deadline](ClockMs t) {
    if (!deadline || t < *deadline) deadline = t;
  };
  for (const auto& [id, flow] : flows_) {
    if (flow.probe_outstanding) {
      consider(probe_expiry_deadline(flow));
    } else {
      consider(flow.next_probe_at);
    }
  }
  return deadline;
}

void FlowTable::update_local_port(uint16_t new_port) {
  for (auto& [id, flow] : flows_) {
    flow.key.src.port = new_port;
  }
}

std::vector<ProbeEmission> FlowTable::on_timer(ClockMs now, double max_delack_ms) {
  std::vector<ProbeEmission> emissions;
  for (auto& [id, flow] : flows_) {
    ProbeEmission emission;
    if (flow.probe_outstanding) {
      if (now < probe_expiry_deadline(flow)) continue;
      emission.drto_at_expiry = flow.estimator.drto(max_delack_ms);
      // One increment per expiry event, however late we were called.
      emission.idle_increment = flow.estimator.on_rto_expiry();
    } else {
      if (now < flow.next_probe_at) continue;
    }
    emission.flow_id = id;
    emission.seqno = flow.take_seqno();
    flow.probe_outstanding = OutstandingProbe{emission.seqno, now};
    flow.next_probe_at =
        now + static_cast<ClockMs>(
                  std::llround(flow.estimator.probe_interval(max_delack_ms)));
    emissions.push_back(emission);
  }
  return emissions;
}

}  // namespace mpudp::flows
