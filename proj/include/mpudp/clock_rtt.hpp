#pragma once

#include <cmath>
#include <cstdint>
#include <optional>

namespace mpudp::rtt {

/* Local clock, milliseconds.  Sessions use a monotonic zero-based clock. */
using ClockMs = std::uint64_t;

/* "no timestamp yet" sentinel in the 16-bit timestamp-reply field */
constexpr uint16_t TIMESTAMP_NONE = 0xFFFF;

/* Samples at least this large are ambiguous under 16-bit wrap. */
constexpr double WRAP_GUARD_MS = 32000.0;

constexpr double BOOTSTRAP_RTO_MS = 1000.0;
constexpr double MIN_PROBE_INTERVAL_MS = 500.0;
constexpr double MAX_PROBE_INTERVAL_MS = 10000.0;

inline uint16_t make_timestamp(ClockMs now) {
  return static_cast<uint16_t>(now & 0xFFFF);
}

/* Last timestamp received from the peer and when it arrived locally.
 * Updated only by in-order receptions. */
struct TimestampState {
  bool valid = false;
  uint16_t last_remote_ts = 0;
  ClockMs last_remote_ts_arrival = 0;

  void record(uint16_t remote_ts, ClockMs now) {
    valid = true;
    last_remote_ts = remote_ts;
    last_remote_ts_arrival = now;
  }

  void reset() { *this = TimestampState{}; }
};

/* Echoes the peer's timestamp advanced by how long we held it,
 * or TIMESTAMP_NONE if we have not heard a timestamp yet. */
inline uint16_t make_timestamp_reply(const TimestampState& state, ClockMs now) {
  if (!state.valid) {
    return TIMESTAMP_NONE;
  }
  const uint64_t held = now - state.last_remote_ts_arrival;
  return static_cast<uint16_t>((state.last_remote_ts + held) & 0xFFFF);
}

/* RTT from an echoed timestamp: (now - tsr) mod 2^16, rejected when the
 * result is large enough to be wrap-ambiguous. */
inline std::optional<double> rtt_sample(uint16_t timestamp_reply, ClockMs now) {
  if (timestamp_reply == TIMESTAMP_NONE) {
    return std::nullopt;
  }
  const uint16_t diff =
      static_cast<uint16_t>(make_timestamp(now) - timestamp_reply);
  if (diff >= WRAP_GUARD_MS) {
    return std::nullopt;
  }
  return static_cast<double>(diff);
}

/*
 * Smoothed RTT / deviation (TCP-style exponential means, alpha = 1/8,
 * beta = 1/4) plus the accumulated idle time of an unresponsive flow.
 * idle_time participates in both the selection metric and the RTO, and
 * is zeroed by any valid sample.
 */
class RttEstimator {
public:
  RttEstimator() = default;

  /* Resume from known state (diagnostics, tests). */
  RttEstimator(double srtt_ms, double srttvar_ms, double idle_ms)
      : has_sample_(true), srtt_(srtt_ms), srttvar_(srttvar_ms),
        idle_time_(idle_ms) {}

  bool has_sample() const { return has_sample_; }
  double srtt() const { return srtt_; }
  double srttvar() const { return srttvar_; }
  double idle_time() const { return idle_time_; }
  double selection_metric() const { return srtt_ + idle_time_; }

  void update(double sample_ms) {
    if (!has_sample_) {
      srtt_ = sample_ms;
      srttvar_ = sample_ms / 2.0;
      has_sample_ = true;
    } else {
      srttvar_ = (1.0 - BETA) * srttvar_ + BETA * std::abs(srtt_ - sample_ms);
      srtt_ = (1.0 - ALPHA) * srtt_ + ALPHA * sample_ms;
    }
    idle_time_ = 0.0;
  }

  /* (SRTT + idle_time) + 4 x SRTTVAR; before the first sample the
   * bootstrap constant stands in for SRTT + 4 x SRTTVAR. */
  double rto() const {
    if (!has_sample_) {
      return BOOTSTRAP_RTO_MS + idle_time_;
    }
    return (srtt_ + idle_time_) + 4.0 * srttvar_;
  }

  double drto(double max_delack_ms) const { return rto() + max_delack_ms; }

  double probe_interval(double max_delack_ms) const {
    const double d = drto(max_delack_ms);
    if (d < MIN_PROBE_INTERVAL_MS) return MIN_PROBE_INTERVAL_MS;
    if (d > MAX_PROBE_INTERVAL_MS) return MAX_PROBE_INTERVAL_MS;
    return d;
  }

  /* One expiry event adds exactly one RTO (computed with the
   * pre-update idle time), however late the event loop fired. */
  double on_rto_expiry() {
    const double increment = rto();
    idle_time_ += increment;
    return increment;
  }

  void reset() { *this = RttEstimator{}; }

  bool operator==(const RttEstimator&) const = default;

private:
  static constexpr double ALPHA = 1.0 / 8.0;
  static constexpr double BETA = 1.0 / 4.0;

  bool has_sample_ = false;
  double srtt_ = 0.0;
  double srttvar_ = 0.0;
  double idle_time_ = 0.0;
};

}  // namespace mpudp::rtt
