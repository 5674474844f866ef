#include <CLI11.hpp>

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <string>

#include "mpudp/session.hpp"
#include "mpudp/transport.hpp"

using namespace mpudp;
using session::Endpoint;
using wire::AddressRecord;

namespace {

volatile sig_atomic_t g_stop = 0;

void on_sigint(int) { g_stop = 1; }

rtt::ClockMs now_ms() {
  using namespace std::chrono;
  static const auto start = steady_clock::now();
  return static_cast<rtt::ClockMs>(
      duration_cast<milliseconds>(steady_clock::now() - start).count());
}

std::vector<uint8_t> parse_hex_key(const std::string& hex) {
  std::vector<uint8_t> key;
  if (hex.size() % 2 != 0) {
    throw std::runtime_error("key must have an even number of hex digits");
  }
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    key.push_back(static_cast<uint8_t>(
        std::stoul(hex.substr(i, 2), nullptr, 16)));
  }
  return key;
}

class FlowLogger : public session::EndpointObserver {
public:
  explicit FlowLogger(bool enabled) : enabled_(enabled) {}

  void on_flow_selected(uint16_t flow_id) override {
    if (enabled_) {
      std::fprintf(stderr, "[%8llu ms] flow %u selected\n",
                   static_cast<unsigned long long>(now_ms()), flow_id);
    }
  }

  void on_srtt_update(uint16_t flow_id, double srtt_ms) override {
    if (enabled_) {
      std::fprintf(stderr, "[%8llu ms] flow %u srtt %.1f ms\n",
                   static_cast<unsigned long long>(now_ms()), flow_id, srtt_ms);
    }
  }

  void on_idle_increment(uint16_t flow_id, double inc_ms) override {
    if (enabled_) {
      std::fprintf(stderr, "[%8llu ms] flow %u idle +%.1f ms\n",
                   static_cast<unsigned long long>(now_ms()), flow_id, inc_ms);
    }
  }

private:
  bool enabled_;
};

void send_or_warn(transport::UdpTransport& t,
                  const session::OutgoingDatagram& d) {
  if (!t.send(d)) {
    // transient send failures are normal during outages; keep going
    std::fprintf(stderr, "send to %s failed: %s\n", d.dst.to_string().c_str(),
                 std::strerror(t.last_errno()));
  }
}

int run_server(uint16_t port, const session::EndpointConfig& cfg, bool log) {
  transport::UdpTransport t(port);
  auto locals = transport::UdpTransport::gather_local_addresses(t.current_port());
  if (locals.empty()) {
    std::cerr << "no local addresses found\n";
    return 1;
  }
  Endpoint server = Endpoint::make_server(locals, cfg);
  FlowLogger logger(log);
  server.set_observer(&logger);
  std::fprintf(stderr, "listening on port %u (%zu local addresses)\n",
               t.current_port(), locals.size());

  while (!g_stop) {
    int timeout = 1000;
    if (auto wake = server.next_wakeup()) {
      const auto now = now_ms();
      timeout = *wake > now ? static_cast<int>(std::min<rtt::ClockMs>(
                                  *wake - now, 1000))
                            : 0;
    }
    auto dgram = t.receive(timeout);
    const auto now = now_ms();
    if (dgram) {
      auto result = server.receive(*dgram, now);
      for (const auto& a : result.actions) {
        send_or_warn(t, a);
      }
      if (result.app_payload && !result.app_payload->empty()) {
        try {
          send_or_warn(t, server.send_data(*result.app_payload, now));
        } catch (const session::NoFlowError&) {
        }
      }
    }
    for (const auto& a : server.advance(now_ms())) {
      send_or_warn(t, a);
    }
  }
  std::fprintf(stderr, "shutting down\n");
  return 0;
}

int run_client(const std::string& target, const session::EndpointConfig& cfg,
               bool log) {
  const auto colon = target.rfind(':');
  if (colon == std::string::npos) {
    std::cerr << "--connect expects addr:port\n";
    return 1;
  }
  std::string host = target.substr(0, colon);
  if (host.size() >= 2 && host.front() == '[' && host.back() == ']') {
    host = host.substr(1, host.size() - 2);
  }
  const auto port = static_cast<uint16_t>(std::stoul(target.substr(colon + 1)));
  AddressRecord server_addr;
  try {
    server_addr = AddressRecord::from_string(host, port);
  } catch (const wire::WireError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  transport::UdpTransport t(0);
  auto locals = transport::UdpTransport::gather_local_addresses(t.current_port());
  Endpoint client = Endpoint::make_client(locals, server_addr, cfg, now_ms());
  FlowLogger logger(log);
  client.set_observer(&logger);
  std::fprintf(stderr, "%zu local addresses, %zu initial flows; type lines to send\n",
               locals.size(), client.flow_table().size());

  ::fcntl(STDIN_FILENO, F_SETFL, O_NONBLOCK);
  std::string pending_line;
  bool stdin_open = true;

  while (!g_stop) {
    int timeout = 50;
    if (auto wake = client.next_wakeup()) {
      const auto now = now_ms();
      timeout = *wake > now
                    ? static_cast<int>(std::min<rtt::ClockMs>(*wake - now, 50))
                    : 0;
    }
    auto dgram = t.receive(timeout);
    if (dgram) {
      auto result = client.receive(*dgram, now_ms());
      for (const auto& a : result.actions) {
        send_or_warn(t, a);
      }
      if (result.app_payload && !result.app_payload->empty()) {
        std::fwrite(result.app_payload->data(), 1, result.app_payload->size(),
                    stdout);
        std::fputc('\n', stdout);
        std::fflush(stdout);
      }
    }
    for (const auto& a : client.advance(now_ms())) {
      send_or_warn(t, a);
    }
    if (client.port_hop_pending()) {
      const uint16_t fresh = t.open_local_port();
      client.port_hop(fresh, now_ms());
      std::fprintf(stderr, "hopped to local port %u\n", fresh);
    }

    // drain whatever the user typed
    char buf[4096];
    ssize_t got;
    while (stdin_open && (got = ::read(STDIN_FILENO, buf, sizeof(buf))) != 0) {
      if (got < 0) {
        break;  // EAGAIN
      }
      for (ssize_t i = 0; i < got; i++) {
        if (buf[i] == '\n') {
          if (!pending_line.empty()) {
            const std::vector<uint8_t> payload(pending_line.begin(),
                                               pending_line.end());
            try {
              send_or_warn(t, client.send_data(payload, now_ms()));
            } catch (const session::NoFlowError&) {
            }
            pending_line.clear();
          }
        } else {
          pending_line.push_back(buf[i]);
        }
      }
    }
    if (stdin_open && got == 0) {
      stdin_open = false;  // EOF: keep the session running for replies
    }
  }
  std::fprintf(stderr, "shutting down\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multipath UDP echo demo"};
  uint16_t listen_port = 0;
  std::string connect_target;
  std::string key_hex;
  double delack = 100.0;
  double addr_interval_s = 30.0;
  bool log = false;

  auto* listen_opt =
      app.add_option("--listen", listen_port, "run the echo server on this port");
  auto* connect_opt = app.add_option("--connect", connect_target,
                                     "connect to a server at addr:port");
  app.add_option("--key", key_hex, "session key (hex)");
  app.add_option("--delack", delack, "max delayed-ack interval, ms");
  app.add_option("--addr-interval", addr_interval_s,
                 "address request interval, seconds");
  app.add_flag("--log", log, "log flow selection and srtt to stderr");
  listen_opt->excludes(connect_opt);
  connect_opt->excludes(listen_opt);
  CLI11_PARSE(app, argc, argv);

  if (listen_opt->count() == 0 && connect_opt->count() == 0) {
    std::cerr << "one of --listen or --connect is required\n";
    return 1;
  }

  session::EndpointConfig cfg;
  cfg.max_delack_ms = delack;
  cfg.addr_request_interval_ms =
      static_cast<rtt::ClockMs>(addr_interval_s * 1000.0);
  try {
    std::vector<uint8_t> key;
    if (!key_hex.empty()) {
      key = parse_hex_key(key_hex);
    }
    cfg.cipher = std::make_shared<session::NullCipher>(key);
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  struct sigaction sa {};
  sa.sa_handler = on_sigint;
  ::sigaction(SIGINT, &sa, nullptr);
  ::sigaction(SIGTERM, &sa, nullptr);

  try {
    if (listen_opt->count() > 0) {
      return run_server(listen_port, cfg, log);
    }
    return run_client(connect_target, cfg, log);
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << "\n";
    return 1;
  }
}
