#include "mpudp/transport.hpp"

#include <ifaddrs.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <stdexcept>

namespace mpudp::transport {

namespace {

socklen_t to_sockaddr(const AddressRecord& a, sockaddr_storage* ss) {
  std::memset(ss, 0, sizeof(*ss));
  if (a.family == AddressRecord::Family::IPv4) {
    auto* sin = reinterpret_cast<sockaddr_in*>(ss);
    sin->sin_family = AF_INET;
    sin->sin_port = htons(a.port);
    std::memcpy(&sin->sin_addr, a.addr.data(), 4);
    return sizeof(sockaddr_in);
  }
  auto* sin6 = reinterpret_cast<sockaddr_in6*>(ss);
  sin6->sin6_family = AF_INET6;
  sin6->sin6_port = htons(a.port);
  std::memcpy(&sin6->sin6_addr, a.addr.data(), 16);
  return sizeof(sockaddr_in6);
}

std::optional<AddressRecord> from_sockaddr(const sockaddr* sa) {
  AddressRecord r;
  if (sa->sa_family == AF_INET) {
    const auto* sin = reinterpret_cast<const sockaddr_in*>(sa);
    r.family = AddressRecord::Family::IPv4;
    r.port = ntohs(sin->sin_port);
    std::memcpy(r.addr.data(), &sin->sin_addr, 4);
    return r;
  }
  if (sa->sa_family == AF_INET6) {
    const auto* sin6 = reinterpret_cast<const sockaddr_in6*>(sa);
    r.family = AddressRecord::Family::IPv6;
    r.port = ntohs(sin6->sin6_port);
    std::memcpy(r.addr.data(), &sin6->sin6_addr, 16);
    return r;
  }
  return std::nullopt;
}

int open_bound_socket(int family, uint16_t port) {
  int fd = ::socket(family, SOCK_DGRAM | SOCK_NONBLOCK, 0);
  if (fd < 0) {
    return -1;
  }
  const int on = 1;
  if (family == AF_INET6) {
    // plain per-protocol sockets; hybrid sockets lack the options we need
    ::setsockopt(fd, IPPROTO_IPV6, IPV6_V6ONLY, &on, sizeof(on));
    ::setsockopt(fd, IPPROTO_IPV6, IPV6_RECVPKTINFO, &on, sizeof(on));
  } else {
    ::setsockopt(fd, IPPROTO_IP, IP_PKTINFO, &on, sizeof(on));
  }

  // Must bind to the wildcard address: pktinfo-based source selection
  // requires an explicitly bound socket.
  sockaddr_storage ss{};
  socklen_t len;
  if (family == AF_INET) {
    auto* sin = reinterpret_cast<sockaddr_in*>(&ss);
    sin->sin_family = AF_INET;
    sin->sin_addr.s_addr = htonl(INADDR_ANY);
    sin->sin_port = htons(port);
    len = sizeof(sockaddr_in);
  } else {
    auto* sin6 = reinterpret_cast<sockaddr_in6*>(&ss);
    sin6->sin6_family = AF_INET6;
    sin6->sin6_addr = in6addr_any;
    sin6->sin6_port = htons(port);
    len = sizeof(sockaddr_in6);
  }
  if (::bind(fd, reinterpret_cast<sockaddr*>(&ss), len) < 0) {
    ::close(fd);
    return -1;
  }
  return fd;
}

uint16_t bound_port(int fd) {
  sockaddr_storage ss{};
  socklen_t len = sizeof(ss);
  if (::getsockname(fd, reinterpret_cast<sockaddr*>(&ss), &len) < 0) {
    return 0;
  }
  if (ss.ss_family == AF_INET) {
    return ntohs(reinterpret_cast<sockaddr_in*>(&ss)->sin_port);
  }
  return ntohs(reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port);
}

}  // namespace

UdpTransport::Generation UdpTransport::bind_generation(uint16_t port) {
  // Both families on one port number so a hop is a single new port.
  for (int attempt = 0; attempt < 16; attempt++) {
    Generation g;
    g.fd4 = open_bound_socket(AF_INET, port);
    if (g.fd4 < 0) {
      continue;
    }
    g.port = port != 0 ? port : bound_port(g.fd4);
    g.fd6 = open_bound_socket(AF_INET6, g.port);
    if (g.fd6 < 0 && port == 0) {
      // ephemeral port taken on the other family: try another
      ::close(g.fd4);
      continue;
    }
    return g;
  }
  throw std::runtime_error("could not bind UDP sockets on both families");
}

UdpTransport::UdpTransport(uint16_t port) {
  generations_.push_back(bind_generation(port));
}

UdpTransport::~UdpTransport() {
  for (auto& g : generations_) {
    if (g.fd4 >= 0) ::close(g.fd4);
    if (g.fd6 >= 0) ::close(g.fd6);
  }
}

uint16_t UdpTransport::current_port() const {
  return generations_.back().port;
}

uint16_t UdpTransport::open_local_port() {
  generations_.push_back(bind_generation(0));
  prune();
  return generations_.back().port;
}

void UdpTransport::prune() {
  while (generations_.size() > MAX_GENERATIONS) {
    auto& g = generations_.front();
    if (g.fd4 >= 0) ::close(g.fd4);
    if (g.fd6 >= 0) ::close(g.fd6);
    generations_.pop_front();
  }
}

bool UdpTransport::send(const OutgoingDatagram& dgram) {
  const bool v4 = dgram.dst.family == AddressRecord::Family::IPv4;
  const int fd = v4 ? generations_.back().fd4 : generations_.back().fd6;
  if (fd < 0) {
    last_errno_ = EAFNOSUPPORT;
    return false;
  }

  sockaddr_storage dst{};
  const socklen_t dst_len = to_sockaddr(dgram.dst, &dst);

  iovec iov;
  iov.iov_base = const_cast<uint8_t*>(dgram.payload.data());
  iov.iov_len = dgram.payload.size();

  alignas(cmsghdr) char control[256];
  msghdr msg{};
  msg.msg_name = &dst;
  msg.msg_namelen = dst_len;
  msg.msg_iov = &iov;
  msg.msg_iovlen = 1;
  msg.msg_control = control;
  msg.msg_controllen = sizeof(control);

  cmsghdr* cm = CMSG_FIRSTHDR(&msg);
  if (v4) {
    cm->cmsg_level = IPPROTO_IP;
    cm->cmsg_type = IP_PKTINFO;
    cm->cmsg_len = CMSG_LEN(sizeof(in_pktinfo));
    auto* info = reinterpret_cast<in_pktinfo*>(CMSG_DATA(cm));
    std::memset(info, 0, sizeof(*info));
    std::memcpy(&info->ipi_spec_dst, dgram.src.addr.data(), 4);
    msg.msg_controllen = CMSG_SPACE(sizeof(in_pktinfo));
  } else {
    cm->cmsg_level = IPPROTO_IPV6;
    cm->cmsg_type = IPV6_PKTINFO;
    cm->cmsg_len = CMSG_LEN(sizeof(in6_pktinfo));
    auto* info = reinterpret_cast<in6_pktinfo*>(CMSG_DATA(cm));
    std::memset(info, 0, sizeof(*info));
    std::memcpy(&info->ipi6_addr, dgram.src.addr.data(), 16);
    msg.msg_controllen = CMSG_SPACE(sizeof(in6_pktinfo));
  }

  const ssize_t sent = ::sendmsg(fd, &msg, 0);
  if (sent < 0) {
    last_errno_ = errno;
    return false;
  }
  return static_cast<std::size_t>(sent) == dgram.payload.size();
}

std::optional<IncomingDatagram> UdpTransport::receive(int timeout_ms) {
  std::vector<pollfd> fds;
  std::vector<uint16_t> ports;
  for (const auto& g : generations_) {
    if (g.fd4 >= 0) {
      fds.push_back({g.fd4, POLLIN, 0});
      ports.push_back(g.port);
    }
    if (g.fd6 >= 0) {
      fds.push_back({g.fd6, POLLIN, 0});
      ports.push_back(g.port);
    }
  }
  const int n = ::poll(fds.data(), fds.size(), timeout_ms);
  if (n <= 0) {
    return std::nullopt;
  }
  for (std::size_t i = 0; i < fds.size(); i++) {
    if (!(fds[i].revents & POLLIN)) {
      continue;
    }

    uint8_t buf[65536];
    sockaddr_storage src{};
    alignas(cmsghdr) char control[512];

    iovec iov;
    iov.iov_base = buf;
    iov.iov_len = sizeof(buf);
    msghdr msg{};
    msg.msg_name = &src;
    msg.msg_namelen = sizeof(src);
    msg.msg_iov = &iov;
    msg.msg_iovlen = 1;
    msg.msg_control = control;
    msg.msg_controllen = sizeof(control);

    const ssize_t got = ::recvmsg(fds[i].fd, &msg, 0);
    if (got < 0) {
      continue;
    }

    IncomingDatagram d;
    auto src_rec = from_sockaddr(reinterpret_cast<sockaddr*>(&src));
    if (!src_rec) {
      continue;
    }
    d.src = *src_rec;
    d.dst.port = ports[i];

    bool have_dst = false;
    for (cmsghdr* cm = CMSG_FIRSTHDR(&msg); cm; cm = CMSG_NXTHDR(&msg, cm)) {
      if (cm->cmsg_level == IPPROTO_IP && cm->cmsg_type == IP_PKTINFO) {
        const auto* info = reinterpret_cast<in_pktinfo*>(CMSG_DATA(cm));
        d.dst.family = AddressRecord::Family::IPv4;
        std::memcpy(d.dst.addr.data(), &info->ipi_addr, 4);
        have_dst = true;
      } else if (cm->cmsg_level == IPPROTO_IPV6 && cm->cmsg_type == IPV6_PKTINFO) {
        const auto* info = reinterpret_cast<in6_pktinfo*>(CMSG_DATA(cm));
        d.dst.family = AddressRecord::Family::IPv6;
        std::memcpy(d.dst.addr.data(), &info->ipi6_addr, 16);
        have_dst = true;
      }
    }
    if (!have_dst) {
      d.dst.family = d.src.family;  // best effort
    }
    d.payload.assign(buf, buf + got);
    return d;
  }
  return std::nullopt;
}

std::vector<AddressRecord> UdpTransport::gather_local_addresses(uint16_t port) {
  std::vector<AddressRecord> out;
  ifaddrs* ifa_list = nullptr;
  if (::getifaddrs(&ifa_list) < 0) {
    return out;
  }
  for (ifaddrs* ifa = ifa_list; ifa; ifa = ifa->ifa_next) {
    if (!ifa->ifa_addr) {
      continue;
    }
    auto rec = from_sockaddr(ifa->ifa_addr);
    if (!rec) {
      continue;
    }
    rec->port = port;
    if (std::find(out.begin(), out.end(), *rec) == out.end()) {
      out.push_back(*rec);
    }
  }
  ::freeifaddrs(ifa_list);
  return out;
}

// ---------------------------------------------------------------------------

std::pair<std::shared_ptr<PairTransport>, std::shared_ptr<PairTransport>>
PairTransport::make_pair(uint16_t port_a, uint16_t port_b) {
  auto a = std::make_shared<PairTransport>();
  auto b = std::make_shared<PairTransport>();
  a->peer_ = b;
  b->peer_ = a;
  a->next_port_ = static_cast<uint16_t>(port_a + 1);
  b->next_port_ = static_cast<uint16_t>(port_b + 1);
  return {a, b};
}

bool PairTransport::send(const OutgoingDatagram& dgram) {
  auto peer = peer_.lock();
  if (!peer) {
    return false;
  }
  peer->inbox_.push_back(IncomingDatagram{dgram.src, dgram.dst, dgram.payload});
  return true;
}

std::optional<IncomingDatagram> PairTransport::receive(int) {
  if (inbox_.empty()) {
    return std::nullopt;
  }
  auto d = std::move(inbox_.front());
  inbox_.pop_front();
  return d;
}

}  // namespace mpudp::transport
