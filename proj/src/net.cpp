#include "splitckpt/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

#include <fmt/format.h>

namespace splitckpt {

namespace {

using Clock = std::chrono::steady_clock;

sockaddr_in make_addr(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (ep.host.empty() || ep.host == "0.0.0.0") {
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
  } else if (ep.host == "localhost") {
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  } else if (inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    addrinfo* res = nullptr;
    if (getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
      throw TransportError("cannot resolve host " + ep.host);
    }
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    freeaddrinfo(res);
  }
  return addr;
}

int remaining_ms(Clock::time_point deadline) {
  auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
  return left.count() < 0 ? 0 : static_cast<int>(left.count());
}

}  // namespace

Endpoint Endpoint::parse(std::string_view text) {
  auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon + 1 == text.size()) {
    throw std::invalid_argument(fmt::format("endpoint '{}' is not host:port", text));
  }
  Endpoint ep;
  ep.host = std::string(text.substr(0, colon));
  if (ep.host.empty()) ep.host = "127.0.0.1";
  const auto port_text = std::string(text.substr(colon + 1));
  std::size_t used = 0;
  unsigned long port = 0;
  try {
    port = std::stoul(port_text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != port_text.size() || port > 65535) {
    throw std::invalid_argument(fmt::format("bad port in endpoint '{}'", text));
  }
  ep.port = static_cast<uint16_t>(port);
  return ep;
}

void Socket::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void Socket::shutdown_write() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_WR);
}

Socket listen_tcp(const Endpoint& ep, int backlog) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw BindFailure(fmt::format("socket(): {}", std::strerror(errno)));
  int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  try {
    addr = make_addr(ep);
  } catch (const TransportError& e) {
    throw BindFailure(e.what());
  }
  if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    throw BindFailure(fmt::format("bind {}: {}", ep.str(), std::strerror(errno)));
  }
  if (::listen(s.fd(), backlog) != 0) {
    throw BindFailure(fmt::format("listen {}: {}", ep.str(), std::strerror(errno)));
  }
  return s;
}

uint16_t local_port(const Socket& s) {
  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
  return ntohs(addr.sin_port);
}

std::optional<Socket> connect_tcp(const Endpoint& ep, std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  const sockaddr_in addr = make_addr(ep);
  while (true) {
    Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!s.valid()) throw TransportError(fmt::format("socket(): {}", std::strerror(errno)));
    if (::connect(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) {
      set_nodelay(s.fd());
      return s;
    }
    const int err = errno;
    if (err != ECONNREFUSED && err != EINTR && err != ETIMEDOUT && err != EAGAIN &&
        err != ENETUNREACH) {
      throw TransportError(fmt::format("connect {}: {}", ep.str(), std::strerror(err)));
    }
    if (Clock::now() >= deadline) return std::nullopt;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

std::optional<Socket> accept_tcp(const Socket& listener, std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  while (true) {
    pollfd p{listener.fd(), POLLIN, 0};
    int rc = ::poll(&p, 1, remaining_ms(deadline));
    if (rc < 0 && errno == EINTR) continue;
    if (rc < 0) throw TransportError(fmt::format("poll: {}", std::strerror(errno)));
    if (rc == 0) return std::nullopt;
    int fd = ::accept4(listener.fd(), nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == EAGAIN || errno == ECONNABORTED) continue;
      throw TransportError(fmt::format("accept: {}", std::strerror(errno)));
    }
    set_nodelay(fd);
    return Socket(fd);
  }
}

void set_nonblocking(int fd) {
  int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

void send_all(int fd, std::span<const std::byte> data) {
  std::size_t off = 0;
  while (off < data.size()) {
    ssize_t n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n > 0) {
      off += static_cast<std::size_t>(n);
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
      pollfd p{fd, POLLOUT, 0};
      ::poll(&p, 1, 1000);
      continue;
    }
    throw TransportError(fmt::format("send: {}", n < 0 ? std::strerror(errno) : "closed"));
  }
}

bool recv_exact(int fd, std::span<std::byte> out, std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  std::size_t off = 0;
  while (off < out.size()) {
    pollfd p{fd, POLLIN, 0};
    int rc = ::poll(&p, 1, remaining_ms(deadline));
    if (rc < 0 && errno == EINTR) continue;
    if (rc == 0) return false;
    ssize_t n = ::recv(fd, out.data() + off, out.size() - off, 0);
    if (n > 0) {
      off += static_cast<std::size_t>(n);
    } else if (n == 0) {
      throw TransportError("connection closed");
    } else if (errno != EINTR && errno != EAGAIN && errno != EWOULDBLOCK) {
      throw TransportError(fmt::format("recv: {}", std::strerror(errno)));
    }
  }
  return true;
}

long read_available(int fd, Bytes& sink) {
  std::byte buf[65536];
  long total = 0;
  while (true) {
    ssize_t n = ::recv(fd, buf, sizeof(buf), MSG_DONTWAIT);
    if (n > 0) {
      sink.insert(sink.end(), buf, buf + n);
      total += n;
      if (static_cast<std::size_t>(n) < sizeof(buf)) return total;
      continue;
    }
    if (n == 0) return total > 0 ? total : 0;
    if (errno == EINTR) continue;
    if (errno == EAGAIN || errno == EWOULDBLOCK) return total > 0 ? total : -1;
    if (errno == ECONNRESET) return total > 0 ? total : 0;
    throw TransportError(fmt::format("recv: {}", std::strerror(errno)));
  }
}

WireProbe& WireProbe::global() {
  static WireProbe probe;
  return probe;
}

std::string hostname() {
  char buf[256] = {};
  if (::gethostname(buf, sizeof(buf) - 1) != 0) return "localhost";
  return buf;
}

}  // namespace splitckpt
