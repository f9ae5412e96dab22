#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>

#include "splitckpt/bytes.hpp"

namespace splitckpt {

struct Endpoint {
  std::string host = "127.0.0.1";
  uint16_t port = 0;

  static Endpoint parse(std::string_view text);  // "host:port"
  std::string str() const { return host + ":" + std::to_string(port); }
  bool operator==(const Endpoint&) const = default;
};

/// Owning file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close();
  void shutdown_write();

 private:
  int fd_ = -1;
};

/// Bind and listen; port 0 picks an ephemeral port. Throws BindFailure.
Socket listen_tcp(const Endpoint& ep, int backlog = 128);
uint16_t local_port(const Socket& s);

/// Connect, retrying refused connections until `timeout` elapses. Returns
/// nullopt on timeout.
std::optional<Socket> connect_tcp(const Endpoint& ep, std::chrono::milliseconds timeout);

/// Accept one connection, waiting at most `timeout`.
std::optional<Socket> accept_tcp(const Socket& listener, std::chrono::milliseconds timeout);

void set_nonblocking(int fd);
void set_nodelay(int fd);

/// Write everything, waiting for POLLOUT on a non-blocking socket. Throws
/// TransportError on failure.
void send_all(int fd, std::span<const std::byte> data);

/// Read exactly n bytes (blocking on a possibly non-blocking socket) with a
/// deadline. Throws TransportError on EOF/error, returns false on timeout.
bool recv_exact(int fd, std::span<std::byte> out, std::chrono::milliseconds timeout);

/// Reads whatever is available into `sink`. Returns bytes read, 0 on EOF,
/// -1 when the socket would block. Throws TransportError on hard errors.
long read_available(int fd, Bytes& sink);

/// Process-global, raw byte accounting of peer-to-peer transport traffic.
/// `handed` grows when a frame is handed to the socket layer, `drained` as
/// bytes come back out of read(). Only meaningful when every rank lives in
/// one process (tests); it is never consulted by the protocol itself.
struct WireProbe {
  std::atomic<uint64_t> handed{0};
  std::atomic<uint64_t> drained{0};

  int64_t in_flight() const {
    return static_cast<int64_t>(handed.load()) - static_cast<int64_t>(drained.load());
  }
  static WireProbe& global();
};

std::string hostname();

}  // namespace splitckpt
