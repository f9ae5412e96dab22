#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "splitckpt/coordinator.hpp"
#include "splitckpt/image.hpp"
#include "splitckpt/net.hpp"
#include "splitckpt/world.hpp"

namespace splitckpt::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Short drain tick and keepalive so protocol tests run in milliseconds.
CoordinatorConfig fast_config();

/// A started coordinator, stopped on destruction.
class TestCoordinator {
 public:
  explicit TestCoordinator(CoordinatorConfig cfg = fast_config());
  ~TestCoordinator();
  Coordinator& operator*() { return *c_; }
  Coordinator* operator->() { return c_.get(); }
  Endpoint endpoint() const { return c_->endpoint(); }

 private:
  std::unique_ptr<Coordinator> c_;
};

WorldOptions world_options(const Endpoint& coord, uint32_t world, const std::string& app,
                           std::vector<std::string> args);

/// Forwards TCP connections to `upstream`. blackhole() silently stops
/// forwarding in both directions while keeping the sockets open, which
/// looks like a severed network path to both ends.
class TcpProxy {
 public:
  explicit TcpProxy(Endpoint upstream);
  ~TcpProxy();
  Endpoint endpoint() const { return endpoint_; }
  void blackhole() { blackhole_ = true; }

 private:
  void run();
  Endpoint upstream_;
  Endpoint endpoint_;
  Socket listener_;
  std::atomic<bool> stop_{false};
  std::atomic<bool> blackhole_{false};
  std::thread thread_;
};

/// A valid image with random regions, call log, pending messages and fds.
CheckpointImage random_image(uint64_t seed);

/// Image size computed field by field from the on-disk layout, independent
/// of the serializer.
uint64_t expected_image_size(const CheckpointImage& img);

/// Path of the CLI binary built next to the tests.
std::filesystem::path cli_path();

}  // namespace splitckpt::testing
