#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "splitckpt/session.hpp"

namespace splitckpt {

/// `key=value` application arguments. Unknown keys and malformed values
/// raise InvalidParams.
class Params {
 public:
  explicit Params(const std::vector<std::string>& args);

  void allow(std::initializer_list<const char*> keys) const;
  uint64_t u64(const std::string& key, uint64_t fallback) const;
  double f64(const std::string& key, double fallback) const;
  /// Accepts K/M/G suffixes.
  uint64_t size(const std::string& key, uint64_t fallback) const;
  std::string str(const std::string& key, const std::string& fallback) const;

 private:
  std::map<std::string, std::string> kv_;
};

/// A compiled-in application. All state that must survive a restart lives
/// in Upper regions of the session; the App object itself only caches views
/// into them and is rebuilt by resume().
class App {
 public:
  virtual ~App() = default;
  /// Fresh run: allocate and initialize Upper state.
  virtual void start(RankSession& s) = 0;
  /// Restarted run: rebind to the restored Upper regions.
  virtual void resume(RankSession& s) = 0;
  /// One step between checkpoint polls; false once the run is complete.
  virtual bool step(RankSession& s) = 0;
  /// Collective epilogue; returns this rank's output (may be empty).
  virtual std::string finish(RankSession& s) = 0;
};

using AppFactory = std::function<std::unique_ptr<App>(const Params&)>;

void register_app(const std::string& name, AppFactory factory);
std::vector<std::string> app_names();
/// Throws InvalidParams for an unknown app name or bad arguments.
std::unique_ptr<App> make_app(const std::string& name, const std::vector<std::string>& args);

/// Drives the session's app to completion: start or resume, step with a
/// checkpoint poll after each step, finish, finalize. Returns the output.
std::string run_app(RankSession& s);

/// Parameters are validated up front by launchers, before any rank starts.
void validate_app(const std::string& name, const std::vector<std::string>& args);

namespace apps {

/// One message of a traffic schedule.
struct ScheduledMessage {
  uint32_t index = 0;
  uint32_t src = 0;
  uint32_t dst = 0;
  int32_t tag = 0;
  uint32_t size = 0;
  uint32_t send_step = 0;
  uint32_t recv_step = 0;
};

/// The deterministic schedule the traffic app runs for (seed, world),
/// sorted by (send_step, index). Walking it in order gives every rank its
/// send order and, per (src, dst, tag) channel, a matching receive order.
std::vector<ScheduledMessage> traffic_schedule(uint64_t seed, uint32_t world, uint32_t messages,
                                               uint32_t steps, uint32_t max_size);
/// Payload bytes of message `index` under `seed`.
Bytes traffic_payload(uint64_t seed, const ScheduledMessage& m);

/// Global initial grid of the heat app.
std::vector<double> heat_initial(uint64_t grid, const std::string& init);
/// One explicit step of the heat stencil with zero boundaries.
inline double heat_update(double left, double mid, double right) {
  return mid + 0.25 * (left - 2.0 * mid + right);
}

/// Splits n items into `parts` contiguous blocks; block i is [first, first+count).
struct Block {
  uint64_t first = 0;
  uint64_t count = 0;
};
Block block_of(uint64_t n, uint32_t parts, uint32_t i);

}  // namespace apps

}  // namespace splitckpt
