#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <csignal>
#include <iostream>
#include <thread>

#include "splitckpt/coordinator.hpp"

using namespace splitckpt;

int main(int argc, char** argv) {
  CLI::App cli{"checkpoint coordinator"};
  std::string listen = "127.0.0.1:7777";
  CoordinatorConfig cfg;
  std::string log_level = "info";
  cli.add_option("--listen", listen, "host:port to listen on");
  cli.add_option("--keepalive-ms", cfg.keepalive_ms)->check(CLI::PositiveNumber);
  cli.add_option("--misses", cfg.misses)->check(CLI::PositiveNumber);
  cli.add_option("--drain-tick-ms", cfg.drain_tick_ms)->check(CLI::PositiveNumber);
  cli.add_option("--ckpt-timeout-ms", cfg.ckpt_timeout_ms)->check(CLI::PositiveNumber);
  cli.add_option("--log-level", log_level);
  CLI11_PARSE(cli, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_pattern("[%H:%M:%S.%e] [%l] %v");

  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGUSR1);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  try {
    cfg.listen = Endpoint::parse(listen);
    Coordinator coord(cfg);
    coord.start();
    std::cout << "coordinator listening on " << coord.endpoint().str() << std::endl;
    while (true) {
      int sig = 0;
      sigwait(&set, &sig);
      if (sig == SIGUSR1) {
        std::cout << coord.rank_registry_dump() << std::flush;
        continue;
      }
      break;
    }
    std::cout << coord.rank_registry_dump() << std::flush;
    coord.stop();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
