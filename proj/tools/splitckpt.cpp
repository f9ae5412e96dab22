#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <iostream>

#include "splitckpt/apps.hpp"
#include "splitckpt/bench.hpp"
#include "splitckpt/image.hpp"
#include "splitckpt/launcher.hpp"
#include "splitckpt/protocol.hpp"
#include "splitckpt/storage.hpp"

using namespace splitckpt;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t at = 0;
  while (at <= s.size()) {
    const auto comma = s.find(',', at);
    const auto end = comma == std::string::npos ? s.size() : comma;
    if (end > at) out.push_back(s.substr(at, end - at));
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return out;
}

int trigger_main(const Endpoint& coord, const std::string& backend, const std::string& out, uint64_t min_poll) {
  auto sock = connect_tcp(coord, std::chrono::seconds(10));
  if (!sock) throw CoordinatorUnreachable("cannot reach coordinator at " + coord.str());
  proto::send_message(sock->fd(), proto::Trigger{backend, fs::absolute(out).string(), min_poll});
  while (true) {
    auto m = proto::recv_message(sock->fd(), std::chrono::hours(24));
    if (!m) continue;
    if (auto* r = std::get_if<proto::TriggerResult>(&*m)) {
      if (r->ok) {
        std::cout << r->text << std::endl;
        return 0;
      }
      std::cerr << "checkpoint failed: " << r->text << std::endl;
      return 1;
    }
  }
}

int inspect_main(const fs::path& image) {
  const CheckpointImage img = read_image_file(image);
  fmt::print("image {} epoch={} rank={} world={} uid={}\n", image.string(), img.epoch, img.rank, img.world_size,
             img.uid);
  fmt::print("regions:\n{}", dump_regions(img));
  fmt::print("call log:\n");
  for (const auto& e : img.call_log) {
    fmt::print("  {} {} args=[{}, {}, {}, {}] -> {}\n", e.seq, to_string(e.opcode), e.args[0], e.args[1], e.args[2],
               e.args[3], e.result);
  }
  fmt::print("pending messages: {}\n", img.pending.size());
  for (const auto& p : img.pending) {
    fmt::print("  {} -> {} comm={} tag={} bytes={}\n", p.source, p.dest, p.comm, p.tag, p.payload.size());
  }
  fmt::print("fds:\n");
  for (const auto& f : img.fds) fmt::print("  {} {} {}\n", f.fd, to_string(f.half), f.description);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"split-process checkpoint/restart for message-passing programs"};
  cli.require_subcommand(1);
  std::string log_level = "warn";
  cli.add_option("--log-level", log_level, "trace|debug|info|warn|error");

  std::string coordinator;
  uint32_t world = 1;
  std::size_t argv_budget = kDefaultArgvBudget;
  std::string args_file;
  std::string app_name;
  std::vector<std::string> app_args;

  auto* launch_cmd = cli.add_subcommand("launch", "run an app on N ranks");
  launch_cmd->add_option("--world", world, "number of ranks")->required()->check(CLI::PositiveNumber);
  launch_cmd->add_option("--coordinator", coordinator, "coordinator host:port")->required();
  launch_cmd->add_option("--argv-budget", argv_budget, "max bytes of a child command line");
  launch_cmd->add_option("--args-file", args_file, "app arguments, one per line");
  launch_cmd->add_option("app", app_name, "ring|heat|cg|traffic|scatter")->required();
  launch_cmd->add_option("args", app_args, "app key=value arguments");

  std::string backend = "fast";
  std::string out_dir;
  uint64_t min_poll = 0;
  auto* trigger_cmd = cli.add_subcommand("trigger", "checkpoint the running world");
  trigger_cmd->add_option("--coordinator", coordinator)->required();
  trigger_cmd->add_option("--backend", backend, "fast|slow[:RATE]|quota:BYTES");
  trigger_cmd->add_option("--out", out_dir, "image directory")->required();
  trigger_cmd->add_option("--min-poll", min_poll, "earliest poll at which ranks park");

  std::string manifest;
  auto* restart_cmd = cli.add_subcommand("restart", "restart a world from a manifest");
  restart_cmd->add_option("--manifest", manifest)->required();
  restart_cmd->add_option("--coordinator", coordinator)->required();
  restart_cmd->add_option("--argv-budget", argv_budget);

  std::string sizes = "1M,4M,16M,64M";
  std::string backends = "fast,slow";
  uint32_t reps = 3;
  std::string bench_out = "bench.csv";
  std::string work_dir;
  uint64_t bench_poll = 20;
  uint32_t bench_world = 4;
  std::string bench_app = "heat";
  auto* bench_cmd = cli.add_subcommand("bench", "checkpoint time vs. image size vs. backend");
  bench_cmd->add_option("--app", bench_app);
  bench_cmd->add_option("--world", bench_world)->check(CLI::PositiveNumber);
  bench_cmd->add_option("--sizes", sizes, "aggregate sizes, comma separated");
  bench_cmd->add_option("--backends", backends, "backend descriptors, comma separated");
  bench_cmd->add_option("--reps", reps);
  bench_cmd->add_option("--out", bench_out);
  bench_cmd->add_option("--work-dir", work_dir, "scratch directory for images");
  bench_cmd->add_option("--poll", bench_poll, "checkpoint poll");
  bench_cmd->add_option("args", app_args, "app arguments (default steps=40 grid=1024)");

  std::string image;
  auto* inspect_cmd = cli.add_subcommand("inspect", "print a checkpoint image");
  inspect_cmd->add_option("image", image)->required();

  auto* rank_cmd = cli.add_subcommand("rank", "")->group("");
  rank_cmd->add_option("--app", app_name)->required();
  rank_cmd->add_option("--args-file", args_file);
  rank_cmd->add_option("args", app_args);

  auto* restart_rank_cmd = cli.add_subcommand("restart-rank", "")->group("");
  restart_rank_cmd->add_option("--manifest", manifest)->required();
  restart_rank_cmd->add_option("--coordinator", coordinator)->required();

  CLI11_PARSE(cli, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_pattern("[%H:%M:%S.%e] [%l] %v");

  try {
    if (*launch_cmd) {
      LaunchOptions o;
      o.world_size = world;
      o.coordinator = Endpoint::parse(coordinator);
      o.argv_budget = argv_budget;
      if (!args_file.empty()) o.args_file = fs::absolute(args_file);
      return launch(o, app_name, app_args).exit_status();
    }
    if (*trigger_cmd) return trigger_main(Endpoint::parse(coordinator), backend, out_dir, min_poll);
    if (*restart_cmd) {
      LaunchOptions o;
      o.coordinator = Endpoint::parse(coordinator);
      o.argv_budget = argv_budget;
      return restart(o, manifest).exit_status();
    }
    if (*bench_cmd) {
      BenchConfig c;
      c.app = bench_app;
      c.world = bench_world;
      for (const auto& s : split_list(sizes)) c.sizes.push_back(parse_size(s));
      c.backends = split_list(backends);
      c.reps = reps;
      c.ckpt_poll = bench_poll;
      if (!app_args.empty()) c.app_args = app_args;
      c.work_dir = work_dir.empty() ? fs::absolute(bench_out).parent_path() / "bench_images" : fs::path(work_dir);
      const BenchResult r = run_benchmark(c);
      write_bench_outputs(bench_out, r);
      fmt::print("{:>10} {:>8} {:>12} {:>12}\n", "bytes", "backend", "ckpt_ms", "restart_ms");
      for (const auto& x : r.medians) {
        fmt::print("{:>10} {:>8} {:>12.1f} {:>12.1f}\n", x.aggregate_upper_bytes, x.backend, x.ckpt_ms, x.restart_ms);
      }
      return 0;
    }
    if (*inspect_cmd) return inspect_main(image);
    if (*rank_cmd) {
      std::optional<fs::path> af;
      if (!args_file.empty()) af = args_file;
      return rank_main(app_name, app_args, af);
    }
    if (*restart_rank_cmd) return restart_rank_main(manifest, Endpoint::parse(coordinator));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
