#include "splitckpt/launcher.hpp"

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>

#include "splitckpt/apps.hpp"
#include "splitckpt/errors.hpp"
#include "splitckpt/manifest.hpp"
#include "splitckpt/session.hpp"

extern char** environ;

namespace splitckpt {

namespace fs = std::filesystem;

namespace {

fs::path self_exe(const LaunchOptions& o) {
  if (!o.exe.empty()) return o.exe;
  std::error_code ec;
  fs::path p = fs::read_symlink("/proc/self/exe", ec);
  if (ec) throw SpawnFailure("cannot resolve /proc/self/exe: " + ec.message());
  return p;
}

void check_budget(const LaunchOptions& o, const std::vector<std::string>& argv) {
  const std::size_t n = command_line_bytes(argv);
  if (n > o.argv_budget) throw ArgvBudgetExceeded(n, o.argv_budget);
}

std::vector<std::string> child_env(const LaunchOptions& o, uint32_t rank) {
  std::vector<std::string> env;
  for (char** e = environ; *e; ++e) {
    std::string_view kv(*e);
    if (kv.starts_with("MPMINI_")) continue;
    env.emplace_back(kv);
  }
  env.push_back(fmt::format("{}={}", kEnvCoordinator, o.coordinator.str()));
  env.push_back(fmt::format("{}={}", kEnvRank, rank));
  env.push_back(fmt::format("{}={}", kEnvWorld, o.world_size));
  return env;
}

std::vector<char*> c_strings(std::vector<std::string>& v) {
  std::vector<char*> out;
  for (auto& s : v) out.push_back(s.data());
  out.push_back(nullptr);
  return out;
}

LaunchReport spawn_all(const LaunchOptions& o, const std::vector<std::string>& argv) {
  LaunchReport report;
  if (!o.capture_dir.empty()) fs::create_directories(o.capture_dir);
  for (uint32_t r = 0; r < o.world_size; ++r) {
    ChildReport c;
    c.rank = r;
    c.argv = argv;
    c.argv_bytes = command_line_bytes(argv);
    std::vector<std::string> args = argv;
    std::vector<std::string> env = child_env(o, r);
    auto cargv = c_strings(args);
    auto cenv = c_strings(env);

    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    std::string out_path, err_path;
    if (!o.capture_dir.empty()) {
      out_path = (o.capture_dir / fmt::format("rank{}.out", r)).string();
      err_path = (o.capture_dir / fmt::format("rank{}.err", r)).string();
      posix_spawn_file_actions_addopen(&fa, 1, out_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
      posix_spawn_file_actions_addopen(&fa, 2, err_path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    }
    pid_t pid = -1;
    const int rc = posix_spawn(&pid, cargv[0], &fa, nullptr, cargv.data(), cenv.data());
    posix_spawn_file_actions_destroy(&fa);
    if (rc != 0) {
      for (auto& done : report.children) ::kill(done.pid, SIGTERM);
      for (auto& done : report.children) ::waitpid(done.pid, nullptr, 0);
      throw SpawnFailure(fmt::format("spawning rank {} ({}): {}", r, argv[0], std::strerror(rc)));
    }
    c.pid = pid;
    report.children.push_back(std::move(c));
  }
  for (auto& c : report.children) {
    int status = 0;
    while (::waitpid(c.pid, &status, 0) < 0) {
      if (errno != EINTR) break;
    }
    if (WIFEXITED(status)) {
      c.exit_code = WEXITSTATUS(status);
    } else if (WIFSIGNALED(status)) {
      c.signal = WTERMSIG(status);
    }
  }
  return report;
}

uint32_t env_u32(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) throw InvalidParams(fmt::format("{} is not set", name));
  char* end = nullptr;
  const unsigned long x = std::strtoul(v, &end, 10);
  if (*end != '\0') throw InvalidParams(fmt::format("{}={} is not a number", name, v));
  return static_cast<uint32_t>(x);
}

SessionOptions options_from_env() {
  SessionOptions s;
  const char* coord = std::getenv(kEnvCoordinator);
  if (!coord) throw InvalidParams(fmt::format("{} is not set", kEnvCoordinator));
  s.coordinator = Endpoint::parse(coord);
  s.rank = env_u32(kEnvRank);
  s.world_size = env_u32(kEnvWorld);
  if (const char* uid = std::getenv(kEnvUid)) s.requested_uid = std::strtoull(uid, nullptr, 10);
  return s;
}

}  // namespace

int LaunchReport::exit_status() const {
  for (const auto& c : children) {
    if (c.signal) return 128 + c.signal;
    if (c.exit_code != 0) return c.exit_code;
  }
  return 0;
}

std::size_t command_line_bytes(const std::vector<std::string>& argv) {
  std::size_t n = 0;
  for (const auto& a : argv) n += a.size() + 1;
  return n;
}

std::vector<std::string> rank_command(const LaunchOptions& o, const std::string& app,
                                      const std::vector<std::string>& args) {
  std::vector<std::string> argv = {self_exe(o).string(), "rank", "--app", app};
  if (o.args_file) {
    argv.push_back("--args-file");
    argv.push_back(o.args_file->string());
  } else if (!args.empty()) {
    argv.push_back("--");
    argv.insert(argv.end(), args.begin(), args.end());
  }
  check_budget(o, argv);
  return argv;
}

std::vector<std::string> restart_command(const LaunchOptions& o, const fs::path& manifest) {
  std::vector<std::string> argv = {self_exe(o).string(), "restart-rank", "--manifest",
                                   fs::absolute(manifest).string(), "--coordinator", o.coordinator.str()};
  check_budget(o, argv);
  return argv;
}

LaunchReport launch(const LaunchOptions& o, const std::string& app, const std::vector<std::string>& args) {
  if (o.world_size == 0) throw InvalidParams("world size must be > 0");
  validate_app(app, o.args_file ? read_args_file(*o.args_file) : args);
  const auto argv = rank_command(o, app, args);
  spdlog::info("launching {} x {} against {}", o.world_size, app, o.coordinator.str());
  return spawn_all(o, argv);
}

LaunchReport restart(LaunchOptions o, const fs::path& manifest) {
  const Manifest m = read_manifest(manifest);
  o.world_size = m.world_size;
  const auto argv = restart_command(o, manifest);
  spdlog::info("restarting {} ranks of epoch {} from {}", m.world_size, m.epoch, manifest.string());
  return spawn_all(o, argv);
}

std::vector<std::string> read_args_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot read args file {}", path.string()));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

void write_args_file(const fs::path& path, const std::vector<std::string>& args) {
  std::ofstream out(path, std::ios::trunc);
  for (const auto& a : args) {
    if (a.find('\n') != std::string::npos) throw InvalidParams("argument contains a newline");
    out << a << '\n';
  }
  if (!out) throw IoError(fmt::format("cannot write args file {}", path.string()));
}

int rank_main(const std::string& app, std::vector<std::string> args, const std::optional<fs::path>& args_file) {
  try {
    if (args_file) args = read_args_file(*args_file);
    const SessionOptions opts = options_from_env();
    auto s = RankSession::launch(opts, app, args);
    const std::string out = run_app(*s);
    if (!out.empty()) std::cout << out << std::endl;
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "rank error: " << e.what() << std::endl;
    return 1;
  }
}

int restart_rank_main(const fs::path& manifest, const Endpoint& coordinator) {
  try {
    SessionOptions opts = options_from_env();
    opts.coordinator = coordinator;
    auto s = RankSession::restart_from_manifest(manifest, opts);
    const std::string out = run_app(*s);
    if (!out.empty()) std::cout << out << std::endl;
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "restart error: " << e.what() << std::endl;
    return 1;
  }
}

}  // namespace splitckpt
