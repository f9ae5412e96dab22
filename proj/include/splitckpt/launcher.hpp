#pragma once

#include <sys/types.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "splitckpt/net.hpp"

namespace splitckpt {

inline constexpr std::size_t kDefaultArgvBudget = 4096;

/// Environment handed to every child rank.
inline constexpr const char* kEnvCoordinator = "MPMINI_COORD";
inline constexpr const char* kEnvRank = "MPMINI_RANK";
inline constexpr const char* kEnvWorld = "MPMINI_WORLD";
inline constexpr const char* kEnvUid = "MPMINI_UID";

struct LaunchOptions {
  /// Binary with the `rank` and `restart-rank` subcommands. Empty means
  /// this executable.
  std::filesystem::path exe;
  uint32_t world_size = 1;
  Endpoint coordinator;
  std::size_t argv_budget = kDefaultArgvBudget;
  /// When set, children read their app arguments from this file (one per
  /// line) instead of the command line.
  std::optional<std::filesystem::path> args_file;
  /// Empty: children inherit stdout/stderr. Otherwise rank{R}.out/.err.
  std::filesystem::path capture_dir;
};

struct ChildReport {
  uint32_t rank = 0;
  pid_t pid = -1;
  std::vector<std::string> argv;
  std::size_t argv_bytes = 0;
  int exit_code = -1;
  int signal = 0;
};

struct LaunchReport {
  std::vector<ChildReport> children;
  /// 0 if every child exited 0; else the first failure (128+signal for a
  /// signal).
  int exit_status() const;
};

/// Bytes the kernel needs for argv: every string plus its terminator.
std::size_t command_line_bytes(const std::vector<std::string>& argv);

/// Child command lines. Both throw ArgvBudgetExceeded rather than truncate.
std::vector<std::string> rank_command(const LaunchOptions& o, const std::string& app,
                                      const std::vector<std::string>& args);
std::vector<std::string> restart_command(const LaunchOptions& o, const std::filesystem::path& manifest);

/// Spawns world_size children running the app and waits for all of them.
/// Throws SpawnFailure, ArgvBudgetExceeded, InvalidParams (unknown app).
LaunchReport launch(const LaunchOptions& o, const std::string& app, const std::vector<std::string>& args);
/// One child per manifest entry, each given only --manifest and
/// --coordinator. Throws MissingRank etc. from manifest parsing.
LaunchReport restart(LaunchOptions o, const std::filesystem::path& manifest);

std::vector<std::string> read_args_file(const std::filesystem::path& path);
void write_args_file(const std::filesystem::path& path, const std::vector<std::string>& args);

/// Child entry points; they read MPMINI_* from the environment, print the
/// app output to stdout and return the process exit status.
int rank_main(const std::string& app, std::vector<std::string> args,
              const std::optional<std::filesystem::path>& args_file);
int restart_rank_main(const std::filesystem::path& manifest, const Endpoint& coordinator);

}  // namespace splitckpt
