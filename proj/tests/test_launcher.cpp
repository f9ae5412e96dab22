#include <gtest/gtest.h>

#include <fmt/format.h>
#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "splitckpt/launcher.hpp"
#include "splitckpt/manifest.hpp"
#include "support.hpp"

using namespace splitckpt;
using splitckpt::testing::cli_path;
using splitckpt::testing::TempDir;
using splitckpt::testing::TestCoordinator;
namespace fs = std::filesystem;

namespace {

LaunchOptions options(const TestCoordinator& c, uint32_t world, const TempDir& dir) {
  LaunchOptions o;
  o.exe = cli_path();
  o.world_size = world;
  o.coordinator = const_cast<TestCoordinator&>(c).endpoint();
  o.capture_dir = dir.path();
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = cli_path().string() + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : 128;
}

}  // namespace

TEST(Launcher, RingOfFourExitsZero) {
  TestCoordinator c;
  TempDir dir;
  const auto rep = launch(options(c, 4, dir), "ring", {"steps=100"});
  EXPECT_EQ(rep.exit_status(), 0);
  ASSERT_EQ(rep.children.size(), 4u);
  for (const auto& ch : rep.children) {
    EXPECT_EQ(ch.exit_code, 0);
    EXPECT_LE(ch.argv_bytes, kDefaultArgvBudget);
    EXPECT_TRUE(slurp(dir / fmt::format("rank{}.out", ch.rank)).starts_with("ring rank=")) << ch.rank;
  }
}

TEST(Launcher, SingleRankHeat) {
  TestCoordinator c;
  TempDir dir;
  EXPECT_EQ(launch(options(c, 1, dir), "heat", {"steps=10", "grid=64"}).exit_status(), 0);
  EXPECT_TRUE(slurp(dir / "rank0.out").starts_with("heat sha256="));
}

TEST(Launcher, OversizedArgumentsNeedArgsFile) {
  TestCoordinator c;
  TempDir dir;
  std::vector<std::string> args;
  for (int i = 0; i < 1000; ++i) args.push_back("pad=1K");
  try {
    launch(options(c, 2, dir), "ring", args);
    FAIL();
  } catch (const ArgvBudgetExceeded& e) {
    EXPECT_GT(e.length(), 4096u);
    EXPECT_NE(std::string(e.what()).find("use --args-file"), std::string::npos);
  }
  auto o = options(c, 2, dir);
  o.args_file = dir / "args";
  write_args_file(*o.args_file, args);
  EXPECT_EQ(read_args_file(*o.args_file), args);
  const auto rep = launch(o, "ring", args);
  EXPECT_EQ(rep.exit_status(), 0);
  for (const auto& ch : rep.children) EXPECT_LE(ch.argv_bytes, 4096u);
}

TEST(Launcher, CommandLineAccounting) {
  EXPECT_EQ(command_line_bytes({"ab", "c"}), 5u);
  LaunchOptions o;
  o.exe = "/bin/x";
  o.world_size = 64;
  const auto cmd = restart_command(o, "/very/long/manifest");
  EXPECT_NE(std::find(cmd.begin(), cmd.end(), "--manifest"), cmd.end());
  EXPECT_THROW(rank_command(o, "ring", {std::string(5000, 'x')}), ArgvBudgetExceeded);
}

TEST(Launcher, UnknownAppFailsBeforeSpawning) {
  TestCoordinator c;
  TempDir dir;
  EXPECT_THROW(launch(options(c, 2, dir), "nope", {}), InvalidParams);
  EXPECT_THROW(launch(options(c, 2, dir), "ring", {"bogus=1"}), InvalidParams);
}

TEST(Launcher, RestartWithMissingRank) {
  TestCoordinator c;
  TempDir dir;
  const fs::path p = dir / "m";
  std::ofstream(p) << "MANIFEST v1 epoch=1 world=4\nrank 0 /a\nrank 1 /b\nrank 2 /c\n";
  EXPECT_THROW(restart(options(c, 0, dir), p), MissingRank);
  EXPECT_NE(run_cli(fmt::format("restart --manifest {} --coordinator {}", p.string(), c.endpoint().str())), 0);
}

TEST(Launcher, CliLaunchTriggerRestart) {
  TestCoordinator c;
  TempDir dir;
  auto fut = c->request_checkpoint("fast", dir / "ckpt", 50);
  auto o = options(c, 3, dir);
  ASSERT_EQ(launch(o, "ring", {"steps=200"}).exit_status(), 0);
  std::string ref;
  for (int r = 0; r < 3; ++r) ref += slurp(dir / fmt::format("rank{}.out", r));
  const auto res = fut.get();
  ASSERT_TRUE(res.ok) << res.error;
  TempDir out2;
  auto o2 = options(c, 0, out2);
  const auto rep = restart(o2, res.manifest);
  EXPECT_EQ(rep.exit_status(), 0);
  std::string got;
  for (int r = 0; r < 3; ++r) got += slurp(out2 / fmt::format("rank{}.out", r));
  EXPECT_EQ(got, ref);
  EXPECT_EQ(run_cli(fmt::format("inspect {}", read_manifest(res.manifest).entries.at(0).string())), 0);
}
