#include "splitckpt/bench.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <mutex>

#include "splitckpt/apps.hpp"
#include "splitckpt/image.hpp"
#include "splitckpt/launcher.hpp"
#include "splitckpt/storage.hpp"

namespace splitckpt {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

uint64_t aggregate_upper_bytes(const Manifest& m) {
  uint64_t total = 0;
  for (const auto& [rank, path] : m.entries) {
    for (const auto& r : read_image_file(path).regions) {
      if (r.tag == Half::Upper) total += r.payload.size();
    }
  }
  return total;
}

std::string backend_label(const std::string& descriptor) { return descriptor.substr(0, descriptor.find(':')); }

namespace {

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

std::vector<std::string> read_outputs(const fs::path& dir, uint32_t world) {
  std::vector<std::string> out;
  for (uint32_t r = 0; r < world; ++r) {
    std::ifstream in(dir / fmt::format("rank{}.out", r));
    out.emplace_back(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  return out;
}

}  // namespace

BenchResult run_benchmark(const BenchConfig& cfg) {
  if (cfg.backends.empty()) throw InvalidParams("bench: no backends");
  if (cfg.sizes.empty()) throw InvalidParams("bench: no sizes");
  if (cfg.reps < 3) throw InvalidParams("bench: reps must be >= 3");
  if (cfg.world == 0) throw InvalidParams("bench: world must be > 0");
  for (const auto& b : cfg.backends) (void)StorageBackend::parse(b, cfg.work_dir);
  validate_app(cfg.app, cfg.app_args);

  Coordinator coord(cfg.coordinator);
  coord.start();
  std::mutex mu;
  Clock::time_point resumed_at;
  CoordinatorObserver obs;
  obs.on_restart_resume = [&](uint32_t) {
    std::lock_guard lk(mu);
    resumed_at = Clock::now();
  };
  coord.set_observer(obs);

  LaunchOptions lo;
  lo.exe = cfg.exe;
  lo.world_size = cfg.world;
  lo.coordinator = coord.endpoint();

  BenchResult result;
  for (const auto& backend : cfg.backends) {
    for (uint64_t size : cfg.sizes) {
      std::vector<double> ckpt_samples, restart_samples;
      BenchRecord cell;
      for (uint32_t rep = 0; rep < cfg.reps; ++rep) {
        const fs::path dir = cfg.work_dir / fmt::format("{}_{}_{}", backend_label(backend), size, rep);
        fs::remove_all(dir);
        fs::create_directories(dir);
        std::vector<std::string> args = cfg.app_args;
        args.push_back(fmt::format("pad={}", size / cfg.world));

        auto fut = coord.request_checkpoint(backend, dir, cfg.ckpt_poll);
        lo.capture_dir = dir / "run";
        const LaunchReport run = launch(lo, cfg.app, args);
        if (fut.wait_for(std::chrono::seconds(60)) != std::future_status::ready) {
          throw CkptTimeout("bench: checkpoint did not complete");
        }
        const CheckpointResult ck = fut.get();
        if (!ck.ok) throw CkptAborted("bench: " + ck.error);
        if (run.exit_status() != 0) throw Error(fmt::format("bench: run exited with {}", run.exit_status()));
        if (!coord.wait_idle(std::chrono::seconds(30))) throw Error("bench: world did not finish");

        const Manifest m = read_manifest(ck.manifest);
        BenchRecord rec;
        rec.app = cfg.app;
        rec.world = cfg.world;
        rec.size = size;
        rec.backend = backend_label(backend);
        rec.epoch = ck.epoch;
        rec.rep = rep;
        rec.ckpt_ms = static_cast<double>(ck.write_time.count()) / 1000.0;
        rec.aggregate_upper_bytes = aggregate_upper_bytes(m);
        for (const auto& [r, p] : m.entries) rec.image_bytes += fs::file_size(p);
        if (rec.aggregate_upper_bytes > rec.image_bytes) {
          throw Error(fmt::format("bench: Upper bytes {} exceed image bytes {}", rec.aggregate_upper_bytes,
                                  rec.image_bytes));
        }

        lo.capture_dir = dir / "restart";
        const auto t0 = Clock::now();
        const LaunchReport re = restart(lo, ck.manifest);
        if (re.exit_status() != 0) throw Error(fmt::format("bench: restart exited with {}", re.exit_status()));
        if (!coord.wait_idle(std::chrono::seconds(30))) throw Error("bench: restarted world did not finish");
        {
          std::lock_guard lk(mu);
          rec.restart_ms = ms_between(t0, resumed_at);
        }
        if (read_outputs(dir / "run", cfg.world) != read_outputs(dir / "restart", cfg.world)) {
          throw Error(fmt::format("bench: restarted output differs from the original run ({})", dir.string()));
        }
        spdlog::info("bench {} {} B rep {}: ckpt {:.1f} ms, restart {:.1f} ms, image {} B", rec.backend, size, rep,
                     rec.ckpt_ms, rec.restart_ms, rec.image_bytes);
        ckpt_samples.push_back(rec.ckpt_ms);
        restart_samples.push_back(rec.restart_ms);
        cell = rec;
        result.raw.push_back(rec);
        fs::remove_all(dir);
      }
      cell.rep = 0;
      cell.ckpt_ms = median(ckpt_samples);
      cell.restart_ms = median(restart_samples);
      result.medians.push_back(cell);
    }
  }
  coord.stop();
  return result;
}

void write_bench_outputs(const fs::path& csv, const BenchResult& r) {
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  {
    std::ofstream out(csv, std::ios::trunc);
    out << "app,world,bytes,backend,ckpt_ms,restart_ms\n";
    for (const auto& x : r.medians) {
      out << fmt::format("{},{},{},{},{:.3f},{:.3f}\n", x.app, x.world, x.aggregate_upper_bytes, x.backend,
                         x.ckpt_ms, x.restart_ms);
    }
    if (!out) throw IoError("cannot write " + csv.string());
  }
  fs::path raw = csv;
  raw.replace_extension(".raw.csv");
  {
    std::ofstream out(raw, std::ios::trunc);
    out << "app,world,size,bytes,image_bytes,backend,rep,epoch,ckpt_ms,restart_ms\n";
    for (const auto& x : r.raw) {
      out << fmt::format("{},{},{},{},{},{},{},{},{:.3f},{:.3f}\n", x.app, x.world, x.size, x.aggregate_upper_bytes,
                         x.image_bytes, x.backend, x.rep, x.epoch, x.ckpt_ms, x.restart_ms);
    }
  }
  fs::path dat = csv;
  dat.replace_extension(".dat");
  std::vector<std::string> backends;
  std::map<uint64_t, std::map<std::string, double>> table;
  for (const auto& x : r.medians) {
    if (std::find(backends.begin(), backends.end(), x.backend) == backends.end()) backends.push_back(x.backend);
    table[x.size][x.backend] = x.ckpt_ms;
  }
  std::ofstream out(dat, std::ios::trunc);
  out << "# size_mib";
  for (const auto& b : backends) out << ' ' << b << "_ckpt_ms";
  out << '\n';
  for (const auto& [size, row] : table) {
    out << fmt::format("{:.3f}", static_cast<double>(size) / (1 << 20));
    for (const auto& b : backends) {
      auto it = row.find(b);
      out << ' ' << (it == row.end() ? std::string("NaN") : fmt::format("{:.3f}", it->second));
    }
    out << '\n';
  }
}

}  // namespace splitckpt
