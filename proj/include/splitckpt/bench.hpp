#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "splitckpt/coordinator.hpp"
#include "splitckpt/manifest.hpp"

namespace splitckpt {

struct BenchConfig {
  std::string app = "heat";
  uint32_t world = 4;
  /// Aggregate Upper bytes per cell; each rank pads to size / world.
  std::vector<uint64_t> sizes;
  /// Backend descriptors ("fast", "slow", "slow:RATE", "quota:BYTES").
  std::vector<std::string> backends;
  uint32_t reps = 3;
  std::vector<std::string> app_args = {"steps=40", "grid=1024"};
  uint64_t ckpt_poll = 20;
  /// Scratch space for images; cleared after every repetition.
  std::filesystem::path work_dir;
  /// Binary spawned for the ranks; empty means this executable.
  std::filesystem::path exe;
  CoordinatorConfig coordinator;
};

struct BenchRecord {
  std::string app;
  uint32_t world = 0;
  uint64_t size = 0;  // requested aggregate
  uint64_t aggregate_upper_bytes = 0;
  uint64_t image_bytes = 0;
  std::string backend;
  double ckpt_ms = 0;
  double restart_ms = 0;
  uint32_t epoch = 0;
  uint32_t rep = 0;
};

struct BenchResult {
  std::vector<BenchRecord> raw;
  /// One row per (backend, size) cell holding the medians.
  std::vector<BenchRecord> medians;
};

/// Throws InvalidParams for an empty backend list or reps < 3.
BenchResult run_benchmark(const BenchConfig& cfg);

double median(std::vector<double> v);
/// Σ Upper payload bytes over the images a manifest lists.
uint64_t aggregate_upper_bytes(const Manifest& m);
/// Short name used in CSV rows: the descriptor up to the first ':'.
std::string backend_label(const std::string& descriptor);

/// `csv` gets the median rows, `<stem>.raw.csv` every repetition and
/// `<stem>.dat` a whitespace table (size in MiB, one column per backend).
void write_bench_outputs(const std::filesystem::path& csv, const BenchResult& r);

}  // namespace splitckpt
