#include "splitckpt/storage.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <fmt/format.h>

#include <cerrno>
#include <cstring>
#include <mutex>
#include <thread>

#include "splitckpt/errors.hpp"

namespace splitckpt {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

std::mutex g_fault_mu;
FaultInjector g_fault;

constexpr std::size_t kChunk = 64 * 1024;

std::optional<uint64_t> fault_for(const fs::path& path) {
  std::lock_guard lk(g_fault_mu);
  if (!g_fault) return std::nullopt;
  return g_fault(path);
}

class TmpFile {
 public:
  explicit TmpFile(fs::path path) : path_(std::move(path)) {
    fd_ = ::open(path_.c_str(), O_CREAT | O_TRUNC | O_WRONLY | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError(fmt::format("open {}: {}", path_.string(), std::strerror(errno)));
  }
  ~TmpFile() {
    if (fd_ >= 0) ::close(fd_);
    if (!committed_) {
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }

  void preallocate(uint64_t len) {
    if (len == 0) return;
    const int rc = ::posix_fallocate(fd_, 0, static_cast<off_t>(len));
    if (rc != 0) throw IoError(fmt::format("fallocate {}: {}", path_.string(), std::strerror(rc)));
  }

  void write(std::span<const std::byte> b) {
    std::size_t off = 0;
    while (off < b.size()) {
      ssize_t n = ::write(fd_, b.data() + off, b.size() - off);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw IoError(fmt::format("write {}: {}", path_.string(), std::strerror(errno)));
      off += static_cast<std::size_t>(n);
    }
  }

  void sync_and_close() {
    if (::fsync(fd_) != 0) throw IoError(fmt::format("fsync {}: {}", path_.string(), std::strerror(errno)));
    const int fd = fd_;
    fd_ = -1;
    if (::close(fd) != 0) throw IoError(fmt::format("close {}: {}", path_.string(), std::strerror(errno)));
  }

  void commit_to(const fs::path& final_path) {
    std::error_code ec;
    fs::rename(path_, final_path, ec);
    if (ec) throw IoError(fmt::format("rename to {}: {}", final_path.string(), ec.message()));
    committed_ = true;
  }

 private:
  fs::path path_;
  int fd_ = -1;
  bool committed_ = false;
};

class DirLock {
 public:
  explicit DirLock(const fs::path& root) {
    const auto p = root / ".quota.lock";
    fd_ = ::open(p.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError(fmt::format("open {}: {}", p.string(), std::strerror(errno)));
    while (::flock(fd_, LOCK_EX) != 0) {
      if (errno != EINTR) throw IoError(fmt::format("flock {}: {}", p.string(), std::strerror(errno)));
    }
  }
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

void sync_dir(const fs::path& dir) {
  int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
  if (fd >= 0) {
    ::fsync(fd);
    ::close(fd);
  }
}

}  // namespace

uint64_t parse_size(std::string_view text) {
  if (text.empty()) throw std::invalid_argument("empty size");
  uint64_t mult = 1;
  switch (text.back()) {
    case 'K': case 'k': mult = 1ull << 10; text.remove_suffix(1); break;
    case 'M': case 'm': mult = 1ull << 20; text.remove_suffix(1); break;
    case 'G': case 'g': mult = 1ull << 30; text.remove_suffix(1); break;
    default: break;
  }
  const std::string digits(text);
  std::size_t used = 0;
  uint64_t v = 0;
  try {
    v = std::stoull(digits, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (digits.empty() || used != digits.size()) {
    throw std::invalid_argument(fmt::format("bad size '{}'", digits));
  }
  return v * mult;
}

StorageBackend StorageBackend::parse(std::string_view descriptor, fs::path root) {
  StorageBackend b;
  b.root = std::move(root);
  const auto colon = descriptor.find(':');
  const auto kind = descriptor.substr(0, colon);
  const auto arg = colon == std::string_view::npos ? std::string_view{} : descriptor.substr(colon + 1);
  if (kind == "fast") {
    b.kind = BackendKind::DirFast;
  } else if (kind == "slow") {
    b.kind = BackendKind::DirSlow;
    if (!arg.empty()) b.throttle_bytes_per_sec = parse_size(arg);
    if (b.throttle_bytes_per_sec == 0) throw std::invalid_argument("slow backend rate must be > 0");
  } else if (kind == "quota") {
    b.kind = BackendKind::DirQuota;
    if (arg.empty()) throw std::invalid_argument("quota backend needs a capacity: quota:BYTES");
    b.capacity_bytes = parse_size(arg);
  } else {
    throw std::invalid_argument(fmt::format("unknown backend '{}'", descriptor));
  }
  return b;
}

std::string StorageBackend::descriptor() const {
  switch (kind) {
    case BackendKind::DirFast: return "fast";
    case BackendKind::DirSlow: return fmt::format("slow:{}", throttle_bytes_per_sec);
    case BackendKind::DirQuota: return fmt::format("quota:{}", capacity_bytes);
  }
  return "fast";
}

uint64_t StorageBackend::used_bytes() const {
  uint64_t total = 0;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(root, ec)) {
    std::error_code ec2;
    if (entry.is_regular_file(ec2)) total += entry.file_size(ec2);
  }
  return total;
}

std::optional<uint64_t> StorageBackend::available_bytes() const {
  if (kind != BackendKind::DirQuota) return std::nullopt;
  const uint64_t used = used_bytes();
  return used >= capacity_bytes ? 0 : capacity_bytes - used;
}

ImageReceipt write_image_file(const StorageBackend& backend, const fs::path& path,
                              std::span<const std::byte> bytes) {
  const auto t0 = Clock::now();
  const bool quota = backend.kind == BackendKind::DirQuota;
  if (auto avail = backend.available_bytes(); avail && bytes.size() > *avail) {
    throw InsufficientSpace(bytes.size(), *avail);
  }
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError(fmt::format("mkdir {}: {}", path.parent_path().string(), ec.message()));

  const auto fault_after = fault_for(path);
  fs::path tmp = path;
  tmp += ".tmp";
  std::optional<TmpFile> file;
  if (quota) {
    // Check and claim under one lock so concurrent ranks cannot both pass
    // the preflight; the claim is the preallocated tmp file itself.
    DirLock lock(backend.root);
    if (auto avail = backend.available_bytes(); avail && bytes.size() > *avail) {
      throw InsufficientSpace(bytes.size(), *avail);
    }
    file.emplace(tmp);
    file->preallocate(bytes.size());
  } else {
    file.emplace(tmp);
  }

  const bool throttled = backend.kind == BackendKind::DirSlow;
  const double rate = throttled ? static_cast<double>(backend.throttle_bytes_per_sec) /
                                      std::max<uint32_t>(1, backend.writers)
                                : 0.0;
  auto due = [&](std::size_t done) {
    return t0 + std::chrono::duration_cast<Clock::duration>(
                    std::chrono::duration<double>(static_cast<double>(done) / rate));
  };

  std::size_t done = 0;
  while (done < bytes.size()) {
    std::size_t n = std::min(kChunk, bytes.size() - done);
    if (fault_after && done + n > *fault_after) {
      file->write(bytes.subspan(done, static_cast<std::size_t>(*fault_after - done)));
      throw IoError(fmt::format("injected I/O fault after {} bytes writing {}", *fault_after,
                                path.string()));
    }
    if (throttled) std::this_thread::sleep_until(due(done));
    file->write(bytes.subspan(done, n));
    done += n;
  }
  if (fault_after && *fault_after == bytes.size()) {
    throw IoError(fmt::format("injected I/O fault at flush writing {}", path.string()));
  }
  // The throttle models the data transfer; fsync and rename come on top.
  if (throttled) std::this_thread::sleep_until(due(bytes.size()));
  file->sync_and_close();
  file->commit_to(path);
  sync_dir(path.parent_path());

  return {bytes.size(),
          std::chrono::duration_cast<std::chrono::microseconds>(Clock::now() - t0)};
}

void set_fault_injector(FaultInjector injector) {
  std::lock_guard lk(g_fault_mu);
  g_fault = std::move(injector);
}

}  // namespace splitckpt
