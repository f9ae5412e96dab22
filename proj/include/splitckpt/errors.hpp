#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace splitckpt {

/// Base of every recoverable error raised by the framework.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A broken internal invariant (e.g. re-entrant CHANGES_PENDING). Not
/// meant to be handled; tests catch it to prove detection.
class GuardViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// region-registry

class RegionError : public Error {
 public:
  using Error::Error;
};
class AlignmentError : public RegionError {
 public:
  using RegionError::RegionError;
};
class ArenaViolation : public RegionError {
 public:
  using RegionError::RegionError;
};
class ArenaExhausted : public RegionError {
 public:
  using RegionError::RegionError;
};
class UnknownRegion : public RegionError {
 public:
  using RegionError::RegionError;
};

struct RegionSpan {
  uint64_t start = 0;
  uint64_t length = 0;
  std::string label;
};

class OverlapError : public RegionError {
 public:
  OverlapError(const std::string& what, std::vector<RegionSpan> conflicts)
      : RegionError(what), conflicts_(std::move(conflicts)) {}
  const std::vector<RegionSpan>& conflicts() const { return conflicts_; }

 private:
  std::vector<RegionSpan> conflicts_;
};

// fd bookkeeping

class BandExhausted : public Error {
 public:
  using Error::Error;
};
class FdConflict : public Error {
 public:
  using Error::Error;
};

// runtime

class CoordinatorUnreachable : public Error {
 public:
  using Error::Error;
};
class CoordinatorLost : public Error {
 public:
  using Error::Error;
};
class PeerTimeout : public Error {
 public:
  using Error::Error;
};
class InvalidRank : public Error {
 public:
  using Error::Error;
};
class InvalidCommunicator : public Error {
 public:
  using Error::Error;
};
class InvalidTag : public Error {
 public:
  using Error::Error;
};
class UnknownToken : public Error {
 public:
  using Error::Error;
};
class LengthMismatch : public Error {
 public:
  using Error::Error;
};
class PendingOperations : public Error {
 public:
  using Error::Error;
};
class TransportError : public Error {
 public:
  using Error::Error;
};
class ProtocolError : public Error {
 public:
  using Error::Error;
};
class ReplayMismatch : public Error {
 public:
  using Error::Error;
};
class RegistrationRejected : public Error {
 public:
  using Error::Error;
};

// checkpoint image

class ImageCorrupt : public Error {
 public:
  using Error::Error;
};
class BadMagic : public ImageCorrupt {
 public:
  using ImageCorrupt::ImageCorrupt;
};
class VersionMismatch : public ImageCorrupt {
 public:
  using ImageCorrupt::ImageCorrupt;
};
class Truncated : public ImageCorrupt {
 public:
  using ImageCorrupt::ImageCorrupt;
};

enum class ImageSection : uint8_t { Header, Regions, CallLog, Pending, Fds };
const char* to_string(ImageSection s);

class CrcMismatch : public ImageCorrupt {
 public:
  explicit CrcMismatch(ImageSection section)
      : ImageCorrupt(std::string("CRC mismatch in section ") + to_string(section)),
        section_(section) {}
  ImageSection section() const { return section_; }

 private:
  ImageSection section_;
};

// storage

class InsufficientSpace : public Error {
 public:
  InsufficientSpace(uint64_t required, uint64_t available)
      : Error("insufficient storage for checkpoint image: required " +
              std::to_string(required) + " bytes, available " +
              std::to_string(available) + " bytes"),
        required_(required),
        available_(available) {}
  uint64_t required() const { return required_; }
  uint64_t available() const { return available_; }

 private:
  uint64_t required_;
  uint64_t available_;
};
class IoError : public Error {
 public:
  using Error::Error;
};

// coordinator

class BindFailure : public Error {
 public:
  using Error::Error;
};
class CkptAborted : public Error {
 public:
  using Error::Error;
};
class CkptTimeout : public Error {
 public:
  using Error::Error;
};

// restart

class RestartError : public Error {
 public:
  using Error::Error;
};
class MissingRank : public Error {
 public:
  explicit MissingRank(uint32_t rank)
      : Error("manifest has no image for rank " + std::to_string(rank)), rank_(rank) {}
  uint32_t rank() const { return rank_; }

 private:
  uint32_t rank_;
};
class DuplicateRank : public Error {
 public:
  explicit DuplicateRank(uint32_t rank)
      : Error("manifest lists rank " + std::to_string(rank) + " twice"), rank_(rank) {}
  uint32_t rank() const { return rank_; }

 private:
  uint32_t rank_;
};
class MalformedLine : public Error {
 public:
  using Error::Error;
};

// launcher / apps

class SpawnFailure : public Error {
 public:
  using Error::Error;
};
class ArgvBudgetExceeded : public Error {
 public:
  ArgvBudgetExceeded(std::size_t length, std::size_t budget)
      : Error("child command line is " + std::to_string(length) +
              " bytes, over the argv budget of " + std::to_string(budget) +
              " bytes (use --args-file)"),
        length_(length),
        budget_(budget) {}
  std::size_t length() const { return length_; }
  std::size_t budget() const { return budget_; }

 private:
  std::size_t length_;
  std::size_t budget_;
};
class InvalidParams : public Error {
 public:
  using Error::Error;
};

}  // namespace splitckpt
