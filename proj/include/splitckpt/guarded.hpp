#pragma once

#include <atomic>
#include <mutex>
#include <thread>
#include <utility>

#include "splitckpt/errors.hpp"

namespace splitckpt {

/// The CHANGES_PENDING flag. Setting it while it is already set is a fatal
/// invariant violation: either a re-entrant mutation or two writers racing
/// on a structure that was supposed to be single-writer.
class ChangesPending {
 public:
  class Scope {
   public:
    explicit Scope(ChangesPending& owner) : owner_(&owner) {}
    Scope(Scope&& o) noexcept : owner_(std::exchange(o.owner_, nullptr)) {}
    Scope& operator=(Scope&&) = delete;
    ~Scope() {
      if (owner_) owner_->flag_.store(false, std::memory_order_release);
    }

   private:
    ChangesPending* owner_;
  };

  [[nodiscard]] Scope begin(const char* what) {
    bool expected = false;
    if (!flag_.compare_exchange_strong(expected, true, std::memory_order_acq_rel)) {
      throw GuardViolation(std::string("CHANGES_PENDING already set: ") + what);
    }
    return Scope(*this);
  }

  bool pending() const { return flag_.load(std::memory_order_acquire); }

 private:
  std::atomic<bool> flag_{false};
};

/// A value plus a mutex plus a CHANGES_PENDING flag. Mutation happens only
/// through an Access, which holds the lock and keeps the flag set. Asking for
/// a second Access from the thread that already holds one throws
/// GuardViolation instead of deadlocking.
template <class T>
class GuardedCell {
 public:
  class Access {
   public:
    T& operator*() const { return cell_->value_; }
    T* operator->() const { return &cell_->value_; }

    Access(Access&& o) noexcept
        : cell_(std::exchange(o.cell_, nullptr)),
          lock_(std::move(o.lock_)),
          scope_(std::move(o.scope_)) {}
    Access& operator=(Access&&) = delete;
    ~Access() {
      if (cell_) cell_->holder_.store(std::thread::id{}, std::memory_order_release);
    }

   private:
    friend class GuardedCell;
    Access(GuardedCell* cell, std::unique_lock<std::mutex> lock, ChangesPending::Scope scope)
        : cell_(cell), lock_(std::move(lock)), scope_(std::move(scope)) {}

    GuardedCell* cell_;
    std::unique_lock<std::mutex> lock_;
    ChangesPending::Scope scope_;
  };

  GuardedCell() = default;
  template <class... Args>
  explicit GuardedCell(std::in_place_t, Args&&... args) : value_(std::forward<Args>(args)...) {}

  [[nodiscard]] Access lock(const char* what = "GuardedCell") {
    if (holder_.load(std::memory_order_acquire) == std::this_thread::get_id()) {
      throw GuardViolation(std::string("re-entrant acquisition of ") + what);
    }
    std::unique_lock<std::mutex> lk(mu_);
    auto scope = pending_.begin(what);
    holder_.store(std::this_thread::get_id(), std::memory_order_release);
    return Access(this, std::move(lk), std::move(scope));
  }

  template <class F>
  decltype(auto) with(F&& f, const char* what = "GuardedCell") {
    auto access = lock(what);
    return std::forward<F>(f)(*access);
  }

  bool changes_pending() const { return pending_.pending(); }

 private:
  std::mutex mu_;
  std::atomic<std::thread::id> holder_{};
  ChangesPending pending_;
  T value_{};
};

}  // namespace splitckpt
