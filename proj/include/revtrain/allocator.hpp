#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <new>

namespace revtrain {

struct AllocatorStats {
  std::int64_t live_bytes = 0;
  std::int64_t peak_bytes = 0;
  std::int64_t allocation_count = 0;
};

// Process-wide byte counter fed by every tensor buffer. Scratch workspaces
// (im2col columns, permutation bitsets) are tracked on a separate counter so
// they never show up in tensor peaks.
class MemoryCounter {
 public:
  static MemoryCounter& instance();

  void on_allocate(std::int64_t bytes) noexcept;
  void on_release(std::int64_t bytes) noexcept;
  void on_workspace(std::int64_t bytes) noexcept;

  std::int64_t live_bytes() const noexcept { return live_.load(std::memory_order_relaxed); }
  std::int64_t workspace_peak() const noexcept {
    return workspace_peak_.load(std::memory_order_relaxed);
  }

  // Measurement markers. begin() resets the running peak to the current live
  // byte count and the allocation counter to zero.
  void begin_measurement() noexcept;
  AllocatorStats snapshot() const noexcept;

 private:
  std::atomic<std::int64_t> live_{0};
  std::atomic<std::int64_t> peak_{0};
  std::atomic<std::int64_t> count_{0};
  std::atomic<std::int64_t> workspace_peak_{0};
};

// RAII scope: begin marker on construction; stats() reads the scope so far.
class MemoryScope {
 public:
  MemoryScope() { MemoryCounter::instance().begin_measurement(); }
  AllocatorStats stats() const { return MemoryCounter::instance().snapshot(); }
};

template <typename T>
struct CountingAllocator {
  using value_type = T;

  CountingAllocator() noexcept = default;
  template <typename U>
  CountingAllocator(const CountingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    const auto bytes = static_cast<std::int64_t>(n * sizeof(T));
    T* p = static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{64}));
    MemoryCounter::instance().on_allocate(bytes);
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    MemoryCounter::instance().on_release(static_cast<std::int64_t>(n * sizeof(T)));
    ::operator delete(p, std::align_val_t{64});
  }

  template <typename U>
  bool operator==(const CountingAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace revtrain
