#include "revtrain/allocator.hpp"

namespace revtrain {

MemoryCounter& MemoryCounter::instance() {
  static MemoryCounter counter;
  return counter;
}

void MemoryCounter::on_allocate(std::int64_t bytes) noexcept {
  const std::int64_t now = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  count_.fetch_add(1, std::memory_order_relaxed);
  std::int64_t prev = peak_.load(std::memory_order_relaxed);
  while (now > prev && !peak_.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
  }
}

void MemoryCounter::on_release(std::int64_t bytes) noexcept {
  live_.fetch_sub(bytes, std::memory_order_relaxed);
}

void MemoryCounter::on_workspace(std::int64_t bytes) noexcept {
  std::int64_t prev = workspace_peak_.load(std::memory_order_relaxed);
  while (bytes > prev &&
         !workspace_peak_.compare_exchange_weak(prev, bytes, std::memory_order_relaxed)) {
  }
}

void MemoryCounter::begin_measurement() noexcept {
  peak_.store(live_.load(std::memory_order_relaxed), std::memory_order_relaxed);
  count_.store(0, std::memory_order_relaxed);
}

AllocatorStats MemoryCounter::snapshot() const noexcept {
  AllocatorStats s;
  s.live_bytes = live_.load(std::memory_order_relaxed);
  s.peak_bytes = peak_.load(std::memory_order_relaxed);
  s.allocation_count = count_.load(std::memory_order_relaxed);
  return s;
}

}  // namespace revtrain
