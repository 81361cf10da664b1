#pragma once

#include <atomic>
#include <cstddef>
#include <new>
#include <unordered_map>
#include <vector>

namespace amgru::memory {

// Byte counters for tensor/network working storage. Path buffers use a
// separate category so the training footprint can be reported without the
// O(NMd) simulation data.
enum class Category { Working = 0, Paths = 1 };

struct Counters {
  std::atomic<std::size_t> live{0};
  std::atomic<std::size_t> peak{0};
};

inline Counters& counters(Category c) {
  static Counters table[2];
  return table[static_cast<int>(c)];
}

inline void on_alloc(Category c, std::size_t bytes) {
  auto& k = counters(c);
  std::size_t now = k.live.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  std::size_t prev = k.peak.load(std::memory_order_relaxed);
  while (now > prev &&
         !k.peak.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
  }
}

inline void on_free(Category c, std::size_t bytes) {
  counters(c).live.fetch_sub(bytes, std::memory_order_relaxed);
}

inline std::size_t live_bytes(Category c = Category::Working) {
  return counters(c).live.load(std::memory_order_relaxed);
}

inline std::size_t peak_bytes(Category c = Category::Working) {
  return counters(c).peak.load(std::memory_order_relaxed);
}

/// Restarts peak tracking from the current live level.
inline void reset_peak(Category c = Category::Working) {
  auto& k = counters(c);
  k.peak.store(k.live.load(std::memory_order_relaxed), std::memory_order_relaxed);
}

/// Per-thread cache of large blocks keyed by exact size. Tapes allocate the
/// same shapes every timestep, so reuse avoids fresh zero pages from the
/// kernel on each step.
class BlockPool {
 public:
  static constexpr std::size_t min_block = 1 << 16;
  static constexpr std::size_t max_cached = std::size_t{1} << 30;

  static BlockPool& local() {
    thread_local BlockPool pool;
    return pool;
  }

  void* acquire(std::size_t bytes) {
    if (bytes >= min_block) {
      auto it = free_.find(bytes);
      if (it != free_.end() && !it->second.empty()) {
        void* p = it->second.back();
        it->second.pop_back();
        cached_ -= bytes;
        return p;
      }
    }
    return ::operator new(bytes);
  }

  void release(void* p, std::size_t bytes) noexcept {
    if (bytes >= min_block && cached_ + bytes <= max_cached) {
      try {
        free_[bytes].push_back(p);
        cached_ += bytes;
        return;
      } catch (...) {
      }
    }
    ::operator delete(p);
  }

  ~BlockPool() {
    for (auto& [bytes, blocks] : free_)
      for (void* p : blocks) ::operator delete(p);
  }

 private:
  std::unordered_map<std::size_t, std::vector<void*>> free_;
  std::size_t cached_ = 0;
};

template <class T, Category C = Category::Working>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U, C>&) noexcept {}

  T* allocate(std::size_t n) {
    T* p = static_cast<T*>(BlockPool::local().acquire(n * sizeof(T)));
    on_alloc(C, n * sizeof(T));
    return p;
  }

  void deallocate(T* p, std::size_t n) noexcept {
    on_free(C, n * sizeof(T));
    BlockPool::local().release(p, n * sizeof(T));
  }

  template <class U>
  struct rebind {
    using other = TrackingAllocator<U, C>;
  };

  friend bool operator==(const TrackingAllocator&, const TrackingAllocator&) { return true; }
  friend bool operator!=(const TrackingAllocator&, const TrackingAllocator&) { return false; }
};

}  // namespace amgru::memory
