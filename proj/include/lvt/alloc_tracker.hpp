#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace lvt::alloc {

// Records every tensor buffer allocated while a scope is active on the
// current thread. Sizes are kept individually so tests can classify blocks
// (e.g. token-proportional vs fixed-size) after the fact.
struct Stats {
  std::uint64_t total_bytes = 0;
  std::uint64_t block_count = 0;
  std::uint64_t largest_block = 0;
  std::vector<std::uint64_t> blocks;

  // Sum of blocks strictly smaller than `threshold` bytes.
  std::uint64_t bytes_below(std::uint64_t threshold) const {
    std::uint64_t s = 0;
    for (auto b : blocks)
      if (b < threshold) s += b;
    return s;
  }
};

class TrackerScope {
 public:
  TrackerScope();
  ~TrackerScope();
  TrackerScope(const TrackerScope&) = delete;
  TrackerScope& operator=(const TrackerScope&) = delete;

  const Stats& stats() const { return stats_; }

 private:
  Stats stats_;
  TrackerScope* prev_;
  friend void on_alloc(std::size_t);
};

// Called by tensor storage and the raw benchmark kernels. No-op when no
// scope is active.
void on_alloc(std::size_t bytes);

bool tracking_active();

}  // namespace lvt::alloc
