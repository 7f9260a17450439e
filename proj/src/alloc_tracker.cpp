#include "lvt/alloc_tracker.hpp"

#include <algorithm>

namespace lvt::alloc {

namespace {
thread_local TrackerScope* g_scope = nullptr;
}

TrackerScope::TrackerScope() : prev_(g_scope) { g_scope = this; }

TrackerScope::~TrackerScope() { g_scope = prev_; }

void on_alloc(std::size_t bytes) {
  // Every enclosing scope sees the allocation, so nested measurements
  // (e.g. a per-phase scope inside a whole-run scope) stay consistent.
  for (TrackerScope* s = g_scope; s; s = s->prev_) {
    s->stats_.total_bytes += bytes;
    s->stats_.block_count += 1;
    s->stats_.largest_block = std::max<std::uint64_t>(s->stats_.largest_block, bytes);
    s->stats_.blocks.push_back(bytes);
  }
}

bool tracking_active() { return g_scope != nullptr; }

}  // namespace lvt::alloc
