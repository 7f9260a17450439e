#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace lvt::flops {

// Analytic FLOP ledger keyed by operation class. Counts are pure functions
// of shapes (one multiply-accumulate = 2 FLOPs) and never touch the numeric
// path, so instrumented and uninstrumented runs produce identical values.
struct Report {
  std::map<std::string, std::uint64_t> by_class;

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& [k, v] : by_class) t += v;
    return t;
  }
};

class CounterScope {
 public:
  CounterScope();
  ~CounterScope();
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

  const Report& report() const { return report_; }

 private:
  Report report_;
  CounterScope* prev_;
  friend void add(const char*, std::uint64_t);
};

// No-op unless a CounterScope is active on this thread.
void add(const char* op_class, std::uint64_t flop_count);

bool counting_active();

}  // namespace lvt::flops
