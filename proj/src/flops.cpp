#include "lvt/flops.hpp"

namespace lvt::flops {

namespace {
thread_local CounterScope* g_scope = nullptr;
}

CounterScope::CounterScope() : prev_(g_scope) { g_scope = this; }

CounterScope::~CounterScope() { g_scope = prev_; }

void add(const char* op_class, std::uint64_t flop_count) {
  for (CounterScope* s = g_scope; s; s = s->prev_)
    s->report_.by_class[op_class] += flop_count;
}

bool counting_active() { return g_scope != nullptr; }

}  // namespace lvt::flops
