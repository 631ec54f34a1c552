#pragma once

#include <cstdint>

namespace vphype::flops {

// Thread-local forward-pass FLOP counter. Primitives add their analytic
// operation counts as they execute, so a reset/read pair around a forward
// call yields an exact, deterministic count for that call.
inline std::uint64_t& counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

inline void reset() { counter() = 0; }
inline void add(std::uint64_t n) { counter() += n; }
inline std::uint64_t count() { return counter(); }

}  // namespace vphype::flops
