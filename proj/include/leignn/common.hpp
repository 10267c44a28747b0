#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace leignn {

/// Exception type thrown by every precondition / validation failure in the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

inline std::atomic<bool>& strict_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

}  // namespace detail

/// When strict mode is on, tensor primitives reject non-finite inputs.
inline void set_strict_mode(bool on) {
  detail::strict_flag().store(on, std::memory_order_relaxed);
}

inline bool strict_mode() {
  return detail::strict_flag().load(std::memory_order_relaxed);
}

}  // namespace leignn
