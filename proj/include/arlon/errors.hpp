#pragma once
#include <stdexcept>
#include <string>

namespace arlon {

// Bad configs, bad arguments, malformed files, unsatisfied preconditions.
// The CLI maps this to exit code 2.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A pipeline stage blew up mid-flight (non-finite loss, missing upstream
// artifact discovered late, ...). The CLI maps this to exit code 3.
struct StageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require_that(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace arlon
