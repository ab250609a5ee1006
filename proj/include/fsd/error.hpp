#pragma once

#include <stdexcept>
#include <string>

namespace fsd {

enum class ErrorCode {
  invalid_argument = 1,  // bad shapes, bad config values, bad CLI input
  io = 2,                // missing or unreadable files
  format = 3,            // malformed cache/checkpoint/manifest contents
  runtime = 4,           // numerical failures (NaN loss, divergence)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

inline void check(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) raise(code, msg);
}

inline void check_arg(bool cond, const std::string& msg) {
  check(cond, ErrorCode::invalid_argument, msg);
}

}  // namespace fsd
