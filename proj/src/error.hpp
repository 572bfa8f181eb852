#pragma once

#include <stdexcept>
#include <string>

namespace stark {

enum class ErrorCode {
  dimension,
  parameter,
  contract,
  input,
  mask,
  rewind,
  io,
  numeric,
  unreliable_check,
  config,
  stage,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, std::string(to_string(code)) + " error: " + what);
}

}  // namespace stark
