#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

namespace dtwin {

enum class ErrorCode {
  validation,
  transport,
  rate_limit,
  malformed_response,
  backend,
  timeout,
  not_found,
  template_not_found,
  generation,
  degenerate_input,
  processing,
  scoring,
  io,
  restore,
  internal,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the engine; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, nlohmann::json detail = nullptr)
      : std::runtime_error(message), code_(code), detail_(std::move(detail)) {}

  ErrorCode code() const noexcept { return code_; }
  const nlohmann::json& detail() const noexcept { return detail_; }

  // Transport and rate-limit failures may succeed on a later attempt.
  bool retryable() const noexcept {
    return code_ == ErrorCode::transport || code_ == ErrorCode::rate_limit;
  }

 private:
  ErrorCode code_;
  nlohmann::json detail_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message,
                              nlohmann::json detail = nullptr) {
  throw Error(code, message, std::move(detail));
}

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorCode::validation, message);
}

}  // namespace dtwin
