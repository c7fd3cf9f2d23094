#include "dtwin/error.hpp"

namespace dtwin {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::validation: return "validation";
    case ErrorCode::transport: return "transport";
    case ErrorCode::rate_limit: return "rate_limit";
    case ErrorCode::malformed_response: return "malformed_response";
    case ErrorCode::backend: return "backend";
    case ErrorCode::timeout: return "timeout";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::template_not_found: return "template_not_found";
    case ErrorCode::generation: return "generation";
    case ErrorCode::degenerate_input: return "degenerate_input";
    case ErrorCode::processing: return "processing";
    case ErrorCode::scoring: return "scoring";
    case ErrorCode::io: return "io";
    case ErrorCode::restore: return "restore";
    case ErrorCode::internal: return "internal";
  }
  return "internal";
}

}  // namespace dtwin
