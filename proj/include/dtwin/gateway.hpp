#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

#include "dtwin/config.hpp"
#include "dtwin/error.hpp"
#include "dtwin/instauf.hpp"
#include "dtwin/store.hpp"

namespace httplib {
class Server;
}

namespace dtwin {

enum class ApiErrorCode { validation, transport, backend, not_found, internal };

std::string_view to_string(ApiErrorCode code);

struct ApiError {
  ApiErrorCode code = ApiErrorCode::internal;
  std::string message;
  nlohmann::json detail = nullptr;

  int http_status() const;  // 400, 503, 502, 404, 500
  bool retryable() const { return code == ApiErrorCode::transport; }
  nlohmann::json body() const;
};

ApiError to_api_error(const Error& e);

// Thrown by Service for failures that already have an API shape.
class ApiException : public std::runtime_error {
 public:
  explicit ApiException(ApiError error)
      : std::runtime_error(error.message), error_(std::move(error)) {}
  const ApiError& error() const { return error_; }

 private:
  ApiError error_;
};

// The engine behind the CLI service mode and the HTTP API. Loop mutations
// run under one writer lock; reads use the last published state copy.
class Service {
 public:
  explicit Service(EngineConfig config);

  nlohmann::json handle_infer(const nlohmann::json& request);
  // {text?, score?, timestamp?, request_id?} -> {action, satisfaction, ft_count, ...}
  nlohmann::json handle_feedback(const nlohmann::json& request);
  // {captions: [string | CaptionRecord], k?, similarity_threshold?, lambda?,
  //  system_message?, request_id?}
  nlohmann::json generate_dataset(const nlohmann::json& request);
  nlohmann::json get_dataset(const std::string& id) const;

  nlohmann::json loop_state() const;
  nlohmann::json loop_report() const;
  nlohmann::json latency_metrics() const;
  nlohmann::json finetune_jobs() const;

  std::shared_ptr<const LoopState> state() const;
  Store& store() { return *store_; }
  const EngineConfig& config() const { return config_; }
  const BackendSet& backends() const { return backends_; }

 private:
  void publish(LoopState s);
  std::optional<nlohmann::json> cached(const std::string& request_id);
  void remember(const std::string& request_id, const nlohmann::json& response);

  EngineConfig config_;
  BackendSet backends_;
  std::vector<VpiRule> vpi_rules_;
  std::unique_ptr<Store> store_;

  std::mutex writer_mu_;
  mutable std::mutex state_mu_;
  std::shared_ptr<const LoopState> state_;

  std::mutex idem_mu_;
  std::map<std::string, nlohmann::json> idempotent_;
};

// Installs the /api routes (and a static mount when static_dir is set).
void register_routes(httplib::Server& server, Service& service, const std::string& static_dir = {});

// Blocks serving on 0.0.0.0:port until the process is stopped.
void serve(Service& service, int port, const std::string& static_dir = {});

}  // namespace dtwin
