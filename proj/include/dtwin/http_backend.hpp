#pragma once

#include <chrono>
#include <string>

#include "dtwin/backends.hpp"

namespace dtwin {

struct HttpBackendConfig {
  // e.g. "http://localhost:8000/v1"; endpoint paths are appended to the path part.
  std::string base_url;
  std::string api_key;
  std::chrono::seconds timeout{120};
  // Directory for generated images returned inline as base64.
  std::string media_dir = "media";

  // BACKEND_BASE_URL / BACKEND_API_KEY.
  static HttpBackendConfig from_env();
};

// Chat-completion style JSON-over-HTTP client:
//   POST {base}/chat/completions, /embeddings, /images/generations, /files,
//   /fine_tuning/jobs and GET /fine_tuning/jobs/{id}.
// "context" messages travel as system messages prefixed with "Context: ";
// image media travel as image_url parts (local files inlined as data URLs).
class HttpBackend : public ModelBackend {
 public:
  explicit HttpBackend(HttpBackendConfig config);

  std::string name() const override { return "http"; }
  RawCompletion complete(const ComposedPrompt& prompt, const SamplingParams& params,
                         const std::string& model_id) override;
  GeneratedImage generate_image(const std::string& prompt, const std::string& model_id) override;
  std::vector<double> embed(const std::string& text, const std::string& model_id) override;
  FinetuneJob submit_finetune(const std::string& base_model_id, const std::string& dataset_ref,
                              const SamplingParams& params) override;
  FinetuneJob poll_finetune(const std::string& job_id) override;

  // Request body sent for a chat completion; exposed for wire-format tests.
  nlohmann::json chat_request(const ComposedPrompt& prompt, const SamplingParams& params,
                              const std::string& model_id) const;

 private:
  nlohmann::json post_json(const std::string& path, const nlohmann::json& body) const;
  nlohmann::json get_json(const std::string& path) const;

  HttpBackendConfig config_;
  std::string origin_;  // scheme://host[:port]
  std::string prefix_;  // path part of base_url without trailing slash
};

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view encoded);

}  // namespace dtwin
