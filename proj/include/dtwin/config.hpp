#pragma once

#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "dtwin/backends.hpp"
#include "dtwin/http_backend.hpp"
#include "dtwin/inference.hpp"
#include "dtwin/instauf.hpp"
#include "dtwin/mock_backend.hpp"

namespace dtwin {

struct FrameExtractorConfig {
  std::string kind = "manifest";  // manifest | command
  std::string probe_command;
  std::string extract_command;
};

// Everything a CLI command or the server needs to assemble the engine.
struct EngineConfig {
  std::string backend = "mock";  // mock | http
  MockConfig mock;
  HttpBackendConfig http;
  RoleModels models;
  RetryPolicy retry;
  LoopConfig loop;
  GenerationPolicy generation;
  InferenceOptions inference;
  std::string vpi_rules_path;
  FrameExtractorConfig frames;
  FinetuneOptions finetune{std::chrono::milliseconds(1000), std::chrono::hours(2)};
  std::string base_model = "defect-llm";
  std::string loop_system_message = std::string(kDefaultSystemMessage);
  std::string instruction = std::string(kDefaultInstruction);
  std::string data_dir = "data";
  int port = 8080;
  std::string static_dir;

  std::shared_ptr<ModelBackend> make_backend() const;
  BackendSet make_backends() const;
  std::unique_ptr<FrameExtractor> make_frame_extractor(const std::string& frame_dir) const;
};

// Defaults, then the JSON file (if any), then the environment: BACKEND_KIND,
// BACKEND_BASE_URL, BACKEND_API_KEY, DATA_DIR, PORT. Setting BACKEND_BASE_URL
// alone selects the http backend. Mock fine-tunes poll every 10 ms unless
// the file says otherwise.
EngineConfig load_config(const std::optional<std::string>& path);
EngineConfig config_from_json(const nlohmann::json& j);
void apply_env(EngineConfig& cfg);

}  // namespace dtwin
