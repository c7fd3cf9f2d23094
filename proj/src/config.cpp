#include "dtwin/config.hpp"

#include <cstdlib>
#include <fstream>

#include "dtwin/error.hpp"

namespace dtwin {

namespace {

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

}  // namespace

std::shared_ptr<ModelBackend> EngineConfig::make_backend() const {
  if (backend == "mock") return std::make_shared<MockBackend>(mock);
  if (backend == "http") {
    require(!http.base_url.empty(), "http backend needs a base_url");
    return std::make_shared<HttpBackend>(http);
  }
  fail(ErrorCode::validation, "unknown backend '" + backend + "'");
}

BackendSet EngineConfig::make_backends() const {
  return BackendSet(make_backend(), models, retry);
}

std::unique_ptr<FrameExtractor> EngineConfig::make_frame_extractor(const std::string& frame_dir) const {
  if (frames.kind == "manifest") return std::make_unique<ManifestFrameExtractor>(frame_dir);
  if (frames.kind == "command") {
    require(!frames.probe_command.empty() && !frames.extract_command.empty(),
            "command frame extractor needs probe and extract commands");
    return std::make_unique<CommandFrameExtractor>(frames.probe_command, frames.extract_command,
                                                   frame_dir);
  }
  fail(ErrorCode::validation, "unknown frame extractor '" + frames.kind + "'");
}

EngineConfig config_from_json(const nlohmann::json& j) {
  require(j.is_object(), "config must be a JSON object");
  EngineConfig c;
  bool finetune_set = false;
  try {
    c.backend = j.value("backend", c.backend);
    if (j.contains("mock")) {
      const auto& m = j.at("mock");
      c.mock.seed = m.value("seed", c.mock.seed);
      c.mock.delay = std::chrono::milliseconds(m.value("delay_ms", std::int64_t{0}));
      if (m.contains("fixed_reply") && m.at("fixed_reply").is_string()) {
        c.mock.fixed_reply = m.at("fixed_reply").get<std::string>();
      }
      c.mock.scripted = m.value("scripted", c.mock.scripted);
      c.mock.task_replies = m.value("task_replies", c.mock.task_replies);
      c.mock.fail_tasks = m.value("fail_tasks", c.mock.fail_tasks);
      c.mock.transient_failures = m.value("transient_failures", c.mock.transient_failures);
      c.mock.fail_finetune = m.value("fail_finetune", c.mock.fail_finetune);
      c.mock.finetune_polls_to_finish = m.value("finetune_polls_to_finish", c.mock.finetune_polls_to_finish);
      c.mock.embed_dim = m.value("embed_dim", c.mock.embed_dim);
      c.mock.media_dir = m.value("media_dir", c.mock.media_dir);
    }
    if (j.contains("http")) {
      const auto& h = j.at("http");
      c.http.base_url = h.value("base_url", c.http.base_url);
      c.http.api_key = h.value("api_key", c.http.api_key);
      c.http.timeout = std::chrono::seconds(h.value("timeout_s", std::int64_t{120}));
      c.http.media_dir = h.value("media_dir", c.http.media_dir);
    }
    if (j.contains("models")) {
      const auto& m = j.at("models");
      for (auto role : {ModelRole::chat, ModelRole::vision, ModelRole::text_to_image,
                        ModelRole::judge, ModelRole::embed}) {
        const std::string key(to_string(role));
        if (m.contains(key)) c.models.get(role) = m.at(key).get<std::string>();
      }
    }
    if (j.contains("retry")) {
      const auto& r = j.at("retry");
      c.retry.max_retries = r.value("max_retries", c.retry.max_retries);
      c.retry.base_backoff = std::chrono::milliseconds(r.value("base_backoff_ms", std::int64_t{200}));
    }
    if (j.contains("loop")) c.loop = j.at("loop").get<LoopConfig>();
    if (j.contains("generation")) {
      c.generation = j.at("generation").get<GenerationPolicy>();
      if (!j.contains("loop") || !j.at("loop").contains("generation")) c.loop.generation = c.generation;
    }
    if (j.contains("inference")) {
      const auto& i = j.at("inference");
      c.inference.fps = i.value("fps", c.inference.fps);
      c.inference.frames_per_batch = i.value("frames_per_batch", c.inference.frames_per_batch);
      c.inference.parallel_frames = i.value("parallel_frames", c.inference.parallel_frames);
      if (i.contains("params")) c.inference.params = i.at("params").get<SamplingParams>();
      c.inference.system_message = i.value("system_message", c.inference.system_message);
      c.vpi_rules_path = i.value("vpi_rules", c.vpi_rules_path);
      if (i.contains("frame_extractor")) {
        const auto& f = i.at("frame_extractor");
        c.frames.kind = f.value("kind", c.frames.kind);
        c.frames.probe_command = f.value("probe", c.frames.probe_command);
        c.frames.extract_command = f.value("extract", c.frames.extract_command);
      }
    }
    if (j.contains("finetune")) {
      const auto& f = j.at("finetune");
      finetune_set = true;
      c.finetune.poll_interval = std::chrono::milliseconds(f.value("poll_interval_ms", std::int64_t{1000}));
      c.finetune.timeout = std::chrono::milliseconds(f.value("timeout_ms", std::int64_t{7200000}));
    }
    c.base_model = j.value("base_model", c.base_model);
    c.loop_system_message = j.value("system_message", c.loop_system_message);
    c.instruction = j.value("instruction", c.instruction);
    c.data_dir = j.value("data_dir", c.data_dir);
    c.port = j.value("port", c.port);
    c.static_dir = j.value("static_dir", c.static_dir);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::validation, std::string("bad config: ") + e.what());
  }
  if (!finetune_set && c.backend == "mock") c.finetune.poll_interval = std::chrono::milliseconds(10);
  if (!j.contains("models") || !j.at("models").contains("chat")) c.models.chat = c.base_model;
  c.loop.validate();
  c.generation.validate();
  c.inference.params.validate();
  return c;
}

void apply_env(EngineConfig& cfg) {
  const auto kind = env("BACKEND_KIND");
  const auto url = env("BACKEND_BASE_URL");
  if (url) cfg.http.base_url = *url;
  if (auto key = env("BACKEND_API_KEY")) cfg.http.api_key = *key;
  if (kind) {
    cfg.backend = *kind;
  } else if (url) {
    cfg.backend = "http";
  }
  if (cfg.backend == "http" && cfg.finetune.poll_interval < std::chrono::milliseconds(1000)) {
    cfg.finetune.poll_interval = std::chrono::milliseconds(1000);
  }
  if (auto d = env("DATA_DIR")) cfg.data_dir = *d;
  if (auto p = env("PORT")) {
    try {
      cfg.port = std::stoi(*p);
    } catch (const std::exception&) {
      fail(ErrorCode::validation, "PORT must be an integer");
    }
  }
}

EngineConfig load_config(const std::optional<std::string>& path) {
  nlohmann::json j = nlohmann::json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) fail(ErrorCode::io, "cannot read config " + *path);
    j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) fail(ErrorCode::validation, "config is not valid JSON: " + *path);
  }
  auto cfg = config_from_json(j);
  apply_env(cfg);
  return cfg;
}

}  // namespace dtwin
