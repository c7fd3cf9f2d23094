#include "dtwin/http_backend.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <openssl/evp.h>

#include "dtwin/error.hpp"
#include "dtwin/text.hpp"

namespace dtwin {

namespace {

std::string env_or(const char* name, std::string fallback) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : std::move(fallback);
}

std::string mime_for(const std::filesystem::path& p) {
  auto ext = text::to_lower(p.extension().string());
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".webp") return "image/webp";
  if (ext == ".gif") return "image/gif";
  return "image/png";
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::validation, "cannot read media file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json parse_body(const httplib::Result& res, const std::string& what) {
  if (!res) {
    fail(ErrorCode::transport, what + ": " + httplib::to_string(res.error()));
  }
  const int status = res->status;
  if (status == 429) fail(ErrorCode::rate_limit, what + ": rate limited", {{"status", status}});
  if (status == 408 || status >= 500) {
    fail(ErrorCode::transport, what + ": HTTP " + std::to_string(status),
         {{"status", status}, {"body", res->body}});
  }
  if (status >= 400) {
    fail(ErrorCode::backend, what + ": HTTP " + std::to_string(status),
         {{"status", status}, {"body", res->body}});
  }
  auto j = nlohmann::json::parse(res->body, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::malformed_response, what + ": body is not JSON");
  return j;
}

FinetuneJob job_from_wire(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("id") || !j.contains("status")) {
    fail(ErrorCode::malformed_response, "fine-tune job response lacks id/status");
  }
  FinetuneJob job;
  job.job_id = j.at("id").get<std::string>();
  job.base_model_id = j.value("model", "");
  job.status = job_status_from_string(j.at("status").get<std::string>());
  if (j.contains("fine_tuned_model") && j.at("fine_tuned_model").is_string()) {
    job.result_model_id = j.at("fine_tuned_model").get<std::string>();
  }
  if (j.contains("error") && j.at("error").is_object()) {
    job.error = j.at("error").value("message", "");
  }
  return job;
}

}  // namespace

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view encoded) {
  std::string clean;
  for (char c : encoded)
    if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
  if (clean.size() % 4 != 0) fail(ErrorCode::malformed_response, "invalid base64 length");
  std::string out(3 * clean.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(clean.data()),
                                static_cast<int>(clean.size()));
  if (n < 0) fail(ErrorCode::malformed_response, "invalid base64 payload");
  std::size_t padding = 0;
  if (!clean.empty() && clean.back() == '=') ++padding;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++padding;
  out.resize(static_cast<std::size_t>(n) - padding);
  return out;
}

HttpBackendConfig HttpBackendConfig::from_env() {
  HttpBackendConfig c;
  c.base_url = env_or("BACKEND_BASE_URL", "http://localhost:8000/v1");
  c.api_key = env_or("BACKEND_API_KEY", "");
  return c;
}

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
  const auto scheme_end = config_.base_url.find("://");
  require(scheme_end != std::string::npos, "backend base URL needs a scheme: " + config_.base_url);
  const auto path_start = config_.base_url.find('/', scheme_end + 3);
  origin_ = config_.base_url.substr(0, path_start);
  prefix_ = path_start == std::string::npos ? "" : config_.base_url.substr(path_start);
  while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
}

nlohmann::json HttpBackend::post_json(const std::string& path, const nlohmann::json& body) const {
  httplib::Client cli(origin_);
  cli.set_connection_timeout(config_.timeout);
  cli.set_read_timeout(config_.timeout);
  if (!config_.api_key.empty()) cli.set_bearer_token_auth(config_.api_key);
  auto res = cli.Post(prefix_ + path, body.dump(), "application/json");
  return parse_body(res, "POST " + path);
}

nlohmann::json HttpBackend::get_json(const std::string& path) const {
  httplib::Client cli(origin_);
  cli.set_connection_timeout(config_.timeout);
  cli.set_read_timeout(config_.timeout);
  if (!config_.api_key.empty()) cli.set_bearer_token_auth(config_.api_key);
  auto res = cli.Get(prefix_ + path);
  return parse_body(res, "GET " + path);
}

nlohmann::json HttpBackend::chat_request(const ComposedPrompt& prompt,
                                         const SamplingParams& params,
                                         const std::string& model_id) const {
  nlohmann::json messages = nlohmann::json::array();
  messages.push_back({{"role", "system"}, {"content", prompt.system}});
  for (const auto& c : prompt.injected_context) {
    messages.push_back({{"role", "system"}, {"content", "Context: " + c}});
  }
  if (prompt.media.empty()) {
    messages.push_back({{"role", "user"}, {"content", prompt.user}});
  } else {
    nlohmann::json parts = nlohmann::json::array();
    parts.push_back({{"type", "text"}, {"text", prompt.user}});
    for (const auto& m : prompt.media) {
      std::string url = m;
      if (m.rfind("http://", 0) != 0 && m.rfind("https://", 0) != 0 && m.rfind("data:", 0) != 0) {
        url = "data:" + mime_for(m) + ";base64," + base64_encode(read_file(m));
      }
      parts.push_back({{"type", "image_url"}, {"image_url", {{"url", url}}}});
    }
    messages.push_back({{"role", "user"}, {"content", parts}});
  }
  return {{"model", model_id},
          {"messages", messages},
          {"top_p", params.top_p},
          {"top_k", params.top_k},
          {"temperature", params.temperature}};
}

RawCompletion HttpBackend::complete(const ComposedPrompt& prompt, const SamplingParams& params,
                                    const std::string& model_id) {
  auto j = post_json("/chat/completions", chat_request(prompt, params, model_id));
  try {
    RawCompletion out;
    const auto& message = j.at("choices").at(0).at("message");
    out.text = message.at("content").get<std::string>();
    out.model_id = j.value("model", model_id);
    if (j.contains("usage") && j.at("usage").is_object()) {
      const auto& usage = j.at("usage");
      if (usage.contains("prompt_tokens")) out.prompt_tokens = usage.at("prompt_tokens").get<std::int64_t>();
      if (usage.contains("completion_tokens")) {
        out.completion_tokens = usage.at("completion_tokens").get<std::int64_t>();
      }
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::malformed_response, std::string("chat completion: ") + e.what());
  }
}

GeneratedImage HttpBackend::generate_image(const std::string& prompt, const std::string& model_id) {
  auto j = post_json("/images/generations", {{"model", model_id},
                                             {"prompt", prompt},
                                             {"n", 1},
                                             {"response_format", "b64_json"}});
  try {
    const auto& item = j.at("data").at(0);
    GeneratedImage img;
    img.metadata = {{"model_id", model_id}, {"prompt", prompt}};
    if (item.contains("b64_json")) {
      const auto bytes = base64_decode(item.at("b64_json").get<std::string>());
      std::filesystem::create_directories(config_.media_dir);
      std::ostringstream name;
      name << "tti-" << std::hex << text::fnv1a64(bytes) << ".png";
      const auto path = std::filesystem::path(config_.media_dir) / name.str();
      std::ofstream out(path, std::ios::binary);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!out) fail(ErrorCode::io, "cannot write generated image " + path.string());
      img.locator = path.string();
    } else {
      img.locator = item.at("url").get<std::string>();
    }
    if (item.contains("revised_prompt")) img.metadata["revised_prompt"] = item.at("revised_prompt");
    return img;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::malformed_response, std::string("image generation: ") + e.what());
  }
}

std::vector<double> HttpBackend::embed(const std::string& input, const std::string& model_id) {
  auto j = post_json("/embeddings", {{"model", model_id}, {"input", input}});
  try {
    return j.at("data").at(0).at("embedding").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::malformed_response, std::string("embedding: ") + e.what());
  }
}

FinetuneJob HttpBackend::submit_finetune(const std::string& base_model_id,
                                         const std::string& dataset_ref,
                                         const SamplingParams& params) {
  httplib::Client cli(origin_);
  cli.set_connection_timeout(config_.timeout);
  cli.set_read_timeout(config_.timeout);
  if (!config_.api_key.empty()) cli.set_bearer_token_auth(config_.api_key);
  httplib::MultipartFormDataItems items = {
      {"purpose", "fine-tune", "", ""},
      {"file", read_file(dataset_ref), std::filesystem::path(dataset_ref).filename().string(),
       "application/jsonl"},
  };
  auto uploaded = parse_body(cli.Post(prefix_ + "/files", items), "POST /files");
  if (!uploaded.contains("id")) fail(ErrorCode::malformed_response, "file upload lacks id");

  nlohmann::json body = {{"model", base_model_id},
                         {"training_file", uploaded.at("id")},
                         {"metadata",
                          {{"top_p", std::to_string(params.top_p)},
                           {"top_k", std::to_string(params.top_k)}}}};
  FinetuneJob job = job_from_wire(post_json("/fine_tuning/jobs", body));
  job.base_model_id = base_model_id;
  job.dataset_ref = dataset_ref;
  job.params = params;
  return job;
}

FinetuneJob HttpBackend::poll_finetune(const std::string& job_id) {
  return job_from_wire(get_json("/fine_tuning/jobs/" + job_id));
}

}  // namespace dtwin
