#include "dtwin/backends.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <thread>

#include "dtwin/error.hpp"
#include "dtwin/text.hpp"

namespace dtwin {

void SamplingParams::validate() const {
  require(top_p > 0.0 && top_p <= 1.0, "top_p must be in (0, 1]");
  require(top_k >= 1, "top_k must be >= 1");
  require(temperature >= 0.0, "temperature must be >= 0");
}

std::string_view to_string(JobStatus status) {
  switch (status) {
    case JobStatus::queued: return "queued";
    case JobStatus::running: return "running";
    case JobStatus::succeeded: return "succeeded";
    case JobStatus::failed: return "failed";
  }
  return "failed";
}

JobStatus job_status_from_string(std::string_view s) {
  if (s == "queued" || s == "validating_files") return JobStatus::queued;
  if (s == "running") return JobStatus::running;
  if (s == "succeeded") return JobStatus::succeeded;
  if (s == "failed" || s == "cancelled") return JobStatus::failed;
  fail(ErrorCode::malformed_response, "unknown fine-tune job status: " + std::string(s));
}

std::string_view to_string(ModelRole role) {
  switch (role) {
    case ModelRole::chat: return "chat";
    case ModelRole::vision: return "vision";
    case ModelRole::text_to_image: return "text_to_image";
    case ModelRole::judge: return "judge";
    case ModelRole::embed: return "embed";
  }
  return "chat";
}

const std::string& RoleModels::get(ModelRole role) const {
  switch (role) {
    case ModelRole::chat: return chat;
    case ModelRole::vision: return vision;
    case ModelRole::text_to_image: return text_to_image;
    case ModelRole::judge: return judge;
    case ModelRole::embed: return embed;
  }
  return chat;
}

std::string& RoleModels::get(ModelRole role) {
  return const_cast<std::string&>(static_cast<const RoleModels&>(*this).get(role));
}

BackendSet::BackendSet(std::shared_ptr<ModelBackend> fallback, RoleModels models, RetryPolicy retry)
    : fallback_(std::move(fallback)), models_(std::move(models)), retry_(retry) {}

void BackendSet::set(ModelRole role, std::shared_ptr<ModelBackend> backend) {
  overrides_[role] = std::move(backend);
}

ModelBackend& BackendSet::get(ModelRole role) const {
  if (auto it = overrides_.find(role); it != overrides_.end() && it->second) return *it->second;
  if (!fallback_) fail(ErrorCode::internal, "no backend configured for role " + std::string(to_string(role)));
  return *fallback_;
}

std::int64_t count_tokens(std::string_view text) {
  std::int64_t count = 0;
  bool in_word = false;
  for (unsigned char c : text) {
    const bool word = std::isalnum(c) != 0 || c == '_' || c >= 0x80;
    if (word) {
      if (!in_word) ++count;
      in_word = true;
      continue;
    }
    in_word = false;
    if (!std::isspace(c)) ++count;
  }
  return count;
}

std::int64_t count_tokens(std::string_view text, const ModelBackend& backend) {
  if (auto n = backend.count_tokens(text)) return *n;
  return count_tokens(text);
}

namespace {

std::int64_t elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() -
                                                               start)
      .count();
}

}  // namespace

Completion chat(const ComposedPrompt& prompt, const SamplingParams& params, ModelBackend& backend,
                const std::string& model_id, const RetryPolicy& retry) {
  params.validate();
  const auto start = std::chrono::steady_clock::now();
  RawCompletion raw = with_retry(retry, [&] { return backend.complete(prompt, params, model_id); });
  Completion out;
  out.latency_ms = elapsed_ms(start);
  out.text = std::move(raw.text);
  out.model_id = raw.model_id.empty() ? model_id : raw.model_id;
  if (out.model_id.empty()) fail(ErrorCode::malformed_response, "completion has no model id");
  if (raw.prompt_tokens) {
    out.prompt_tokens = *raw.prompt_tokens;
  } else {
    std::int64_t n = 0;
    for (const auto& m : prompt.messages()) n += count_tokens(m.content, backend);
    out.prompt_tokens = n;
  }
  out.completion_tokens =
      raw.completion_tokens ? *raw.completion_tokens : count_tokens(out.text, backend);
  if (out.prompt_tokens < 0 || out.completion_tokens < 0) {
    fail(ErrorCode::malformed_response, "negative token usage reported by backend");
  }
  return out;
}

Completion chat(const ComposedPrompt& prompt, const SamplingParams& params,
                const BackendSet& backends, ModelRole role) {
  return chat(prompt, params, backends.get(role), backends.model(role), backends.retry());
}

GeneratedImage generate_image(const std::string& prompt, const BackendSet& backends) {
  require(!text::trim(prompt).empty(), "image prompt must be non-empty");
  auto& backend = backends.get(ModelRole::text_to_image);
  const auto& model = backends.model(ModelRole::text_to_image);
  return with_retry(backends.retry(), [&] { return backend.generate_image(prompt, model); });
}

std::vector<double> embed(const std::string& text, ModelBackend& backend,
                          const std::string& model_id) {
  require(!text::trim(text).empty(), "cannot embed empty text");
  return backend.embed(text, model_id);
}

std::vector<double> embed(const std::string& text, const BackendSet& backends) {
  auto& backend = backends.get(ModelRole::embed);
  return with_retry(backends.retry(),
                    [&] { return embed(text, backend, backends.model(ModelRole::embed)); });
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "cosine of vectors with different dimensions");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::size_t count_dataset_entries(const std::string& dataset_ref) {
  std::ifstream in(dataset_ref);
  require(static_cast<bool>(in), "dataset is not readable: " + dataset_ref);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (text::trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    require(!j.is_discarded() && j.is_object(),
            "dataset line " + std::to_string(n + 1) + " is not a JSON object");
    ++n;
  }
  require(n > 0, "dataset is empty: " + dataset_ref);
  return n;
}

FinetuneJob execute_finetune(const std::string& base_model_id, const std::string& dataset_ref,
                             const SamplingParams& params, ModelBackend& backend,
                             const FinetuneOptions& options, const RetryPolicy& retry) {
  params.validate();
  require(!base_model_id.empty(), "base model id must be non-empty");
  count_dataset_entries(dataset_ref);

  FinetuneJob job = with_retry(
      retry, [&] { return backend.submit_finetune(base_model_id, dataset_ref, params); });
  const auto deadline = std::chrono::steady_clock::now() + options.timeout;
  while (!job.terminal()) {
    if (std::chrono::steady_clock::now() >= deadline) {
      fail(ErrorCode::timeout, "fine-tune job " + job.job_id + " timed out",
           {{"job_id", job.job_id}, {"last_status", to_string(job.status)}});
    }
    std::this_thread::sleep_for(options.poll_interval);
    const std::string id = job.job_id;
    job = with_retry(retry, [&] { return backend.poll_finetune(id); });
  }
  job.base_model_id = base_model_id;
  job.dataset_ref = dataset_ref;
  job.params = params;
  if (job.status == JobStatus::succeeded &&
      (!job.result_model_id || job.result_model_id->empty() ||
       *job.result_model_id == base_model_id)) {
    // A fine-tune must yield a new model identity.
    job.status = JobStatus::failed;
    job.error = "backend reported success without a new model id";
    job.result_model_id.reset();
  }
  if (job.status == JobStatus::failed) job.result_model_id.reset();
  return job;
}

void to_json(nlohmann::json& j, const SamplingParams& p) {
  j = {{"top_p", p.top_p}, {"top_k", p.top_k}, {"temperature", p.temperature}};
}

void from_json(const nlohmann::json& j, SamplingParams& p) {
  p.top_p = j.value("top_p", p.top_p);
  p.top_k = j.value("top_k", p.top_k);
  p.temperature = j.value("temperature", p.temperature);
}

void to_json(nlohmann::json& j, const Completion& c) {
  j = {{"text", c.text},
       {"prompt_tokens", c.prompt_tokens},
       {"completion_tokens", c.completion_tokens},
       {"latency_ms", c.latency_ms},
       {"model_id", c.model_id}};
}

void to_json(nlohmann::json& j, const FinetuneJob& job) {
  j = {{"job_id", job.job_id},
       {"base_model_id", job.base_model_id},
       {"dataset_ref", job.dataset_ref},
       {"params", job.params},
       {"status", to_string(job.status)},
       {"result_model_id", job.result_model_id ? nlohmann::json(*job.result_model_id) : nullptr}};
  if (!job.error.empty()) j["error"] = job.error;
}

void from_json(const nlohmann::json& j, FinetuneJob& job) {
  job.job_id = j.at("job_id").get<std::string>();
  job.base_model_id = j.value("base_model_id", "");
  job.dataset_ref = j.value("dataset_ref", "");
  if (j.contains("params")) job.params = j.at("params").get<SamplingParams>();
  job.status = job_status_from_string(j.at("status").get<std::string>());
  if (j.contains("result_model_id") && j.at("result_model_id").is_string()) {
    job.result_model_id = j.at("result_model_id").get<std::string>();
  }
  job.error = j.value("error", "");
}

}  // namespace dtwin
