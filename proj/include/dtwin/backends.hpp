#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dtwin/prompt_engine.hpp"

namespace dtwin {

struct SamplingParams {
  double top_p = 0.9;
  int top_k = 40;
  double temperature = 0.7;

  // top_p in (0,1], top_k >= 1, temperature >= 0.
  void validate() const;

  bool operator==(const SamplingParams&) const = default;
};

struct Completion {
  std::string text;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  std::int64_t latency_ms = 0;
  std::string model_id;

  std::int64_t total_tokens() const { return prompt_tokens + completion_tokens; }
};

enum class JobStatus { queued, running, succeeded, failed };

std::string_view to_string(JobStatus status);
JobStatus job_status_from_string(std::string_view s);

struct FinetuneJob {
  std::string job_id;
  std::string base_model_id;
  std::string dataset_ref;
  SamplingParams params;
  JobStatus status = JobStatus::queued;
  std::optional<std::string> result_model_id;  // set iff succeeded
  std::string error;

  bool terminal() const { return status == JobStatus::succeeded || status == JobStatus::failed; }
};

struct GeneratedImage {
  std::string locator;
  std::string mime = "image/png";
  nlohmann::json metadata = nlohmann::json::object();
};

// What a backend returns before latency and token accounting.
struct RawCompletion {
  std::string text;
  std::optional<std::int64_t> prompt_tokens;
  std::optional<std::int64_t> completion_tokens;
  std::string model_id;
};

// A model provider. Implementations must tolerate concurrent callers.
class ModelBackend {
 public:
  virtual ~ModelBackend() = default;

  virtual std::string name() const = 0;
  virtual RawCompletion complete(const ComposedPrompt& prompt, const SamplingParams& params,
                                 const std::string& model_id) = 0;
  virtual GeneratedImage generate_image(const std::string& prompt, const std::string& model_id) = 0;
  virtual std::vector<double> embed(const std::string& text, const std::string& model_id) = 0;
  virtual FinetuneJob submit_finetune(const std::string& base_model_id,
                                      const std::string& dataset_ref,
                                      const SamplingParams& params) = 0;
  virtual FinetuneJob poll_finetune(const std::string& job_id) = 0;

  // Backend tokenizer, when the provider exposes one.
  virtual std::optional<std::int64_t> count_tokens(std::string_view) const { return std::nullopt; }
};

enum class ModelRole { chat, vision, text_to_image, judge, embed };

std::string_view to_string(ModelRole role);

struct RoleModels {
  std::string chat = "defect-llm";
  std::string vision = "defect-llm-vision";
  std::string text_to_image = "defect-tti";
  std::string judge = "judge-llm";
  std::string embed = "embed-hash";

  const std::string& get(ModelRole role) const;
  std::string& get(ModelRole role);
};

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds base_backoff{200};
};

// Per-role backend handles with a shared default.
class BackendSet {
 public:
  BackendSet() = default;
  BackendSet(std::shared_ptr<ModelBackend> fallback, RoleModels models = {}, RetryPolicy retry = {});

  void set(ModelRole role, std::shared_ptr<ModelBackend> backend);
  ModelBackend& get(ModelRole role) const;
  const std::string& model(ModelRole role) const { return models_.get(role); }
  RoleModels& models() { return models_; }
  const RoleModels& models() const { return models_; }
  const RetryPolicy& retry() const { return retry_; }
  void set_retry(RetryPolicy retry) { retry_ = retry; }

 private:
  std::shared_ptr<ModelBackend> fallback_;
  std::map<ModelRole, std::shared_ptr<ModelBackend>> overrides_;
  RoleModels models_;
  RetryPolicy retry_;
};

// Runs `fn` with up to policy.max_retries retries and exponential backoff
// on retryable errors. Non-retryable errors propagate immediately.
template <typename Fn>
auto with_retry(const RetryPolicy& policy, Fn&& fn) -> decltype(fn());

// Fallback tokenizer: maximal runs of word characters plus every
// non-space punctuation mark.
std::int64_t count_tokens(std::string_view text);
std::int64_t count_tokens(std::string_view text, const ModelBackend& backend);

Completion chat(const ComposedPrompt& prompt, const SamplingParams& params, ModelBackend& backend,
                const std::string& model_id, const RetryPolicy& retry = {});
Completion chat(const ComposedPrompt& prompt, const SamplingParams& params,
                const BackendSet& backends, ModelRole role = ModelRole::chat);

GeneratedImage generate_image(const std::string& prompt, const BackendSet& backends);

std::vector<double> embed(const std::string& text, ModelBackend& backend,
                          const std::string& model_id);
std::vector<double> embed(const std::string& text, const BackendSet& backends);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

struct FinetuneOptions {
  std::chrono::milliseconds poll_interval{1000};
  std::chrono::milliseconds timeout{std::chrono::hours(2)};
};

// Number of non-blank lines of a dataset JSONL; throws validation when the
// file is unreadable, empty, or contains a line that is not a JSON object.
std::size_t count_dataset_entries(const std::string& dataset_ref);

// Submits a fine-tune job and blocks until it reaches a terminal status.
FinetuneJob execute_finetune(const std::string& base_model_id, const std::string& dataset_ref,
                             const SamplingParams& params, ModelBackend& backend,
                             const FinetuneOptions& options = {}, const RetryPolicy& retry = {});

void to_json(nlohmann::json& j, const SamplingParams& p);
void from_json(const nlohmann::json& j, SamplingParams& p);
void to_json(nlohmann::json& j, const Completion& c);
void to_json(nlohmann::json& j, const FinetuneJob& job);
void from_json(const nlohmann::json& j, FinetuneJob& job);

}  // namespace dtwin

#include "dtwin/detail/retry.ipp"
