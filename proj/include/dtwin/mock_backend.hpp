#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dtwin/backends.hpp"

namespace dtwin {

struct MockConfig {
  std::uint64_t seed = 7;
  // Injected per-call delay for chat, image and embedding calls.
  std::chrono::milliseconds delay{0};
  // Every chat call returns this text verbatim when set.
  std::optional<std::string> fixed_reply;
  // Rephrase replies keyed by caption text, cycled by attempt index.
  std::map<std::string, std::vector<std::string>> scripted;
  // Fixed replies keyed by task tag ("judge", "synthesis", ...).
  std::map<std::string, std::string> task_replies;
  // Tasks that raise a non-retryable backend error.
  std::set<std::string> fail_tasks;
  // The first N calls of any kind raise a retryable transport error.
  int transient_failures = 0;
  bool fail_finetune = false;
  int finetune_polls_to_finish = 1;
  std::size_t embed_dim = 256;
  // Generated images are written here when non-empty.
  std::string media_dir;
};

// Seeded deterministic backend. Outputs are a pure function of the seed and
// the request (task tag, metadata, message sequence); fine-tune job ids
// follow submission order and result model ids follow next_finetune_id.
class MockBackend : public ModelBackend {
 public:
  explicit MockBackend(MockConfig config = {});

  std::string name() const override { return "mock"; }
  RawCompletion complete(const ComposedPrompt& prompt, const SamplingParams& params,
                         const std::string& model_id) override;
  GeneratedImage generate_image(const std::string& prompt, const std::string& model_id) override;
  std::vector<double> embed(const std::string& text, const std::string& model_id) override;
  FinetuneJob submit_finetune(const std::string& base_model_id, const std::string& dataset_ref,
                              const SamplingParams& params) override;
  FinetuneJob poll_finetune(const std::string& job_id) override;

  std::int64_t calls() const;
  std::vector<FinetuneJob> jobs() const;
  const MockConfig& config() const { return config_; }

 private:
  void before_call(const std::string& task);
  std::string reply_for(const ComposedPrompt& prompt) const;

  MockConfig config_;
  mutable std::mutex mu_;
  std::int64_t calls_ = 0;
  std::map<std::string, FinetuneJob> jobs_;
  std::map<std::string, int> polls_;
  std::vector<std::string> job_order_;
};

// Mock fine-tune naming: "m" -> "m-ft-1", "m-ft-4" -> "m-ft-5".
std::string next_finetune_id(const std::string& base_model_id);

// Feature-hashing embedding used by the mock: every lowercased word w adds
// sign(h) at index h mod dim where h = splitmix64(fnv1a64(w) ^ seed) and the
// sign is taken from the top bit of h; the vector is then L2-normalized.
std::vector<double> hashing_embedding(std::string_view text, std::uint64_t seed, std::size_t dim);

}  // namespace dtwin
