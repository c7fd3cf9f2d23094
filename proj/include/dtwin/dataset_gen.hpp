#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dtwin/backends.hpp"

namespace dtwin {

struct CaptionRecord {
  std::string id;
  std::optional<std::string> source_image_ref;
  std::string template_id;
  std::string text;
  std::vector<std::string> tags;
  std::map<std::string, std::string> metadata;
};

struct GenerationPolicy {
  int k_max = 5;
  double similarity_threshold = 0.8;
  double lambda = 0.5;
  int max_attempts = 20;
  SamplingParams params{0.95, 50, 0.9};

  // max_attempts >= k_max, threshold in [0,1], lambda >= 0.
  void validate() const;
};

struct SyntheticSample {
  std::string id;
  std::string caption_id;
  std::string text;
  std::string prompt;
  int complexity = 0;
  int attempt_index = 0;
};

struct DatasetEntry {
  SyntheticSample sample;
  std::string system_message;
  std::string prompt;
  std::string response;
};

struct ObjectiveReport {
  std::string caption_id;
  double diversity = 0;
  double reconstruction_loss = 0;
  double lambda = 0;
  double value = 0;
};

// Captioning prompt template: the model is asked to answer with one
// "field: value" line per required field plus a final "caption:" line.
struct CaptionTemplate {
  std::string id;
  std::string instruction;
  std::vector<std::string> required_fields;
};

class TemplateRegistry {
 public:
  // Pre-populated with the built-in "defect-v1" template.
  TemplateRegistry();
  void add(CaptionTemplate t);
  const CaptionTemplate& get(const std::string& id) const;  // template_not_found
  bool contains(const std::string& id) const;

 private:
  std::map<std::string, CaptionTemplate> templates_;
};

inline constexpr std::string_view kDefaultSystemMessage =
    "Given the defect description provided, identify potential risks and recommend "
    "preventive measures.";

CaptionRecord caption_image(const std::string& image_ref, const std::string& template_id,
                            const TemplateRegistry& templates, const BackendSet& backends,
                            const std::string& caption_id = {});

// word_count + distinct_word_count over lowercased, punctuation-stripped words.
int complexity_score(std::string_view text);

// False iff the candidate equals an existing text after case/whitespace
// normalization or its word 3-gram Jaccard with one exceeds the threshold.
bool is_unique(std::string_view candidate, std::span<const std::string> existing,
               const GenerationPolicy& policy);

// Mean pairwise (1 - word-set Jaccard); 0 for fewer than two samples.
double diversity(std::span<const std::string> samples);

// 1 - fraction of the caption's distinct content words found in the sample.
double reconstruction_loss(std::string_view sample, std::string_view caption);

ObjectiveReport objective(std::span<const std::string> samples, std::string_view caption,
                          double lambda);

// Request for one rephrasing attempt; `accepted` lists samples so far.
ComposedPrompt rephrase_request(const CaptionRecord& caption,
                                std::span<const std::string> accepted, int attempt);

struct RephraseResult {
  std::vector<SyntheticSample> samples;
  int attempts = 0;
  std::optional<std::string> warning;  // set when fewer than k_max were accepted
};

RephraseResult rephrase_caption(const CaptionRecord& caption, const GenerationPolicy& policy,
                                const BackendSet& backends);

struct CaptionFailure {
  std::string caption_id;
  std::string code;
  std::string message;
};

struct CompiledDataset {
  std::vector<DatasetEntry> entries;
  std::vector<ObjectiveReport> objectives;
  std::vector<std::string> warnings;
  std::vector<CaptionFailure> failures;
  std::size_t duplicates_removed = 0;
};

// Per-caption rephrasing runs concurrently; the cross-caption dedup pass
// keeps the first occurrence in caption order. `sm_template` may use
// {caption} and {caption_id} placeholders.
CompiledDataset compile_dataset(std::span<const CaptionRecord> captions,
                                const GenerationPolicy& policy, const std::string& sm_template,
                                const BackendSet& backends);

// JSONL row: {id, caption_id, system_message, prompt, response, complexity, attempt_index}.
nlohmann::json dataset_row(const DatasetEntry& entry);
DatasetEntry dataset_entry_from_row(const nlohmann::json& row);
void write_dataset_jsonl(const std::string& path, std::span<const DatasetEntry> entries);
std::vector<DatasetEntry> read_dataset_jsonl(const std::string& path);
// Side report: JSON array of {caption_id, D, L, lambda, value}.
nlohmann::json objective_report_json(std::span<const ObjectiveReport> reports);

// Captions file: JSONL of CaptionRecord objects; a line that is not a JSON
// object is taken as a plain caption text.
std::vector<CaptionRecord> read_captions(const std::string& path);

void to_json(nlohmann::json& j, const CaptionRecord& c);
void from_json(const nlohmann::json& j, CaptionRecord& c);
void to_json(nlohmann::json& j, const GenerationPolicy& p);
void from_json(const nlohmann::json& j, GenerationPolicy& p);

}  // namespace dtwin
