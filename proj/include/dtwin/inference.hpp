#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtwin/backends.hpp"
#include "dtwin/prompt_engine.hpp"

namespace dtwin {

enum class Intent { analyze, generate };

std::string_view to_string(Intent intent);
Intent intent_from_string(std::string_view s);

struct MultimodalInput {
  std::optional<std::string> text;
  std::vector<std::string> images;
  std::optional<std::string> video;
  Intent intent = Intent::analyze;

  // At least one modality; video and images are mutually exclusive;
  // generation needs text and accepts no video.
  void validate() const;
};

enum class StepKind { sample_frames, vision_chat, chat, chat_expand, text_to_image };

std::string_view to_string(StepKind kind);

struct PlanStep {
  StepKind kind;
  std::string input_slice;  // which part of the input the step consumes
};

enum class ExpectedOutput { report, image, texture };

std::string_view to_string(ExpectedOutput out);

struct ModelPlan {
  std::vector<PlanStep> steps;
  ExpectedOutput expected_output = ExpectedOutput::report;
};

// Pure function of the input's modality signature.
ModelPlan route(const MultimodalInput& input);

// Produces frame files for given timestamps. Implementations are the
// external-command extractor and a manifest-driven one for offline runs.
class FrameExtractor {
 public:
  virtual ~FrameExtractor() = default;
  virtual double duration_seconds(const std::string& video) = 0;
  virtual std::vector<std::string> extract(const std::string& video,
                                           const std::vector<double>& timestamps) = 0;
};

// Runs configured shell commands. Placeholders: {video}, {t} (seconds),
// {out} (PNG path). The probe command must print the duration in seconds.
class CommandFrameExtractor : public FrameExtractor {
 public:
  CommandFrameExtractor(std::string probe_command, std::string extract_command,
                        std::string frame_dir);
  double duration_seconds(const std::string& video) override;
  std::vector<std::string> extract(const std::string& video,
                                   const std::vector<double>& timestamps) override;

 private:
  std::string probe_command_;
  std::string extract_command_;
  std::string frame_dir_;
};

// Reads a JSON video manifest {"duration_s": <seconds>} and writes
// placeholder PNG frames. Lets the whole pipeline run without a codec.
class ManifestFrameExtractor : public FrameExtractor {
 public:
  explicit ManifestFrameExtractor(std::string frame_dir);
  double duration_seconds(const std::string& video) override;
  std::vector<std::string> extract(const std::string& video,
                                   const std::vector<double>& timestamps) override;

 private:
  std::string frame_dir_;
};

// max(1, floor(duration * fps)) frames at t_i = i / fps; all t_i < duration
// except the single frame of a video shorter than one period (t = 0).
std::vector<double> frame_timestamps(double duration_seconds, double fps);
std::vector<std::string> sample_frames(const std::string& video, double fps,
                                       FrameExtractor& extractor);

struct StepUsage {
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  std::int64_t latency_ms = 0;
  int calls = 0;

  std::int64_t tokens() const { return prompt_tokens + completion_tokens; }
  StepUsage& operator+=(const Completion& c);
  StepUsage& operator+=(const StepUsage& u);
};

struct StepResult {
  StepKind kind;
  bool ok = false;
  std::string text;
  std::vector<std::string> outputs;  // frames or generated media locators
  std::vector<GeneratedImage> media;
  StepUsage usage;
  std::string error;
};

struct RawResult {
  std::vector<StepResult> steps;
  StepUsage usage;
  std::optional<std::size_t> failed_step;
  std::size_t frames = 0;

  bool complete() const { return !failed_step; }
};

struct InferenceOptions {
  double fps = 1.0;
  std::size_t frames_per_batch = 1;
  // Frame batches fan out over OpenMP threads; false runs them in order.
  bool parallel_frames = true;
  SamplingParams params;
  std::vector<VpiRule> vpi_rules;
  std::string system_message = "You are an expert railway component defect instructor.";
};

// The chat prompt instructs the model to end with this fenced block.
inline constexpr std::string_view kFindingsInstruction =
    "End your answer with a fenced block that starts with the line ```findings, "
    "has the header row `defect_type | location | severity`, then one row per defect "
    "with the three cells separated by |, and closes with ```.";

// Executes plan steps in order, threading each step's text into the next.
// A non-retryable backend failure stops the plan and marks the failed step;
// transport errors that survive retries propagate.
RawResult infer(const MultimodalInput& input, const ModelPlan& plan, const BackendSet& backends,
                const InferenceOptions& options, FrameExtractor* extractor = nullptr);

struct Finding {
  std::string defect_type;
  std::string location_phrase;
  std::string severity_phrase;

  bool operator==(const Finding&) const = default;
};

struct FindingsParse {
  std::vector<Finding> findings;
  bool block_found = false;
  std::optional<std::string> warning;
};

// Block grammar: a line "```findings", an optional header row
// "defect_type | location | severity", rows of exactly three non-empty
// |-separated cells, and a closing "```" line. Any deviation inside a
// block discards the whole block with a warning; a missing block yields
// no findings and no warning.
FindingsParse parse_findings(const std::string& text);
std::string render_findings_block(const std::vector<Finding>& findings);

struct MediaItem {
  std::string locator;
  std::string kind;  // image | texture
  std::string caption;
  std::optional<std::string> metadata_sidecar;
};

struct ConsumableResponse {
  std::string report_markdown;
  std::vector<Finding> findings;
  std::vector<MediaItem> media;
  StepUsage usage;
  std::vector<std::string> warnings;
};

// Packages raw outputs. Texture outputs also get a JSON metadata sidecar
// next to the image when the locator is a writable local path.
ConsumableResponse process(const RawResult& raw, const MultimodalInput& input,
                           const ModelPlan& plan);

void to_json(nlohmann::json& j, const MultimodalInput& in);
void from_json(const nlohmann::json& j, MultimodalInput& in);
void to_json(nlohmann::json& j, const ModelPlan& plan);
void to_json(nlohmann::json& j, const StepUsage& u);
void to_json(nlohmann::json& j, const Finding& f);
void to_json(nlohmann::json& j, const ConsumableResponse& r);

}  // namespace dtwin
