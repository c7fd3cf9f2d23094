#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dtwin/backends.hpp"
#include "dtwin/dataset_gen.hpp"
#include "dtwin/prompt_engine.hpp"

namespace dtwin {

enum class FeedbackKind { positive, negative, score, open_ended, mixed };

std::string_view to_string(FeedbackKind kind);
FeedbackKind feedback_kind_from_string(std::string_view s);

struct Feedback {
  FeedbackKind kind = FeedbackKind::open_ended;
  std::optional<int> score;  // 1..10
  std::optional<std::string> text;
  std::int64_t timestamp_ms = 0;

  bool operator==(const Feedback&) const = default;
};

// score+text -> mixed; score -> score; text -> positive/negative/open_ended
// by the sign of the lexicon polarity.
Feedback parse_feedback(const std::optional<std::string>& text, std::optional<int> score,
                        std::int64_t timestamp_ms = 0);

struct ScoreAnchors {
  double positive = 90;
  double negative = 20;
  double neutral = 50;
  double per_polarity = 10;  // open_ended: neutral + per_polarity * polarity
};

// Explicit score k -> 10k; otherwise the anchors. Always in [0,100].
double score_pct(const Feedback& f, const ScoreAnchors& anchors = {});

struct SatisfactionState {
  double value = 100;

  bool operator==(const SatisfactionState&) const = default;
};

// (1 - a) * S_prev + a * score_pct(f), clamped to [0,100].
SatisfactionState update_satisfaction(SatisfactionState prev, const Feedback& f, double ema_alpha,
                                      const ScoreAnchors& anchors = {});

struct ParamBounds {
  double top_p_min = 0.5;
  double top_p_max = 1.0;
  int top_k_min = 5;
  int top_k_max = 100;
};

struct LoopConfig {
  int ft_interval = 25;                    // alpha
  double satisfaction_threshold = 70;      // beta
  std::optional<int> max_iterations;       // T; unbounded when empty
  double ema_alpha = 0.3;
  ParamBounds bounds;
  double top_p_step = 0.05;
  int top_k_step = 5;
  SamplingParams default_params;
  ScoreAnchors anchors;
  // Fine-tune when S >= beta instead of S < beta (the literal reading).
  bool literal_ge_trigger = false;
  GenerationPolicy generation;

  void validate() const;
};

enum class LoopAction { none, system_updated, finetuned, finetune_failed };

std::string_view to_string(LoopAction action);

struct TraceEntry {
  int iteration = 0;
  double score_pct = 0;
  double satisfaction_raw = 0;  // after the EMA update, before any reset
  double satisfaction = 0;      // after the step
  LoopAction action = LoopAction::none;
  int counter = 0;
  int sm_version = 1;
  std::string model_id;
  SamplingParams params;

  bool operator==(const TraceEntry&) const = default;
};

inline constexpr std::string_view kDefaultInstruction =
    "Identify railway defects and describe their type, location and severity.";

struct LoopState {
  int iteration = 0;
  int counter = 0;
  std::vector<Feedback> feedbacks;
  SatisfactionState satisfaction;
  SystemMessage sm;
  std::string instruction;
  SamplingParams params;
  std::string model_id;
  int ft_count = 0;
  int ft_attempts = 0;
  std::vector<std::string> model_chain;
  std::vector<TraceEntry> trace;
  std::vector<std::string> warnings;

  bool operator==(const LoopState&) const = default;
};

LoopState initial_state(const LoopConfig& cfg, const std::string& base_model_id,
                        const std::string& system_message, std::string instruction = std::string(
                                                               kDefaultInstruction));

struct SystemUpdate {
  SystemMessage sm;
  std::string instruction;
  SamplingParams params;
  double score_pct = 0;
};

// score_pct < 50: append corrective clauses keyed on the feedback words and
// tighten top_p/top_k by one step. score_pct >= 80: relax params one step
// toward the defaults. A refinement request in the text is appended to the
// instruction verbatim.
SystemUpdate update_system(const SystemMessage& sm, const Feedback& f,
                           const std::string& instruction, const SamplingParams& params,
                           const LoopConfig& cfg);

// counter == alpha, or S < beta (S >= beta with literal_ge_trigger).
bool should_finetune(const LoopState& state, const LoopConfig& cfg);

struct LoopDeps {
  const BackendSet* backends = nullptr;
  std::string dataset_dir = "datasets";
  FinetuneOptions finetune;
};

struct FinetuneOutcome {
  bool succeeded = false;
  std::string dataset_ref;
  std::optional<FinetuneJob> job;
  std::string error;
};

// Builds captions from the feedback vector, compiles and writes a dataset,
// fine-tunes the current model. Success chains the model and resets the
// feedback vector, satisfaction and counter; failure leaves them in place.
FinetuneOutcome finetune_cycle(LoopState& state, const LoopConfig& cfg, const LoopDeps& deps);

struct StepOutcome {
  LoopAction action = LoopAction::none;
  std::optional<FinetuneOutcome> finetune;
};

StepOutcome step(LoopState& state, const Feedback& f, const LoopConfig& cfg, const LoopDeps& deps);

struct LoopReport {
  int iterations = 0;
  int ft_count = 0;
  std::vector<std::string> model_chain;
  std::vector<TraceEntry> trace;
  std::vector<std::string> warnings;
};

LoopReport report_of(const LoopState& state);

// Applies feedbacks in order until the stream ends or max_iterations.
LoopReport run_loop(LoopState& state, std::span<const Feedback> feedbacks, const LoopConfig& cfg,
                    const LoopDeps& deps);

// Feedback file: JSONL of {text?, score?, timestamp?}.
std::vector<Feedback> read_feedback_jsonl(const std::string& path);

void to_json(nlohmann::json& j, const Feedback& f);
void from_json(const nlohmann::json& j, Feedback& f);
void to_json(nlohmann::json& j, const LoopConfig& c);
void from_json(const nlohmann::json& j, LoopConfig& c);
void to_json(nlohmann::json& j, const TraceEntry& t);
void from_json(const nlohmann::json& j, TraceEntry& t);
void to_json(nlohmann::json& j, const LoopState& s);
void from_json(const nlohmann::json& j, LoopState& s);
void to_json(nlohmann::json& j, const LoopReport& r);

}  // namespace dtwin
