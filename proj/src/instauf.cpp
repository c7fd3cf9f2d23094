#include "dtwin/instauf.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "dtwin/error.hpp"
#include "dtwin/text.hpp"

namespace dtwin {

namespace {

struct ClauseRule {
  std::vector<std::string_view> keywords;
  std::string_view clause;
};

const std::vector<ClauseRule>& clause_rules() {
  static const std::vector<ClauseRule> rules = {
      {{"small", "minor", "size", "tiny", "hairline", "large", "big"},
       "Pay more attention to the size of the defect."},
      {{"rust", "rusty", "corrosion", "corroded"}, "Pay close attention to rust and corrosion."},
      {{"differentiate", "distinguish", "types", "type", "wear"},
       "Differentiate clearly between defect types such as cracks, rust, and mechanical wear."},
      {{"location", "where", "position", "located"}, "State the precise location of each defect."},
      {{"unrealistic", "realistic", "fake"}, "Keep described and generated defects realistic."},
  };
  return rules;
}

constexpr std::string_view kGenericClause =
    "Review each response carefully for missed or misidentified defects.";

const std::vector<std::string_view>& refinement_markers() {
  static const std::vector<std::string_view> markers = {"should", "please", "need to", "needs to",
                                                        "must"};
  return markers;
}

double round4(double x) { return std::round(x * 1e4) / 1e4; }

double step_toward(double v, double target, double step) {
  if (v < target) return std::min(target, v + step);
  if (v > target) return std::max(target, v - step);
  return v;
}

int step_toward(int v, int target, int step) {
  if (v < target) return std::min(target, v + step);
  if (v > target) return std::max(target, v - step);
  return v;
}

bool has_refinement_request(const std::string& text) {
  const std::string padded = " " + text::normalize(text) + " ";
  for (auto m : refinement_markers()) {
    if (padded.find(" " + std::string(m) + " ") != std::string::npos) return true;
  }
  return false;
}

}  // namespace

std::string_view to_string(FeedbackKind kind) {
  switch (kind) {
    case FeedbackKind::positive: return "positive";
    case FeedbackKind::negative: return "negative";
    case FeedbackKind::score: return "score";
    case FeedbackKind::open_ended: return "open_ended";
    case FeedbackKind::mixed: return "mixed";
  }
  return "open_ended";
}

FeedbackKind feedback_kind_from_string(std::string_view s) {
  for (auto k : {FeedbackKind::positive, FeedbackKind::negative, FeedbackKind::score,
                 FeedbackKind::open_ended, FeedbackKind::mixed}) {
    if (to_string(k) == s) return k;
  }
  fail(ErrorCode::validation, "unknown feedback kind '" + std::string(s) + "'");
}

Feedback parse_feedback(const std::optional<std::string>& raw_text, std::optional<int> score,
                        std::int64_t timestamp_ms) {
  std::optional<std::string> t;
  if (raw_text && !text::trim(*raw_text).empty()) t = text::trim(*raw_text);
  require(t || score, "feedback needs a text or a score");
  if (score) require(*score >= 1 && *score <= 10, "feedback score must be in 1..10");

  Feedback f;
  f.text = t;
  f.score = score;
  f.timestamp_ms = timestamp_ms;
  if (score && t) {
    f.kind = FeedbackKind::mixed;
  } else if (score) {
    f.kind = FeedbackKind::score;
  } else {
    const int p = text::polarity(*t);
    f.kind = p > 0 ? FeedbackKind::positive : p < 0 ? FeedbackKind::negative : FeedbackKind::open_ended;
  }
  return f;
}

double score_pct(const Feedback& f, const ScoreAnchors& anchors) {
  double pct = anchors.neutral;
  switch (f.kind) {
    case FeedbackKind::score:
    case FeedbackKind::mixed:
      require(f.score.has_value(), "score feedback without a score");
      pct = 10.0 * *f.score;
      break;
    case FeedbackKind::positive: pct = anchors.positive; break;
    case FeedbackKind::negative: pct = anchors.negative; break;
    case FeedbackKind::open_ended:
      pct = anchors.neutral + anchors.per_polarity * text::polarity(f.text.value_or(""));
      break;
  }
  return std::clamp(pct, 0.0, 100.0);
}

SatisfactionState update_satisfaction(SatisfactionState prev, const Feedback& f, double ema_alpha,
                                      const ScoreAnchors& anchors) {
  const double s = (1.0 - ema_alpha) * prev.value + ema_alpha * score_pct(f, anchors);
  return {std::clamp(s, 0.0, 100.0)};
}

void LoopConfig::validate() const {
  require(ft_interval >= 1, "ft_interval must be positive");
  require(satisfaction_threshold > 0 && satisfaction_threshold < 100,
          "satisfaction_threshold must be in (0,100)");
  require(!max_iterations || *max_iterations >= 1, "max_iterations must be positive");
  require(ema_alpha > 0 && ema_alpha <= 1, "ema_alpha must be in (0,1]");
  require(bounds.top_p_min > 0 && bounds.top_p_min <= bounds.top_p_max && bounds.top_p_max <= 1,
          "top_p bounds must satisfy 0 < min <= max <= 1");
  require(bounds.top_k_min >= 1 && bounds.top_k_min <= bounds.top_k_max,
          "top_k bounds must satisfy 1 <= min <= max");
  require(top_p_step >= 0 && top_k_step >= 0, "param steps must be non-negative");
  default_params.validate();
  generation.validate();
}

std::string_view to_string(LoopAction action) {
  switch (action) {
    case LoopAction::none: return "none";
    case LoopAction::system_updated: return "system_updated";
    case LoopAction::finetuned: return "finetuned";
    case LoopAction::finetune_failed: return "finetune_failed";
  }
  return "none";
}

LoopState initial_state(const LoopConfig& cfg, const std::string& base_model_id,
                        const std::string& system_message, std::string instruction) {
  require(!text::trim(base_model_id).empty(), "base model id must be non-empty");
  LoopState s;
  s.sm = SystemMessage::make(system_message);
  s.instruction = std::move(instruction);
  s.params = cfg.default_params;
  s.model_id = base_model_id;
  s.model_chain = {base_model_id};
  return s;
}

SystemUpdate update_system(const SystemMessage& sm, const Feedback& f,
                           const std::string& instruction, const SamplingParams& params,
                           const LoopConfig& cfg) {
  SystemUpdate out{sm, instruction, params, score_pct(f, cfg.anchors)};
  const std::string body = f.text.value_or("");

  if (out.score_pct < 50) {
    const auto words = text::word_set(body);
    std::vector<std::string_view> clauses;
    for (const auto& rule : clause_rules()) {
      for (auto kw : rule.keywords) {
        if (words.count(std::string(kw))) {
          clauses.push_back(rule.clause);
          break;
        }
      }
    }
    if (clauses.empty()) clauses.push_back(kGenericClause);
    std::string next = sm.text;
    for (auto c : clauses) {
      if (next.find(c) == std::string::npos) next += (next.empty() ? "" : " ") + std::string(c);
    }
    if (next != sm.text) out.sm.update(next);
    out.params.top_p = round4(std::max(cfg.bounds.top_p_min, params.top_p - cfg.top_p_step));
    out.params.top_k = std::max(cfg.bounds.top_k_min, params.top_k - cfg.top_k_step);
  } else if (out.score_pct >= 80) {
    out.params.top_p = round4(step_toward(params.top_p, cfg.default_params.top_p, cfg.top_p_step));
    out.params.top_k = step_toward(params.top_k, cfg.default_params.top_k, cfg.top_k_step);
  }
  out.params.top_p = std::clamp(out.params.top_p, cfg.bounds.top_p_min, cfg.bounds.top_p_max);
  out.params.top_k = std::clamp(out.params.top_k, cfg.bounds.top_k_min, cfg.bounds.top_k_max);

  if (!body.empty() && has_refinement_request(body) && instruction.find(body) == std::string::npos) {
    out.instruction = instruction.empty() ? body : instruction + " " + body;
  }
  return out;
}

bool should_finetune(const LoopState& state, const LoopConfig& cfg) {
  if (state.counter >= cfg.ft_interval) return true;
  const double s = state.satisfaction.value;
  return cfg.literal_ge_trigger ? s >= cfg.satisfaction_threshold
                                : s < cfg.satisfaction_threshold;
}

FinetuneOutcome finetune_cycle(LoopState& state, const LoopConfig& cfg, const LoopDeps& deps) {
  require(deps.backends != nullptr, "fine-tune cycle needs backends");
  FinetuneOutcome out;
  ++state.ft_attempts;

  std::vector<CaptionRecord> captions;
  for (std::size_t i = 0; i < state.feedbacks.size(); ++i) {
    const auto& f = state.feedbacks[i];
    if (!f.text) continue;
    const bool use = f.kind == FeedbackKind::negative || f.kind == FeedbackKind::open_ended ||
                     (f.kind == FeedbackKind::mixed && score_pct(f, cfg.anchors) < 50);
    if (!use) continue;
    CaptionRecord c;
    c.id = "ft" + std::to_string(state.ft_attempts) + "-fb" + std::to_string(i + 1);
    c.template_id = "feedback";
    c.text = *f.text;
    captions.push_back(std::move(c));
  }
  if (captions.empty()) {
    CaptionRecord c;
    c.id = "ft" + std::to_string(state.ft_attempts) + "-instruction";
    c.template_id = "instruction";
    c.text = state.instruction.empty() ? state.sm.text : state.instruction;
    captions.push_back(std::move(c));
    state.warnings.push_back("fine-tune " + std::to_string(state.ft_attempts) +
                             ": no feedback text, dataset built from the instruction");
  }

  try {
    auto compiled = compile_dataset(captions, cfg.generation, state.sm.text, *deps.backends);
    for (const auto& w : compiled.warnings) {
      state.warnings.push_back("fine-tune " + std::to_string(state.ft_attempts) + ": " + w);
    }
    std::filesystem::create_directories(deps.dataset_dir);
    out.dataset_ref = (std::filesystem::path(deps.dataset_dir) /
                       ("ft-" + std::to_string(state.ft_attempts) + ".jsonl"))
                          .string();
    write_dataset_jsonl(out.dataset_ref, compiled.entries);
    out.job = execute_finetune(state.model_id, out.dataset_ref, state.params,
                               deps.backends->get(ModelRole::chat), deps.finetune,
                               deps.backends->retry());
    if (out.job->status == JobStatus::succeeded && out.job->result_model_id) {
      out.succeeded = true;
    } else {
      out.error = out.job->error.empty() ? "fine-tune job " + out.job->job_id + " failed"
                                         : out.job->error;
    }
  } catch (const Error& e) {
    out.error = std::string(to_string(e.code())) + ": " + e.what();
  }

  if (out.succeeded) {
    state.model_id = *out.job->result_model_id;
    state.model_chain.push_back(state.model_id);
    ++state.ft_count;
    state.feedbacks.clear();
    state.satisfaction.value = 100;
    state.counter = 0;
  } else {
    state.warnings.push_back("fine-tune " + std::to_string(state.ft_attempts) +
                             " failed: " + out.error);
  }
  return out;
}

StepOutcome step(LoopState& state, const Feedback& f, const LoopConfig& cfg, const LoopDeps& deps) {
  StepOutcome out;
  state.feedbacks.push_back(f);
  state.satisfaction = update_satisfaction(state.satisfaction, f, cfg.ema_alpha, cfg.anchors);
  const double raw = state.satisfaction.value;

  auto upd = update_system(state.sm, f, state.instruction, state.params, cfg);
  if (upd.sm != state.sm || upd.instruction != state.instruction || upd.params != state.params) {
    out.action = LoopAction::system_updated;
  }
  state.sm = std::move(upd.sm);
  state.instruction = std::move(upd.instruction);
  state.params = upd.params;

  state.counter = std::min(state.counter + 1, cfg.ft_interval);
  ++state.iteration;

  if (should_finetune(state, cfg)) {
    out.finetune = finetune_cycle(state, cfg, deps);
    out.action = out.finetune->succeeded ? LoopAction::finetuned : LoopAction::finetune_failed;
  }

  TraceEntry t;
  t.iteration = state.iteration;
  t.score_pct = upd.score_pct;
  t.satisfaction_raw = raw;
  t.satisfaction = state.satisfaction.value;
  t.action = out.action;
  t.counter = state.counter;
  t.sm_version = state.sm.version;
  t.model_id = state.model_id;
  t.params = state.params;
  state.trace.push_back(std::move(t));
  return out;
}

LoopReport report_of(const LoopState& state) {
  return {state.iteration, state.ft_count, state.model_chain, state.trace, state.warnings};
}

LoopReport run_loop(LoopState& state, std::span<const Feedback> feedbacks, const LoopConfig& cfg,
                    const LoopDeps& deps) {
  cfg.validate();
  for (const auto& f : feedbacks) {
    if (cfg.max_iterations && state.iteration >= *cfg.max_iterations) break;
    step(state, f, cfg, deps);
  }
  return report_of(state);
}

std::vector<Feedback> read_feedback_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot read feedback file " + path);
  std::vector<Feedback> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      fail(ErrorCode::validation, path + ":" + std::to_string(lineno) + ": not a JSON object");
    }
    try {
      out.push_back(j.get<Feedback>());
    } catch (const Error& e) {
      fail(e.code(), path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::validation, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const Feedback& f) {
  j = {{"kind", to_string(f.kind)}, {"timestamp", f.timestamp_ms}};
  j["score"] = f.score ? nlohmann::json(*f.score) : nullptr;
  j["text"] = f.text ? nlohmann::json(*f.text) : nullptr;
}

void from_json(const nlohmann::json& j, Feedback& f) {
  require(j.is_object(), "feedback must be a JSON object");
  std::optional<std::string> t;
  std::optional<int> score;
  if (j.contains("text") && !j.at("text").is_null()) {
    require(j.at("text").is_string(), "feedback text must be a string");
    t = j.at("text").get<std::string>();
  }
  if (j.contains("score") && !j.at("score").is_null()) {
    require(j.at("score").is_number_integer(), "feedback score must be an integer");
    score = j.at("score").get<int>();
  }
  std::int64_t ts = 0;
  if (j.contains("timestamp") && j.at("timestamp").is_number()) ts = j.at("timestamp").get<std::int64_t>();
  f = parse_feedback(t, score, ts);
  if (j.contains("kind")) {
    const auto stored = feedback_kind_from_string(j.at("kind").get<std::string>());
    require(stored == f.kind, "stored feedback kind disagrees with its content");
  }
}

void to_json(nlohmann::json& j, const LoopConfig& c) {
  j = {{"ft_interval", c.ft_interval},
       {"satisfaction_threshold", c.satisfaction_threshold},
       {"ema_alpha", c.ema_alpha},
       {"bounds",
        {{"top_p_min", c.bounds.top_p_min},
         {"top_p_max", c.bounds.top_p_max},
         {"top_k_min", c.bounds.top_k_min},
         {"top_k_max", c.bounds.top_k_max}}},
       {"top_p_step", c.top_p_step},
       {"top_k_step", c.top_k_step},
       {"default_params", c.default_params},
       {"anchors",
        {{"positive", c.anchors.positive},
         {"negative", c.anchors.negative},
         {"neutral", c.anchors.neutral},
         {"per_polarity", c.anchors.per_polarity}}},
       {"literal_ge_trigger", c.literal_ge_trigger},
       {"generation", c.generation}};
  j["max_iterations"] = c.max_iterations ? nlohmann::json(*c.max_iterations) : nullptr;
}

void from_json(const nlohmann::json& j, LoopConfig& c) {
  require(j.is_object(), "loop config must be a JSON object");
  c.ft_interval = j.value("ft_interval", c.ft_interval);
  c.satisfaction_threshold = j.value("satisfaction_threshold", c.satisfaction_threshold);
  c.ema_alpha = j.value("ema_alpha", c.ema_alpha);
  if (j.contains("max_iterations") && !j.at("max_iterations").is_null()) {
    c.max_iterations = j.at("max_iterations").get<int>();
  }
  if (j.contains("bounds")) {
    const auto& b = j.at("bounds");
    c.bounds.top_p_min = b.value("top_p_min", c.bounds.top_p_min);
    c.bounds.top_p_max = b.value("top_p_max", c.bounds.top_p_max);
    c.bounds.top_k_min = b.value("top_k_min", c.bounds.top_k_min);
    c.bounds.top_k_max = b.value("top_k_max", c.bounds.top_k_max);
  }
  c.top_p_step = j.value("top_p_step", c.top_p_step);
  c.top_k_step = j.value("top_k_step", c.top_k_step);
  if (j.contains("default_params")) c.default_params = j.at("default_params").get<SamplingParams>();
  if (j.contains("anchors")) {
    const auto& a = j.at("anchors");
    c.anchors.positive = a.value("positive", c.anchors.positive);
    c.anchors.negative = a.value("negative", c.anchors.negative);
    c.anchors.neutral = a.value("neutral", c.anchors.neutral);
    c.anchors.per_polarity = a.value("per_polarity", c.anchors.per_polarity);
  }
  c.literal_ge_trigger = j.value("literal_ge_trigger", c.literal_ge_trigger);
  if (j.contains("generation")) c.generation = j.at("generation").get<GenerationPolicy>();
  c.validate();
}

void to_json(nlohmann::json& j, const TraceEntry& t) {
  j = {{"iteration", t.iteration},
       {"score_pct", t.score_pct},
       {"satisfaction_raw", t.satisfaction_raw},
       {"satisfaction", t.satisfaction},
       {"action", to_string(t.action)},
       {"counter", t.counter},
       {"sm_version", t.sm_version},
       {"model_id", t.model_id},
       {"top_p", t.params.top_p},
       {"top_k", t.params.top_k}};
}

void from_json(const nlohmann::json& j, TraceEntry& t) {
  t.iteration = j.at("iteration").get<int>();
  t.score_pct = j.at("score_pct").get<double>();
  t.satisfaction_raw = j.at("satisfaction_raw").get<double>();
  t.satisfaction = j.at("satisfaction").get<double>();
  const auto action = j.at("action").get<std::string>();
  t.action = LoopAction::none;
  for (auto a : {LoopAction::none, LoopAction::system_updated, LoopAction::finetuned,
                 LoopAction::finetune_failed}) {
    if (to_string(a) == action) t.action = a;
  }
  t.counter = j.at("counter").get<int>();
  t.sm_version = j.at("sm_version").get<int>();
  t.model_id = j.at("model_id").get<std::string>();
  t.params.top_p = j.at("top_p").get<double>();
  t.params.top_k = j.at("top_k").get<int>();
}

void to_json(nlohmann::json& j, const LoopState& s) {
  j = {{"iteration", s.iteration},
       {"counter", s.counter},
       {"feedbacks", s.feedbacks},
       {"satisfaction", s.satisfaction.value},
       {"sm", s.sm},
       {"instruction", s.instruction},
       {"params", s.params},
       {"model_id", s.model_id},
       {"ft_count", s.ft_count},
       {"ft_attempts", s.ft_attempts},
       {"model_chain", s.model_chain},
       {"trace", s.trace},
       {"warnings", s.warnings}};
}

void from_json(const nlohmann::json& j, LoopState& s) {
  s.iteration = j.at("iteration").get<int>();
  s.counter = j.at("counter").get<int>();
  s.feedbacks = j.at("feedbacks").get<std::vector<Feedback>>();
  s.satisfaction.value = j.at("satisfaction").get<double>();
  s.sm = j.at("sm").get<SystemMessage>();
  s.instruction = j.at("instruction").get<std::string>();
  s.params = j.at("params").get<SamplingParams>();
  s.model_id = j.at("model_id").get<std::string>();
  s.ft_count = j.at("ft_count").get<int>();
  s.ft_attempts = j.value("ft_attempts", s.ft_count);
  s.model_chain = j.at("model_chain").get<std::vector<std::string>>();
  s.trace = j.value("trace", std::vector<TraceEntry>{});
  s.warnings = j.value("warnings", std::vector<std::string>{});
  require(s.satisfaction.value >= 0 && s.satisfaction.value <= 100, "satisfaction out of range");
  require(s.ft_count + 1 == static_cast<int>(s.model_chain.size()),
          "model chain length must equal ft_count + 1");
  require(!s.model_chain.empty() && s.model_chain.back() == s.model_id,
          "model chain must end at the current model");
}

void to_json(nlohmann::json& j, const LoopReport& r) {
  j = {{"iterations", r.iterations},
       {"ft_count", r.ft_count},
       {"model_chain", r.model_chain},
       {"trace", r.trace},
       {"warnings", r.warnings}};
}

}  // namespace dtwin
