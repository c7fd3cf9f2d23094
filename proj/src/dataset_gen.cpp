#include "dtwin/dataset_gen.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "dtwin/error.hpp"
#include "dtwin/kernels.hpp"
#include "dtwin/text.hpp"

namespace dtwin {

namespace {

constexpr std::size_t kShingleSize = 3;

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

// Value after a case-insensitive "key:" prefix at the start of a line.
std::optional<std::string> field_line(const std::string& line, const std::string& key) {
  const auto lower = text::to_lower(text::trim(line));
  const auto prefix = text::to_lower(key) + ":";
  if (lower.rfind(prefix, 0) != 0) return std::nullopt;
  return text::trim(text::trim(line).substr(prefix.size()));
}

struct PromptResponse {
  std::string prompt;
  std::string response;
};

PromptResponse parse_pair(const std::string& reply, const std::string& fallback_prompt) {
  std::istringstream in(reply);
  std::string line;
  std::optional<std::string> prompt;
  std::optional<std::string> response;
  while (std::getline(in, line)) {
    if (response) {
      *response += "\n" + line;
    } else if (auto p = field_line(line, "prompt"); p && !prompt) {
      prompt = *p;
    } else if (auto r = field_line(line, "response")) {
      response = *r;
    }
  }
  if (!response) return {fallback_prompt, text::trim(reply)};
  return {prompt && !prompt->empty() ? *prompt : fallback_prompt, text::trim(*response)};
}

}  // namespace

void GenerationPolicy::validate() const {
  require(k_max >= 0, "k_max must be non-negative");
  require(max_attempts >= 1, "max_attempts must be positive");
  require(max_attempts >= k_max, "max_attempts must be >= k_max");
  require(similarity_threshold >= 0.0 && similarity_threshold <= 1.0,
          "similarity_threshold must be in [0, 1]");
  require(lambda >= 0.0, "lambda must be non-negative");
  params.validate();
}

TemplateRegistry::TemplateRegistry() {
  add({"defect-v1",
       "You are a railway defect analyst. Caption the image for a defect inspection dataset. "
       "Answer with exactly three lines:\n"
       "defect_type: <the visible defect, e.g. crack, corrosion, missing bolt>\n"
       "location: <the component where it appears, e.g. rail, joint, wheel>\n"
       "caption: <one sentence naming the defect and its location>",
       {"defect_type", "location"}});
}

void TemplateRegistry::add(CaptionTemplate t) {
  require(!t.id.empty(), "caption template id must be non-empty");
  templates_[t.id] = std::move(t);
}

const CaptionTemplate& TemplateRegistry::get(const std::string& id) const {
  auto it = templates_.find(id);
  if (it == templates_.end()) fail(ErrorCode::template_not_found, "unknown caption template: " + id);
  return it->second;
}

bool TemplateRegistry::contains(const std::string& id) const { return templates_.count(id) != 0; }

CaptionRecord caption_image(const std::string& image_ref, const std::string& template_id,
                            const TemplateRegistry& templates, const BackendSet& backends,
                            const std::string& caption_id) {
  const CaptionTemplate& tmpl = templates.get(template_id);
  ComposedPrompt prompt;
  prompt.system = "You caption railway inspection images.";
  prompt.user = tmpl.instruction;
  prompt.media = {image_ref};
  prompt.task = "caption";
  prompt.meta = {{"image", image_ref}, {"template_id", template_id}};

  const Completion c = chat(prompt, GenerationPolicy{}.params, backends, ModelRole::vision);

  CaptionRecord record;
  record.id = caption_id.empty() ? "cap-" + std::to_string(text::fnv1a64(image_ref) % 1000000007)
                                 : caption_id;
  record.source_image_ref = image_ref;
  record.template_id = template_id;
  std::istringstream in(c.text);
  std::string line;
  std::string caption;
  while (std::getline(in, line)) {
    if (auto v = field_line(line, "caption")) {
      caption = *v;
      continue;
    }
    for (const auto& field : tmpl.required_fields) {
      if (auto v = field_line(line, field); v && !v->empty()) {
        record.metadata[field] = *v;
        record.tags.push_back(*v);
      }
    }
  }
  if (caption.empty() && record.metadata.empty()) caption = text::trim(c.text);
  if (text::normalize(caption).empty()) fail(ErrorCode::generation, "backend returned an empty caption");
  for (const auto& field : tmpl.required_fields) {
    if (!record.metadata.count(field)) {
      fail(ErrorCode::generation, "caption lacks required template field '" + field + "'",
           {{"reply", c.text}});
    }
  }
  record.text = caption;
  record.metadata["model_id"] = c.model_id;
  return record;
}

int complexity_score(std::string_view s) {
  const auto w = text::words(s);
  const std::set<std::string> distinct(w.begin(), w.end());
  return static_cast<int>(w.size() + distinct.size());
}

bool is_unique(std::string_view candidate, std::span<const std::string> existing,
               const GenerationPolicy& policy) {
  const auto norm = text::normalize(candidate);
  const auto grams = text::shingles(candidate, kShingleSize);
  for (const auto& other : existing) {
    if (text::normalize(other) == norm) return false;
    if (text::jaccard(grams, text::shingles(other, kShingleSize)) > policy.similarity_threshold) {
      return false;
    }
  }
  return true;
}

double diversity(std::span<const std::string> samples) {
  std::vector<std::vector<std::string>> sets;
  sets.reserve(samples.size());
  for (const auto& s : samples) {
    auto ws = text::word_set(s);
    sets.emplace_back(ws.begin(), ws.end());
  }
  return kernels::pairwise_diversity(sets);
}

double reconstruction_loss(std::string_view sample, std::string_view caption) {
  require(!text::trim(caption).empty(), "caption must be non-empty");
  std::set<std::string> content;
  for (const auto& w : text::words(caption)) {
    if (!text::is_stop_word(w)) content.insert(w);
  }
  if (content.empty()) {
    fail(ErrorCode::degenerate_input, "caption has no content words: " + std::string(caption));
  }
  const auto present = text::word_set(sample);
  std::size_t covered = 0;
  for (const auto& w : content) covered += present.count(w);
  return 1.0 - static_cast<double>(covered) / static_cast<double>(content.size());
}

ObjectiveReport objective(std::span<const std::string> samples, std::string_view caption,
                          double lambda) {
  require(!samples.empty(), "objective needs at least one sample");
  require(lambda >= 0.0, "lambda must be non-negative");
  ObjectiveReport r;
  r.lambda = lambda;
  r.diversity = diversity(samples);
  double total = 0;
  for (const auto& s : samples) total += reconstruction_loss(s, caption);
  r.reconstruction_loss = total / static_cast<double>(samples.size());
  r.value = r.diversity - lambda * r.reconstruction_loss;
  return r;
}

ComposedPrompt rephrase_request(const CaptionRecord& caption, std::span<const std::string> accepted,
                                int attempt) {
  ComposedPrompt p;
  p.system = "You are generating data to train an LLM for railway defect inspection.";
  std::ostringstream user;
  user << "You are generating data to train an LLM. Based on the initial description: "
       << caption.text
       << ", create a prompt/response pair ensuring the response is more complex and diverse "
          "than previous ones.\n"
       << "Reply with two lines: \"PROMPT: <prompt>\" and \"RESPONSE: <response>\".";
  if (!accepted.empty()) {
    user << "\nPrevious responses:";
    for (const auto& a : accepted) user << "\n- " << a;
  }
  user << "\nAttempt " << attempt + 1 << '.';
  p.user = user.str();
  p.task = "rephrase";
  p.meta = {{"caption", caption.text}, {"caption_id", caption.id},
            {"attempt", std::to_string(attempt)}};
  return p;
}

RephraseResult rephrase_caption(const CaptionRecord& caption, const GenerationPolicy& policy,
                                const BackendSet& backends) {
  policy.validate();
  require(!text::normalize(caption.text).empty(), "caption text must be non-empty");
  RephraseResult result;
  if (policy.k_max == 0) return result;

  const int floor_complexity = complexity_score(caption.text);
  std::vector<std::string> accepted;
  for (int attempt = 0;
       attempt < policy.max_attempts && static_cast<int>(accepted.size()) < policy.k_max;
       ++attempt) {
    ++result.attempts;
    const Completion c = chat(rephrase_request(caption, accepted, attempt), policy.params, backends);
    auto pair = parse_pair(c.text, caption.text);
    if (text::normalize(pair.response).empty()) continue;
    if (!is_unique(pair.response, accepted, policy)) continue;
    const int complexity = complexity_score(pair.response);
    if (complexity < floor_complexity) continue;

    SyntheticSample s;
    s.id = caption.id + "-s" + std::to_string(accepted.size() + 1);
    s.caption_id = caption.id;
    s.text = pair.response;
    s.prompt = pair.prompt;
    s.complexity = complexity;
    s.attempt_index = attempt;
    accepted.push_back(s.text);
    result.samples.push_back(std::move(s));
  }
  if (static_cast<int>(accepted.size()) < policy.k_max) {
    result.warning = "caption " + caption.id + ": accepted " + std::to_string(accepted.size()) +
                     " of " + std::to_string(policy.k_max) + " samples after " +
                     std::to_string(result.attempts) + " attempts";
  }
  return result;
}

CompiledDataset compile_dataset(std::span<const CaptionRecord> captions,
                                const GenerationPolicy& policy, const std::string& sm_template,
                                const BackendSet& backends) {
  require(!captions.empty(), "compile_dataset needs at least one caption");
  require(!text::trim(sm_template).empty(), "system message template must be non-empty");
  policy.validate();

  struct Slot {
    std::optional<RephraseResult> result;
    std::optional<CaptionFailure> failure;
  };
  std::vector<Slot> slots(captions.size());
  const auto n = static_cast<std::ptrdiff_t>(captions.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      slots[i].result = rephrase_caption(captions[i], policy, backends);
    } catch (const Error& e) {
      slots[i].failure = CaptionFailure{captions[i].id, std::string(to_string(e.code())), e.what()};
    } catch (const std::exception& e) {
      slots[i].failure = CaptionFailure{captions[i].id, "internal", e.what()};
    }
  }

  CompiledDataset out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    const CaptionRecord& caption = captions[i];
    if (slots[i].failure) {
      out.failures.push_back(*slots[i].failure);
      continue;
    }
    const RephraseResult& r = *slots[i].result;
    if (r.warning) out.warnings.push_back(*r.warning);

    std::vector<std::string> texts;
    const std::string sm = replace_all(replace_all(sm_template, "{caption}", caption.text),
                                       "{caption_id}", caption.id);
    for (const auto& s : r.samples) {
      texts.push_back(s.text);
      if (!seen.insert(text::normalize(s.text)).second) {
        ++out.duplicates_removed;
        continue;
      }
      out.entries.push_back(DatasetEntry{s, sm, s.prompt, s.text});
    }
    if (texts.empty()) continue;
    try {
      ObjectiveReport rep = objective(texts, caption.text, policy.lambda);
      rep.caption_id = caption.id;
      out.objectives.push_back(rep);
    } catch (const Error& e) {
      out.warnings.push_back("caption " + caption.id + ": objective not computed: " + e.what());
    }
  }
  if (out.duplicates_removed > 0) {
    out.warnings.push_back("removed " + std::to_string(out.duplicates_removed) +
                           " cross-caption duplicate sample(s)");
  }
  return out;
}

nlohmann::json dataset_row(const DatasetEntry& e) {
  return {{"id", e.sample.id},
          {"caption_id", e.sample.caption_id},
          {"system_message", e.system_message},
          {"prompt", e.prompt},
          {"response", e.response},
          {"complexity", e.sample.complexity},
          {"attempt_index", e.sample.attempt_index}};
}

DatasetEntry dataset_entry_from_row(const nlohmann::json& row) {
  DatasetEntry e;
  try {
    e.sample.id = row.at("id").get<std::string>();
    e.sample.caption_id = row.at("caption_id").get<std::string>();
    e.system_message = row.at("system_message").get<std::string>();
    e.prompt = row.at("prompt").get<std::string>();
    e.response = row.at("response").get<std::string>();
    e.sample.complexity = row.at("complexity").get<int>();
    e.sample.attempt_index = row.at("attempt_index").get<int>();
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::validation, std::string("invalid dataset row: ") + ex.what());
  }
  e.sample.text = e.response;
  e.sample.prompt = e.prompt;
  return e;
}

void write_dataset_jsonl(const std::string& path, std::span<const DatasetEntry> entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write dataset: " + path);
  for (const auto& e : entries) out << dataset_row(e).dump() << '\n';
  if (!out) fail(ErrorCode::io, "failed writing dataset: " + path);
}

std::vector<DatasetEntry> read_dataset_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot read dataset: " + path);
  std::vector<DatasetEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (text::trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    require(!j.is_discarded(), "dataset line is not JSON: " + line);
    out.push_back(dataset_entry_from_row(j));
  }
  return out;
}

nlohmann::json objective_report_json(std::span<const ObjectiveReport> reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    arr.push_back({{"caption_id", r.caption_id},
                   {"D", r.diversity},
                   {"L", r.reconstruction_loss},
                   {"lambda", r.lambda},
                   {"value", r.value}});
  }
  return arr;
}

std::vector<CaptionRecord> read_captions(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot read captions: " + path);
  std::vector<CaptionRecord> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = text::trim(line);
    if (t.empty()) continue;
    CaptionRecord c;
    auto j = nlohmann::json::parse(t, nullptr, false);
    if (!j.is_discarded() && j.is_object()) {
      c = j.get<CaptionRecord>();
    } else {
      c.text = t;
      c.template_id = "manual";
    }
    if (c.id.empty()) c.id = "c" + std::to_string(lineno);
    require(!text::normalize(c.text).empty(), "caption on line " + std::to_string(lineno) + " is empty");
    require(ids.insert(c.id).second, "duplicate caption id '" + c.id + "'");
    out.push_back(std::move(c));
  }
  return out;
}

void to_json(nlohmann::json& j, const CaptionRecord& c) {
  j = {{"id", c.id}, {"template_id", c.template_id}, {"text", c.text}, {"tags", c.tags}};
  j["source_image_ref"] = c.source_image_ref ? nlohmann::json(*c.source_image_ref) : nullptr;
  if (!c.metadata.empty()) j["metadata"] = c.metadata;
}

void from_json(const nlohmann::json& j, CaptionRecord& c) {
  c.id = j.value("id", "");
  c.template_id = j.value("template_id", "manual");
  c.text = j.at("text").get<std::string>();
  c.tags = j.value("tags", std::vector<std::string>{});
  if (j.contains("source_image_ref") && j.at("source_image_ref").is_string()) {
    c.source_image_ref = j.at("source_image_ref").get<std::string>();
  }
  c.metadata = j.value("metadata", std::map<std::string, std::string>{});
}

void to_json(nlohmann::json& j, const GenerationPolicy& p) {
  j = {{"k_max", p.k_max},
       {"similarity_threshold", p.similarity_threshold},
       {"lambda", p.lambda},
       {"max_attempts", p.max_attempts},
       {"params", p.params}};
}

void from_json(const nlohmann::json& j, GenerationPolicy& p) {
  p.k_max = j.value("k_max", p.k_max);
  p.similarity_threshold = j.value("similarity_threshold", p.similarity_threshold);
  p.lambda = j.value("lambda", p.lambda);
  p.max_attempts = j.value("max_attempts", p.max_attempts);
  if (j.contains("params")) p.params = j.at("params").get<SamplingParams>();
}

}  // namespace dtwin
