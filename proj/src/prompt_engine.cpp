#include "dtwin/prompt_engine.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "dtwin/error.hpp"
#include "dtwin/text.hpp"

namespace dtwin {

SystemMessage SystemMessage::make(std::string text) {
  require(!text::trim(text).empty(), "system message text must be non-empty");
  SystemMessage sm;
  sm.text = std::move(text);
  return sm;
}

void SystemMessage::update(std::string new_text) {
  require(!text::trim(new_text).empty(), "system message text must be non-empty");
  history.push_back(std::move(text));
  text = std::move(new_text);
  ++version;
}

std::vector<Message> ComposedPrompt::messages() const {
  std::vector<Message> out;
  out.reserve(injected_context.size() + 2);
  out.push_back({"system", system});
  for (const auto& injection : injected_context) out.push_back({"context", injection});
  std::string content = user;
  for (const auto& m : media) content += "\n[media] " + m;
  out.push_back({"user", std::move(content)});
  return out;
}

std::string ComposedPrompt::serialize() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : messages()) arr.push_back({{"role", m.role}, {"content", m.content}});
  return arr.dump();
}

void validate_rule(const VpiRule& rule) {
  require(!rule.id.empty(), "VPI rule id must be non-empty");
  require(!text::trim(rule.trigger_pattern).empty(),
          "VPI rule '" + rule.id + "' has an empty trigger pattern");
  require(!rule.injection_template.empty(),
          "VPI rule '" + rule.id + "' has an empty injection template");
  // Every placeholder must have a value so instantiation is total.
  const auto& t = rule.injection_template;
  for (std::size_t pos = t.find('{'); pos != std::string::npos; pos = t.find('{', pos + 1)) {
    auto close = t.find('}', pos);
    require(close != std::string::npos,
            "VPI rule '" + rule.id + "' has an unterminated placeholder");
    auto slot = t.substr(pos + 1, close - pos - 1);
    require(rule.slots.count(slot) == 1,
            "VPI rule '" + rule.id + "' has no value for slot '" + slot + "'");
  }
}

std::string instantiate(const VpiRule& rule) {
  std::string out;
  const auto& t = rule.injection_template;
  std::size_t i = 0;
  while (i < t.size()) {
    if (t[i] == '{') {
      auto close = t.find('}', i);
      if (close != std::string::npos) {
        auto it = rule.slots.find(t.substr(i + 1, close - i - 1));
        if (it != rule.slots.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(t[i++]);
  }
  return out;
}

bool triggers(const VpiRule& rule, std::string_view user_prompt) {
  if (rule.mode == TriggerMode::substring) {
    auto pattern = text::normalize(rule.trigger_pattern);
    return !pattern.empty() && text::normalize(user_prompt).find(pattern) != std::string::npos;
  }
  auto needle = text::words(rule.trigger_pattern);
  auto hay = text::words(user_prompt);
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

std::vector<std::string> match_vpi(std::string_view user_prompt, std::span<const VpiRule> rules) {
  std::vector<const VpiRule*> hits;
  for (const auto& rule : rules) {
    if (triggers(rule, user_prompt)) hits.push_back(&rule);
  }
  std::sort(hits.begin(), hits.end(), [](const VpiRule* a, const VpiRule* b) {
    if (a->priority != b->priority) return a->priority > b->priority;
    return a->id < b->id;
  });
  std::vector<std::string> out;
  out.reserve(hits.size());
  for (const auto* rule : hits) out.push_back(instantiate(*rule));
  return out;
}

ComposedPrompt compose(const SystemMessage& sm, std::string_view user_prompt,
                       std::vector<std::string> injections, std::vector<std::string> media) {
  require(!text::trim(sm.text).empty(), "system message text must be non-empty");
  require(!text::trim(user_prompt).empty(), "user prompt must be non-empty");
  ComposedPrompt p;
  p.system = sm.text;
  p.injected_context = std::move(injections);
  p.user = std::string(user_prompt);
  p.media = std::move(media);
  return p;
}

std::vector<VpiRule> parse_vpi_rules(const nlohmann::json& j) {
  require(j.is_array(), "VPI rules must be a JSON array");
  std::vector<VpiRule> rules;
  std::set<std::string> ids;
  for (const auto& item : j) {
    VpiRule rule = item.get<VpiRule>();
    validate_rule(rule);
    require(ids.insert(rule.id).second, "duplicate VPI rule id '" + rule.id + "'");
    rules.push_back(std::move(rule));
  }
  return rules;
}

std::vector<VpiRule> load_vpi_rules(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot read VPI rules file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::validation, "VPI rules file is not valid JSON: " + std::string(e.what()));
  }
  return parse_vpi_rules(j);
}

void to_json(nlohmann::json& j, const SystemMessage& sm) {
  j = {{"text", sm.text}, {"version", sm.version}, {"history", sm.history}};
}

void from_json(const nlohmann::json& j, SystemMessage& sm) {
  j.at("text").get_to(sm.text);
  sm.version = j.value("version", 1);
  sm.history = j.value("history", std::vector<std::string>{});
}

void to_json(nlohmann::json& j, const VpiRule& rule) {
  j = {{"id", rule.id},
       {"trigger_pattern", rule.trigger_pattern},
       {"injection_template", rule.injection_template},
       {"slots", rule.slots},
       {"priority", rule.priority},
       {"mode", rule.mode == TriggerMode::token ? "token" : "substring"}};
}

void from_json(const nlohmann::json& j, VpiRule& rule) {
  rule.id = j.at("id").get<std::string>();
  rule.trigger_pattern = j.at("trigger_pattern").get<std::string>();
  rule.injection_template = j.at("injection_template").get<std::string>();
  rule.slots = j.value("slots", std::map<std::string, std::string>{});
  rule.priority = j.value("priority", 0);
  auto mode = j.value("mode", std::string("substring"));
  require(mode == "substring" || mode == "token", "VPI rule mode must be substring or token");
  rule.mode = mode == "token" ? TriggerMode::token : TriggerMode::substring;
}

}  // namespace dtwin
