#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace dtwin {

// Authoritative role instruction prepended to every model call. Each update
// keeps the previous text in history and bumps version by exactly one.
struct SystemMessage {
  std::string text;
  int version = 1;
  std::vector<std::string> history;

  static SystemMessage make(std::string text);
  void update(std::string new_text);

  bool operator==(const SystemMessage&) const = default;
};

enum class TriggerMode { substring, token };

// Trigger-matched detail injection. `injection_template` may reference
// {slot} placeholders that are filled from `slots` (location, size, depth...).
struct VpiRule {
  std::string id;
  std::string trigger_pattern;
  std::string injection_template;
  std::map<std::string, std::string> slots;
  int priority = 0;
  TriggerMode mode = TriggerMode::substring;
};

struct Message {
  std::string role;
  std::string content;

  bool operator==(const Message&) const = default;
};

struct ComposedPrompt {
  std::string system;
  std::vector<std::string> injected_context;
  std::string user;
  std::vector<std::string> media;
  // Request tag ("chat", "rephrase", "caption", ...) and metadata for
  // backends. Never part of the message sequence.
  std::string task = "chat";
  std::map<std::string, std::string> meta;

  // system -> one "context" message per injection -> user (+ media refs).
  std::vector<Message> messages() const;
  // Canonical JSON of messages(); byte-identical for identical inputs.
  std::string serialize() const;
};

void validate_rule(const VpiRule& rule);
std::string instantiate(const VpiRule& rule);
bool triggers(const VpiRule& rule, std::string_view user_prompt);

// Instantiated injections of every matching rule, ordered by priority
// descending, then id ascending.
std::vector<std::string> match_vpi(std::string_view user_prompt, std::span<const VpiRule> rules);

ComposedPrompt compose(const SystemMessage& sm, std::string_view user_prompt,
                       std::vector<std::string> injections, std::vector<std::string> media);

// Rules file: JSON array of VpiRule objects. Rejects duplicate ids.
std::vector<VpiRule> parse_vpi_rules(const nlohmann::json& j);
std::vector<VpiRule> load_vpi_rules(const std::string& path);

void to_json(nlohmann::json& j, const SystemMessage& sm);
void from_json(const nlohmann::json& j, SystemMessage& sm);
void to_json(nlohmann::json& j, const VpiRule& rule);
void from_json(const nlohmann::json& j, VpiRule& rule);

}  // namespace dtwin
