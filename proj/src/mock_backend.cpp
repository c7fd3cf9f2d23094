#include "dtwin/mock_backend.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "dtwin/error.hpp"
#include "dtwin/text.hpp"

namespace dtwin {

namespace {

// 1x1 RGBA PNG used as placeholder media.
constexpr std::array<unsigned char, 70> kTinyPng = {
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48,
    0x44, 0x52, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00,
    0x00, 0x1f, 0x15, 0xc4, 0x89, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x44, 0x41, 0x54, 0x78,
    0xda, 0x63, 0x64, 0x60, 0xf8, 0x5f, 0x0f, 0x00, 0x02, 0x87, 0x01, 0x80, 0xeb, 0x47,
    0xba, 0x92, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82};

const std::array<std::string_view, 10> kSizes = {
    "3 inches long",          "about 2 mm deep",         "extending 5 inches",
    "roughly 12 cm wide",     "about two inches in length", "with a depth of 4 mm",
    "spanning nearly 8 cm",   "barely 1 mm wide",        "close to 6 inches across",
    "about 15 mm in diameter"};

const std::array<std::string_view, 10> kPlacements = {
    "perpendicular to the track direction", "running diagonally across the surface",
    "oriented longitudinally along the rail", "located near the joint",
    "on the gauge corner of the rail head",  "close to the fishplate",
    "near the third sleeper from the switch", "on the outer web below the head",
    "at the edge of the base flange",         "adjacent to the clip fastening"};

const std::array<std::string_view, 10> kConditions = {
    "with light surface rust forming at the edges", "showing bright fresh metal inside the opening",
    "partially filled with ballast dust",            "with flaking paint around the affected area",
    "accompanied by hairline branching cracks",      "with visible moisture staining nearby",
    "that widens toward the lower end",              "with rounded worn edges from traffic",
    "surrounded by pitting on the adjacent surface", "with oil residue along its length"};

struct Keyword {
  std::string_view word;
  std::string_view label;
};

constexpr std::array<Keyword, 12> kDefects = {{{"crack", "crack"},
                                               {"cracks", "crack"},
                                               {"corrosion", "corrosion"},
                                               {"corroded", "corrosion"},
                                               {"rust", "rust"},
                                               {"missing", "missing bolt"},
                                               {"wear", "wear"},
                                               {"worn", "wear"},
                                               {"spalling", "spalling"},
                                               {"broken", "break"},
                                               {"break", "break"},
                                               {"squat", "squat"}}};

constexpr std::array<std::string_view, 10> kLocations = {
    "wheel", "rail", "joint", "track", "sleeper", "bolt", "fastener", "bridge", "gate", "door"};

std::string stem_of(const std::string& locator) {
  return std::filesystem::path(locator).stem().string();
}

std::vector<std::string> detect(const std::vector<std::string>& words, bool defects) {
  std::vector<std::string> out;
  auto add = [&](std::string_view label) {
    for (const auto& x : out)
      if (x == label) return;
    out.emplace_back(label);
  };
  for (const auto& w : words) {
    if (defects) {
      for (const auto& k : kDefects)
        if (w == k.word) add(k.label);
    } else {
      for (const auto& l : kLocations)
        if (w == l) add(l);
    }
  }
  return out;
}

std::string strip_period(std::string s) {
  s = text::trim(s);
  while (!s.empty() && (s.back() == '.' || s.back() == '!')) s.pop_back();
  return s;
}

std::string findings_report(const std::string& heading, const std::vector<std::string>& words,
                            std::uint64_t h) {
  auto defects = detect(words, true);
  auto locations = detect(words, false);
  std::ostringstream out;
  out << heading << ' ';
  if (defects.empty()) {
    out << "No defect could be confirmed from the provided input.";
  } else {
    out << defects.size() << " defect type(s) identified; prioritize inspection of the affected "
        << (locations.empty() ? std::string("component") : locations.front()) << '.';
  }
  out << "\n\n```findings\ndefect_type | location | severity\n";
  static constexpr std::array<std::string_view, 3> kSeverity = {"low", "medium", "high"};
  bool minor = false;
  for (const auto& w : words) minor = minor || w == "small" || w == "minor" || w == "hairline";
  for (std::size_t i = 0; i < defects.size(); ++i) {
    const std::string loc = locations.empty() ? "unspecified" : locations[i % locations.size()];
    auto sev = minor ? std::string_view("low") : kSeverity[text::splitmix64(h + i) % 3];
    out << defects[i] << " | " << loc << " | " << sev << '\n';
  }
  out << "```";
  return out.str();
}

}  // namespace

std::vector<double> hashing_embedding(std::string_view input, std::uint64_t seed, std::size_t dim) {
  require(dim > 0, "embedding dimension must be positive");
  std::vector<double> v(dim, 0.0);
  for (const auto& w : text::words(input)) {
    const std::uint64_t h = text::splitmix64(text::fnv1a64(w) ^ seed);
    v[h % dim] += (h >> 63) ? -1.0 : 1.0;
  }
  double norm = 0;
  for (double x : v) norm += x * x;
  if (norm > 0) {
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
  }
  return v;
}

std::string next_finetune_id(const std::string& base_model_id) {
  const auto pos = base_model_id.rfind("-ft-");
  if (pos != std::string::npos && pos + 4 < base_model_id.size()) {
    const auto digits = base_model_id.substr(pos + 4);
    if (std::all_of(digits.begin(), digits.end(), [](unsigned char c) { return std::isdigit(c); }) &&
        digits.size() < 10) {
      return base_model_id.substr(0, pos) + "-ft-" + std::to_string(std::stoi(digits) + 1);
    }
  }
  return base_model_id + "-ft-1";
}

MockBackend::MockBackend(MockConfig config) : config_(std::move(config)) {}

std::int64_t MockBackend::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

std::vector<FinetuneJob> MockBackend::jobs() const {
  std::lock_guard lock(mu_);
  std::vector<FinetuneJob> out;
  for (const auto& id : job_order_) out.push_back(jobs_.at(id));
  return out;
}

void MockBackend::before_call(const std::string& task) {
  bool transient = false;
  {
    std::lock_guard lock(mu_);
    ++calls_;
    transient = calls_ <= config_.transient_failures;
  }
  if (config_.delay.count() > 0) std::this_thread::sleep_for(config_.delay);
  if (transient) fail(ErrorCode::transport, "mock transient transport failure");
  if (config_.fail_tasks.count(task)) {
    fail(ErrorCode::backend, "mock configured to fail task '" + task + "'");
  }
}

std::string MockBackend::reply_for(const ComposedPrompt& prompt) const {
  if (config_.fixed_reply) return *config_.fixed_reply;
  if (auto it = config_.task_replies.find(prompt.task); it != config_.task_replies.end()) {
    return it->second;
  }
  const std::uint64_t h = text::splitmix64(config_.seed ^ text::fnv1a64(prompt.serialize()) ^
                                           text::fnv1a64(prompt.task));
  auto meta = [&](const std::string& key) {
    auto it = prompt.meta.find(key);
    return it == prompt.meta.end() ? std::string() : it->second;
  };

  if (prompt.task == "rephrase") {
    const std::string caption = meta("caption");
    const std::size_t attempt = meta("attempt").empty() ? 0 : std::stoul(meta("attempt"));
    if (auto it = config_.scripted.find(caption); it != config_.scripted.end() && !it->second.empty()) {
      return it->second[attempt % it->second.size()];
    }
    std::uint64_t r = text::splitmix64(config_.seed ^ text::fnv1a64(caption) ^
                                       text::splitmix64(attempt + 1));
    const auto size = kSizes[r % kSizes.size()];
    r = text::splitmix64(r);
    const auto placement = kPlacements[r % kPlacements.size()];
    r = text::splitmix64(r);
    const auto condition = kConditions[r % kConditions.size()];
    const std::string base = strip_period(caption);
    std::ostringstream out;
    out << "PROMPT: Describe the defect in detail: " << text::to_lower(base) << ".\n"
        << "RESPONSE: " << base << ", " << size << ", " << placement << ", " << condition << '.';
    return out.str();
  }

  if (prompt.task == "caption") {
    const std::string image = meta("image");
    auto words = text::words(stem_of(image));
    auto defects = detect(words, true);
    auto locations = detect(words, false);
    const std::string defect = defects.empty() ? std::string("surface wear") : defects.front();
    const std::string location = locations.empty() ? std::string("rail") : locations.front();
    std::string article = defect == "missing bolt" ? "A" : (defect[0] == 'a' || defect[0] == 'e' ||
                                                            defect[0] == 'i' || defect[0] == 'o' ||
                                                            defect[0] == 'u')
                                                               ? "An"
                                                               : "A";
    const std::string preposition = location == "joint" ? "at" : "on";
    std::ostringstream out;
    out << "defect_type: " << defect << "\nlocation: " << location << "\ncaption: " << article
        << ' ' << defect << ' ' << preposition << " the " << location << '.';
    return out.str();
  }

  std::vector<std::string> words;
  for (const auto& m : prompt.messages()) {
    auto w = text::words(m.content);
    words.insert(words.end(), w.begin(), w.end());
  }
  for (const auto& m : prompt.media) {
    auto w = text::words(stem_of(m));
    words.insert(words.end(), w.begin(), w.end());
  }

  if (prompt.task == "vision") {
    std::ostringstream out;
    out << "Observed in " << prompt.media.size() << " image(s): ";
    auto defects = detect(words, true);
    auto locations = detect(words, false);
    if (defects.empty()) {
      out << "no distinct defect visible";
    } else {
      for (std::size_t i = 0; i < defects.size(); ++i) {
        if (i) out << "; ";
        out << defects[i] << " on the "
            << (locations.empty() ? std::string("component") : locations[i % locations.size()]);
      }
    }
    out << '.';
    return out.str();
  }

  if (prompt.task == "expand") {
    std::ostringstream out;
    const std::string scenario = meta("scenario").empty() ? prompt.user : meta("scenario");
    out << "A photorealistic close-up image: " << strip_period(scenario) << '.';
    for (const auto& injection : prompt.injected_context) out << ' ' << strip_period(injection) << '.';
    out << " Natural daylight, high detail, realistic metal texture.";
    return out.str();
  }

  if (prompt.task == "judge") return "Score: " + std::to_string(6 + h % 4) + "/10";

  return findings_report("Assessment:", words, h);
}

RawCompletion MockBackend::complete(const ComposedPrompt& prompt, const SamplingParams& params,
                                    const std::string& model_id) {
  params.validate();
  before_call(prompt.task);
  RawCompletion out;
  out.text = reply_for(prompt);
  out.model_id = model_id.empty() ? "mock" : model_id;
  std::int64_t prompt_tokens = 0;
  for (const auto& m : prompt.messages()) prompt_tokens += dtwin::count_tokens(m.content);
  out.prompt_tokens = prompt_tokens;
  out.completion_tokens = dtwin::count_tokens(out.text);
  return out;
}

GeneratedImage MockBackend::generate_image(const std::string& prompt, const std::string& model_id) {
  before_call("text_to_image");
  const std::uint64_t h = text::splitmix64(config_.seed ^ text::fnv1a64(prompt));
  std::ostringstream name;
  name << "tti-" << std::hex << h << ".png";
  GeneratedImage img;
  if (config_.media_dir.empty()) {
    img.locator = "mock://image/" + name.str();
  } else {
    std::filesystem::create_directories(config_.media_dir);
    auto path = std::filesystem::path(config_.media_dir) / name.str();
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(kTinyPng.data()), kTinyPng.size());
    if (!out) fail(ErrorCode::io, "cannot write generated image " + path.string());
    img.locator = path.string();
  }
  img.metadata = {{"model_id", model_id}, {"prompt", prompt}, {"width", 1}, {"height", 1}};
  return img;
}

std::vector<double> MockBackend::embed(const std::string& input, const std::string&) {
  before_call("embed");
  return hashing_embedding(input, config_.seed, config_.embed_dim);
}

FinetuneJob MockBackend::submit_finetune(const std::string& base_model_id,
                                         const std::string& dataset_ref,
                                         const SamplingParams& params) {
  before_call("finetune");
  std::lock_guard lock(mu_);
  FinetuneJob job;
  job.job_id = "ftjob-" + std::to_string(job_order_.size() + 1);
  job.base_model_id = base_model_id;
  job.dataset_ref = dataset_ref;
  job.params = params;
  job.status = JobStatus::queued;
  jobs_[job.job_id] = job;
  polls_[job.job_id] = 0;
  job_order_.push_back(job.job_id);
  return job;
}

FinetuneJob MockBackend::poll_finetune(const std::string& job_id) {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) fail(ErrorCode::not_found, "unknown fine-tune job " + job_id);
  FinetuneJob& job = it->second;
  if (job.terminal()) return job;
  if (++polls_[job_id] < config_.finetune_polls_to_finish) {
    job.status = JobStatus::running;
    return job;
  }
  if (config_.fail_finetune) {
    job.status = JobStatus::failed;
    job.error = "mock configured to fail fine-tuning";
  } else {
    job.status = JobStatus::succeeded;
    job.result_model_id = next_finetune_id(job.base_model_id);
  }
  return job;
}

}  // namespace dtwin
