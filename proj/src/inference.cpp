#include "dtwin/inference.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dtwin/error.hpp"
#include "dtwin/text.hpp"

namespace dtwin {

namespace {

constexpr std::array<unsigned char, 70> kPlaceholderPng = {
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48,
    0x44, 0x52, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00,
    0x00, 0x1f, 0x15, 0xc4, 0x89, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x44, 0x41, 0x54, 0x78,
    0xda, 0x63, 0x64, 0x60, 0xf8, 0x5f, 0x0f, 0x00, 0x02, 0x87, 0x01, 0x80, 0xeb, 0x47,
    0xba, 0x92, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82};

std::string format_seconds(double t) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3) << t;
  return out.str();
}

std::string substitute(std::string cmd, const std::string& key, const std::string& value) {
  const std::string token = "{" + key + "}";
  const std::string quoted = "'" + value + "'";
  for (auto pos = cmd.find(token); pos != std::string::npos; pos = cmd.find(token, pos + quoted.size())) {
    cmd.replace(pos, token.size(), quoted);
  }
  return cmd;
}

std::string run_capture(const std::string& cmd) {
  std::string out;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) fail(ErrorCode::io, "cannot run command: " + cmd);
  std::array<char, 256> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) out += buf.data();
  const int status = ::pclose(pipe);
  if (status != 0) fail(ErrorCode::validation, "command failed (" + std::to_string(status) + "): " + cmd);
  return out;
}

std::string frame_name(const std::string& video, double t) {
  std::ostringstream name;
  name << std::filesystem::path(video).stem().string() << "-t" << std::setw(8) << std::setfill('0')
       << static_cast<long long>(std::llround(t * 1000)) << "ms.png";
  return name.str();
}

std::string strip_findings_block(const std::string& text) {
  auto start = text.find("```findings");
  if (start == std::string::npos) return text::trim(text);
  auto end = text.find("```", start + 11);
  std::string out = text.substr(0, start);
  if (end != std::string::npos) out += text.substr(end + 3);
  return text::trim(out);
}

std::vector<std::string> split_cells(const std::string& row) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    auto bar = row.find('|', start);
    cells.push_back(text::trim(row.substr(start, bar == std::string::npos ? std::string::npos : bar - start)));
    if (bar == std::string::npos) break;
    start = bar + 1;
  }
  return cells;
}

}  // namespace

std::string_view to_string(Intent intent) {
  return intent == Intent::generate ? "generate" : "analyze";
}

Intent intent_from_string(std::string_view s) {
  if (s == "analyze") return Intent::analyze;
  if (s == "generate") return Intent::generate;
  fail(ErrorCode::validation, "intent must be analyze or generate, got '" + std::string(s) + "'");
}

std::string_view to_string(StepKind kind) {
  switch (kind) {
    case StepKind::sample_frames: return "sample_frames";
    case StepKind::vision_chat: return "vision_chat";
    case StepKind::chat: return "chat";
    case StepKind::chat_expand: return "chat_expand";
    case StepKind::text_to_image: return "text_to_image";
  }
  return "chat";
}

std::string_view to_string(ExpectedOutput out) {
  switch (out) {
    case ExpectedOutput::report: return "report";
    case ExpectedOutput::image: return "image";
    case ExpectedOutput::texture: return "texture";
  }
  return "report";
}

void MultimodalInput::validate() const {
  const bool has_text = text && !text::trim(*text).empty();
  require(has_text || !images.empty() || video, "input needs text, images or a video");
  require(!(video && !images.empty()), "video and images are mutually exclusive");
  if (video) require(!text::trim(*video).empty(), "video locator must be non-empty");
  for (const auto& img : images) require(!text::trim(img).empty(), "image locator must be non-empty");
  if (intent == Intent::generate) {
    require(has_text, "generate intent needs a text prompt");
    require(!video, "generate intent does not accept video");
  }
}

ModelPlan route(const MultimodalInput& input) {
  input.validate();
  ModelPlan plan;
  if (input.intent == Intent::generate) {
    plan.steps = {{StepKind::chat_expand, input.images.empty() ? "text" : "text+images"},
                  {StepKind::text_to_image, "prior"}};
    const auto words = text::word_set(*input.text);
    plan.expected_output = (words.count("texture") || words.count("textures"))
                               ? ExpectedOutput::texture
                               : ExpectedOutput::image;
    return plan;
  }
  if (input.video) {
    plan.steps = {{StepKind::sample_frames, "video"},
                  {StepKind::vision_chat, "frames"},
                  {StepKind::chat, input.text ? "prior+text" : "prior"}};
  } else if (!input.images.empty()) {
    plan.steps = {{StepKind::vision_chat, input.text ? "text+images" : "images"}};
  } else {
    plan.steps = {{StepKind::chat, "text"}};
  }
  return plan;
}

CommandFrameExtractor::CommandFrameExtractor(std::string probe_command,
                                             std::string extract_command, std::string frame_dir)
    : probe_command_(std::move(probe_command)),
      extract_command_(std::move(extract_command)),
      frame_dir_(std::move(frame_dir)) {}

double CommandFrameExtractor::duration_seconds(const std::string& video) {
  const auto out = text::trim(run_capture(substitute(probe_command_, "video", video)));
  try {
    std::size_t used = 0;
    const double d = std::stod(out, &used);
    require(used > 0 && d >= 0, "bad duration");
    return d;
  } catch (const std::exception&) {
    fail(ErrorCode::validation, "probe command did not print a duration for " + video);
  }
}

std::vector<std::string> CommandFrameExtractor::extract(const std::string& video,
                                                        const std::vector<double>& timestamps) {
  std::filesystem::create_directories(frame_dir_);
  std::vector<std::string> frames;
  for (double t : timestamps) {
    const auto out = (std::filesystem::path(frame_dir_) / frame_name(video, t)).string();
    auto cmd = substitute(extract_command_, "video", video);
    cmd = substitute(cmd, "t", format_seconds(t));
    cmd = substitute(cmd, "out", out);
    run_capture(cmd);
    if (!std::filesystem::exists(out)) fail(ErrorCode::validation, "frame command produced no file: " + out);
    frames.push_back(out);
  }
  return frames;
}

ManifestFrameExtractor::ManifestFrameExtractor(std::string frame_dir)
    : frame_dir_(std::move(frame_dir)) {}

double ManifestFrameExtractor::duration_seconds(const std::string& video) {
  std::ifstream in(video);
  if (!in) fail(ErrorCode::validation, "video is not readable: " + video);
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("duration_s") ||
      !j.at("duration_s").is_number() || j.at("duration_s").get<double>() < 0) {
    fail(ErrorCode::validation, "video manifest lacks a non-negative duration_s: " + video);
  }
  return j.at("duration_s").get<double>();
}

std::vector<std::string> ManifestFrameExtractor::extract(const std::string& video,
                                                         const std::vector<double>& timestamps) {
  std::filesystem::create_directories(frame_dir_);
  std::vector<std::string> frames;
  for (double t : timestamps) {
    const auto path = (std::filesystem::path(frame_dir_) / frame_name(video, t)).string();
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(kPlaceholderPng.data()), kPlaceholderPng.size());
    if (!out) fail(ErrorCode::io, "cannot write frame " + path);
    frames.push_back(path);
  }
  return frames;
}

std::vector<double> frame_timestamps(double duration_seconds, double fps) {
  require(fps > 0 && std::isfinite(fps), "fps must be positive");
  require(duration_seconds >= 0 && std::isfinite(duration_seconds), "duration must be non-negative");
  // The epsilon absorbs representation error in products like 0.1 * 30.
  const auto count = std::max<long long>(1, static_cast<long long>(std::floor(duration_seconds * fps + 1e-9)));
  std::vector<double> ts(static_cast<std::size_t>(count));
  for (long long i = 0; i < count; ++i) ts[static_cast<std::size_t>(i)] = static_cast<double>(i) / fps;
  return ts;
}

std::vector<std::string> sample_frames(const std::string& video, double fps,
                                       FrameExtractor& extractor) {
  require(fps > 0 && std::isfinite(fps), "fps must be positive");
  return extractor.extract(video, frame_timestamps(extractor.duration_seconds(video), fps));
}

StepUsage& StepUsage::operator+=(const Completion& c) {
  prompt_tokens += c.prompt_tokens;
  completion_tokens += c.completion_tokens;
  latency_ms += c.latency_ms;
  ++calls;
  return *this;
}

StepUsage& StepUsage::operator+=(const StepUsage& u) {
  prompt_tokens += u.prompt_tokens;
  completion_tokens += u.completion_tokens;
  latency_ms += u.latency_ms;
  calls += u.calls;
  return *this;
}

RawResult infer(const MultimodalInput& input, const ModelPlan& plan, const BackendSet& backends,
                const InferenceOptions& options, FrameExtractor* extractor) {
  input.validate();
  require(!plan.steps.empty(), "plan has no steps");
  require(options.frames_per_batch >= 1, "frames_per_batch must be >= 1");

  const SystemMessage sm = SystemMessage::make(options.system_message);
  const std::string user_text = input.text ? text::trim(*input.text) : std::string();
  const auto injections = match_vpi(user_text, options.vpi_rules);

  RawResult raw;
  std::string prior;
  std::vector<std::string> frames;
  std::vector<double> timestamps;

  for (std::size_t idx = 0; idx < plan.steps.size(); ++idx) {
    const PlanStep& step = plan.steps[idx];
    StepResult sr;
    sr.kind = step.kind;
    try {
      switch (step.kind) {
        case StepKind::sample_frames: {
          require(extractor != nullptr, "video input requires a frame extractor");
          const auto start = std::chrono::steady_clock::now();
          timestamps = frame_timestamps(extractor->duration_seconds(*input.video), options.fps);
          frames = extractor->extract(*input.video, timestamps);
          sr.usage.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                    std::chrono::steady_clock::now() - start)
                                    .count();
          sr.outputs = frames;
          raw.frames = frames.size();
          break;
        }
        case StepKind::vision_chat: {
          if (frames.empty()) {
            auto p = compose(sm, user_text.empty() ? "Describe the visible railway defects." : user_text,
                             injections, input.images);
            p.user += "\n\n" + std::string(kFindingsInstruction);
            p.task = "analyze";
            auto c = chat(p, options.params, backends, ModelRole::vision);
            sr.usage += c;
            sr.text = c.text;
            break;
          }
          const std::size_t batch = options.frames_per_batch;
          const std::size_t batches = (frames.size() + batch - 1) / batch;
          std::vector<std::optional<Completion>> outs(batches);
          std::vector<std::optional<Error>> errors(batches);
          const auto n = static_cast<std::ptrdiff_t>(batches);
#pragma omp parallel for schedule(dynamic, 1) if (options.parallel_frames)
          for (std::ptrdiff_t b = 0; b < n; ++b) {
            const std::size_t lo = static_cast<std::size_t>(b) * batch;
            const std::size_t hi = std::min(frames.size(), lo + batch);
            std::vector<std::string> media(frames.begin() + lo, frames.begin() + hi);
            std::ostringstream ask;
            ask << "Describe any visible railway defects in these video frames (t =";
            for (std::size_t f = lo; f < hi; ++f) ask << ' ' << format_seconds(timestamps[f]) << 's';
            ask << ").";
            try {
              auto p = compose(sm, ask.str(), {}, std::move(media));
              p.task = "vision";
              outs[b] = chat(p, options.params, backends, ModelRole::vision);
            } catch (const Error& e) {
              errors[b] = e;
            } catch (const std::exception& e) {
              errors[b] = Error(ErrorCode::internal, e.what());
            }
          }
          for (const auto& e : errors)
            if (e) throw *e;
          std::ostringstream joined;
          for (std::size_t b = 0; b < batches; ++b) {
            sr.usage += *outs[b];
            joined << "[t=" << format_seconds(timestamps[b * batch]) << "s] " << outs[b]->text << '\n';
          }
          sr.text = joined.str();
          break;
        }
        case StepKind::chat: {
          std::string ask = user_text.empty() ? "Summarize the railway defect inspection." : user_text;
          if (!prior.empty()) {
            ask = "User request: " + ask + "\nFrame observations:\n" + prior;
          }
          auto p = compose(sm, ask + "\n\n" + std::string(kFindingsInstruction), injections, {});
          p.task = prior.empty() ? "analyze" : "synthesis";
          auto c = chat(p, options.params, backends, ModelRole::chat);
          sr.usage += c;
          sr.text = c.text;
          break;
        }
        case StepKind::chat_expand: {
          auto p = compose(sm,
                           "Expand this defect scenario into a detailed, realistic text-to-image "
                           "prompt: " + user_text,
                           injections, input.images);
          p.task = "expand";
          p.meta["scenario"] = user_text;
          auto c = chat(p, options.params, backends, ModelRole::chat);
          sr.usage += c;
          sr.text = c.text;
          break;
        }
        case StepKind::text_to_image: {
          const std::string prompt = prior.empty() ? user_text : prior;
          const auto start = std::chrono::steady_clock::now();
          GeneratedImage img = generate_image(prompt, backends);
          sr.usage.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                    std::chrono::steady_clock::now() - start)
                                    .count();
          sr.usage.calls = 1;
          sr.outputs.push_back(img.locator);
          sr.media.push_back(std::move(img));
          sr.text = prompt;
          break;
        }
      }
      sr.ok = true;
    } catch (const Error& e) {
      if (e.retryable() || e.code() == ErrorCode::validation) throw;
      sr.ok = false;
      sr.error = std::string(to_string(e.code())) + ": " + e.what();
    }
    raw.usage += sr.usage;
    const bool ok = sr.ok;
    if (ok && step.kind != StepKind::sample_frames && step.kind != StepKind::text_to_image) {
      prior = sr.text;
    }
    raw.steps.push_back(std::move(sr));
    if (!ok) {
      raw.failed_step = idx;
      break;
    }
  }
  return raw;
}

FindingsParse parse_findings(const std::string& input) {
  FindingsParse out;
  std::istringstream in(input);
  std::string line;
  bool inside = false;
  bool first_row = true;
  std::vector<Finding> rows;
  auto malformed = [&](const std::string& why) {
    out.findings.clear();
    out.warning = "malformed findings block: " + why;
    return out;
  };
  while (std::getline(in, line)) {
    const auto t = text::trim(line);
    if (!inside) {
      if (t == "```findings") {
        inside = true;
        out.block_found = true;
      }
      continue;
    }
    if (t == "```") {
      out.findings = std::move(rows);
      return out;
    }
    if (t.empty()) continue;
    auto cells = split_cells(t);
    if (cells.size() != 3) return malformed("row has " + std::to_string(cells.size()) + " cells: " + t);
    if (first_row && text::to_lower(cells[0]) == "defect_type" && text::to_lower(cells[1]) == "location" &&
        text::to_lower(cells[2]) == "severity") {
      first_row = false;
      continue;
    }
    first_row = false;
    for (const auto& c : cells)
      if (c.empty()) return malformed("empty cell in row: " + t);
    rows.push_back({cells[0], cells[1], cells[2]});
  }
  if (inside) return malformed("block is not closed");
  return out;
}

std::string render_findings_block(const std::vector<Finding>& findings) {
  std::string out = "```findings\ndefect_type | location | severity\n";
  for (const auto& f : findings) {
    out += f.defect_type + " | " + f.location_phrase + " | " + f.severity_phrase + "\n";
  }
  out += "```";
  return out;
}

ConsumableResponse process(const RawResult& raw, const MultimodalInput& input,
                           const ModelPlan& plan) {
  std::size_t successes = 0;
  for (const auto& s : raw.steps) successes += s.ok ? 1 : 0;
  if (successes == 0) fail(ErrorCode::processing, "no plan step succeeded");

  ConsumableResponse resp;
  resp.usage = raw.usage;

  std::string final_text;
  for (const auto& s : raw.steps) {
    if (s.ok && (s.kind == StepKind::chat || s.kind == StepKind::vision_chat ||
                 s.kind == StepKind::chat_expand)) {
      final_text = s.text;
    }
  }

  const bool generation = plan.expected_output != ExpectedOutput::report;
  if (!generation) {
    auto parsed = parse_findings(final_text);
    resp.findings = std::move(parsed.findings);
    if (parsed.warning) resp.warnings.push_back(*parsed.warning);
  }

  const std::string kind = plan.expected_output == ExpectedOutput::texture ? "texture" : "image";
  for (const auto& s : raw.steps) {
    if (!s.ok) continue;
    for (const auto& img : s.media) {
      MediaItem item;
      item.locator = img.locator;
      item.kind = kind;
      std::string subject = input.text ? text::trim(*input.text) : std::string("defect");
      item.caption = "Generated " + kind + ": " + subject;
      if (plan.expected_output == ExpectedOutput::texture && std::filesystem::exists(img.locator)) {
        const std::string sidecar = img.locator + ".json";
        nlohmann::json meta = img.metadata;
        meta["kind"] = "texture";
        meta["source_text"] = subject;
        meta["mime"] = img.mime;
        std::ofstream out(sidecar, std::ios::trunc);
        out << meta.dump(2) << '\n';
        if (out) {
          item.metadata_sidecar = sidecar;
        } else {
          resp.warnings.push_back("cannot write texture metadata sidecar " + sidecar);
        }
      }
      resp.media.push_back(std::move(item));
    }
  }

  std::ostringstream md;
  md << "# Defect inspection report\n\n";
  if (input.text) md << "**Request:** " << text::trim(*input.text) << "\n\n";
  if (input.video) md << "**Video:** " << *input.video << " (" << raw.frames << " frames)\n\n";
  if (!input.images.empty()) md << "**Images:** " << input.images.size() << "\n\n";
  md << "## Summary\n\n"
     << (final_text.empty() ? std::string("_No text output._") : strip_findings_block(final_text))
     << "\n\n";
  if (!generation) {
    md << "## Findings\n\n";
    if (resp.findings.empty()) {
      md << "_No structured findings were returned._\n\n";
    } else {
      md << "| Defect type | Location | Severity |\n|---|---|---|\n";
      for (const auto& f : resp.findings) {
        md << "| " << f.defect_type << " | " << f.location_phrase << " | " << f.severity_phrase << " |\n";
      }
      md << '\n';
    }
  }
  if (!resp.media.empty()) {
    md << "## Media\n\n";
    for (const auto& m : resp.media) {
      md << "- ![" << m.caption << "](" << m.locator << ")";
      if (m.metadata_sidecar) md << " ([metadata](" << *m.metadata_sidecar << "))";
      md << '\n';
    }
    md << '\n';
  }
  if (raw.failed_step) {
    const auto& failed = raw.steps[*raw.failed_step];
    md << "## Incomplete\n\nStep " << *raw.failed_step + 1 << " (" << to_string(failed.kind)
       << ") failed: " << failed.error << "\n\n";
    resp.warnings.push_back("plan stopped at step " + std::to_string(*raw.failed_step + 1) + ": " +
                            failed.error);
  }
  md << "## Usage\n\n- Model calls: " << resp.usage.calls << "\n- Tokens: " << resp.usage.tokens()
     << " (prompt " << resp.usage.prompt_tokens << ", completion " << resp.usage.completion_tokens
     << ")\n- Latency: " << resp.usage.latency_ms << " ms\n";
  resp.report_markdown = md.str();
  return resp;
}

void to_json(nlohmann::json& j, const MultimodalInput& in) {
  j = {{"intent", to_string(in.intent)}, {"images", in.images}};
  j["text"] = in.text ? nlohmann::json(*in.text) : nullptr;
  j["video"] = in.video ? nlohmann::json(*in.video) : nullptr;
}

void from_json(const nlohmann::json& j, MultimodalInput& in) {
  require(j.is_object(), "inference request must be a JSON object");
  if (j.contains("text") && !j.at("text").is_null()) {
    require(j.at("text").is_string(), "text must be a string");
    in.text = j.at("text").get<std::string>();
  }
  for (const char* key : {"images", "image_refs"}) {
    if (j.contains(key) && !j.at(key).is_null()) {
      require(j.at(key).is_array(), std::string(key) + " must be an array");
      for (const auto& x : j.at(key)) {
        require(x.is_string(), "image locators must be strings");
        in.images.push_back(x.get<std::string>());
      }
    }
  }
  for (const char* key : {"video", "video_ref"}) {
    if (j.contains(key) && !j.at(key).is_null()) {
      require(j.at(key).is_string(), std::string(key) + " must be a string");
      in.video = j.at(key).get<std::string>();
    }
  }
  if (j.contains("intent")) in.intent = intent_from_string(j.at("intent").get<std::string>());
}

void to_json(nlohmann::json& j, const ModelPlan& plan) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : plan.steps) steps.push_back({{"role", to_string(s.kind)}, {"input", s.input_slice}});
  j = {{"steps", steps}, {"expected_output", to_string(plan.expected_output)}};
}

void to_json(nlohmann::json& j, const StepUsage& u) {
  j = {{"prompt_tokens", u.prompt_tokens},
       {"completion_tokens", u.completion_tokens},
       {"tokens", u.tokens()},
       {"latency_ms", u.latency_ms},
       {"calls", u.calls}};
}

void to_json(nlohmann::json& j, const Finding& f) {
  j = {{"defect_type", f.defect_type},
       {"location_phrase", f.location_phrase},
       {"severity_phrase", f.severity_phrase}};
}

void to_json(nlohmann::json& j, const ConsumableResponse& r) {
  nlohmann::json media = nlohmann::json::array();
  for (const auto& m : r.media) {
    nlohmann::json item = {{"locator", m.locator}, {"kind", m.kind}, {"caption", m.caption}};
    item["metadata_sidecar"] = m.metadata_sidecar ? nlohmann::json(*m.metadata_sidecar) : nullptr;
    media.push_back(std::move(item));
  }
  j = {{"report_markdown", r.report_markdown},
       {"findings", r.findings},
       {"media", media},
       {"usage", r.usage},
       {"warnings", r.warnings}};
}

}  // namespace dtwin
