#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dtwin/config.hpp"
#include "dtwin/dataset_gen.hpp"
#include "dtwin/error.hpp"
#include "dtwin/evalsuite.hpp"
#include "dtwin/gateway.hpp"
#include "dtwin/inference.hpp"
#include "dtwin/instauf.hpp"
#include "dtwin/store.hpp"
#include "dtwin/text.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::string config_path;
  std::string data_dir;
  std::string backend;
  bool quiet = false;
};

dtwin::EngineConfig load(const Globals& g) {
  auto cfg = dtwin::load_config(g.config_path.empty() ? std::nullopt
                                                      : std::optional<std::string>(g.config_path));
  if (!g.data_dir.empty()) cfg.data_dir = g.data_dir;
  if (!g.backend.empty()) cfg.backend = g.backend;
  if (cfg.backend == "mock" && cfg.mock.media_dir.empty()) {
    cfg.mock.media_dir = (fs::path(cfg.data_dir) / "media").string();
  }
  return cfg;
}

void write_file(const std::string& path, const std::string& body) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::trunc);
  out << body;
  if (!out) dtwin::fail(dtwin::ErrorCode::io, "cannot write " + path);
}

void emit(const json& j, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    write_file(out_path, j.dump(2) + "\n");
  }
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = dtwin::text::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---- dataset -------------------------------------------------------------

struct DatasetGenerateArgs {
  std::string captions;
  int k = 5;
  std::string out;
  std::optional<double> threshold;
  std::optional<double> lambda;
  std::optional<int> max_attempts;
  std::string system_message = std::string(dtwin::kDefaultSystemMessage);
};

int dataset_generate(const Globals& g, const DatasetGenerateArgs& a) {
  auto cfg = load(g);
  auto policy = cfg.generation;
  policy.k_max = a.k;
  if (a.threshold) policy.similarity_threshold = *a.threshold;
  if (a.lambda) policy.lambda = *a.lambda;
  policy.max_attempts = a.max_attempts.value_or(std::max(policy.max_attempts, a.k * 4));
  policy.validate();

  const auto captions = dtwin::read_captions(a.captions);
  dtwin::Store store(cfg.data_dir);
  auto run = store.start_run(dtwin::RunKind::dataset_gen,
                             {{"captions", a.captions}, {"policy", policy}, {"out", a.out}});
  try {
    const auto backends = cfg.make_backends();
    const auto compiled = dtwin::compile_dataset(captions, policy, a.system_message, backends);
    fs::create_directories(a.out);
    const auto dataset_path = (fs::path(a.out) / "dataset.jsonl").string();
    const auto objectives_path = (fs::path(a.out) / "objectives.json").string();
    dtwin::write_dataset_jsonl(dataset_path, compiled.entries);
    write_file(objectives_path, dtwin::objective_report_json(compiled.objectives).dump(2) + "\n");

    json failures = json::array();
    for (const auto& f : compiled.failures) {
      failures.push_back({{"caption_id", f.caption_id}, {"code", f.code}, {"message", f.message}});
    }
    json summary = {{"run_id", run.run_id},
                    {"captions", captions.size()},
                    {"entries", compiled.entries.size()},
                    {"duplicates_removed", compiled.duplicates_removed},
                    {"dataset", dataset_path},
                    {"objectives", objectives_path},
                    {"warnings", compiled.warnings},
                    {"failures", failures}};
    store.finish_run(run.run_id,
                     compiled.entries.empty() ? dtwin::RunStatus::failed : dtwin::RunStatus::succeeded,
                     {dataset_path, objectives_path}, summary);
    for (const auto& w : compiled.warnings) std::cerr << "dt: warning: " << w << '\n';
    std::cout << summary.dump(2) << '\n';
    return compiled.entries.empty() ? 1 : 0;
  } catch (const dtwin::Error& e) {
    store.finish_run(run.run_id, dtwin::RunStatus::failed, {}, {{"error", e.what()}});
    throw;
  }
}

struct DatasetCaptionArgs {
  std::vector<std::string> images;
  std::string template_id = "defect-v1";
  std::string out;
};

int dataset_caption(const Globals& g, const DatasetCaptionArgs& a) {
  auto cfg = load(g);
  const auto backends = cfg.make_backends();
  dtwin::TemplateRegistry templates;
  std::ostringstream lines;
  int failures = 0;
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    try {
      auto rec = dtwin::caption_image(a.images[i], a.template_id, templates, backends,
                                      "c" + std::to_string(i + 1));
      lines << json(rec).dump() << '\n';
    } catch (const dtwin::Error& e) {
      if (e.code() == dtwin::ErrorCode::template_not_found) throw;
      ++failures;
      std::cerr << "dt: caption failed for " << a.images[i] << ": " << e.what() << '\n';
    }
  }
  if (a.out.empty()) {
    std::cout << lines.str();
  } else {
    write_file(a.out, lines.str());
  }
  return failures == 0 ? 0 : 1;
}

// ---- infer ---------------------------------------------------------------

struct InferArgs {
  std::string text;
  std::vector<std::string> images;
  std::string video;
  std::string intent = "analyze";
  bool json_out = false;
};

int infer_cmd(const Globals& g, const InferArgs& a) {
  dtwin::Service service(load(g));
  json req = {{"intent", a.intent}, {"images", a.images}};
  if (!a.text.empty()) req["text"] = a.text;
  if (!a.video.empty()) req["video"] = a.video;
  const auto resp = service.handle_infer(req);
  if (a.json_out) {
    std::cout << resp.dump(2) << '\n';
  } else {
    std::cout << resp.at("report_markdown").get<std::string>();
    for (const auto& w : resp.at("warnings")) std::cerr << "dt: warning: " << w.get<std::string>() << '\n';
  }
  return resp.at("complete").get<bool>() ? 0 : 1;
}

// ---- loop ----------------------------------------------------------------

struct LoopArgs {
  std::string feedback_file;
  std::optional<int> alpha;
  std::optional<double> beta;
  std::optional<double> ema_alpha;
  std::optional<int> max_iterations;
  bool literal_ge = false;
  std::string report;
};

int loop_run(const Globals& g, const LoopArgs& a) {
  auto cfg = load(g);
  if (a.alpha) cfg.loop.ft_interval = *a.alpha;
  if (a.beta) cfg.loop.satisfaction_threshold = *a.beta;
  if (a.ema_alpha) cfg.loop.ema_alpha = *a.ema_alpha;
  if (a.max_iterations) cfg.loop.max_iterations = *a.max_iterations;
  if (a.literal_ge) cfg.loop.literal_ge_trigger = true;
  cfg.loop.validate();

  const auto feedbacks = dtwin::read_feedback_jsonl(a.feedback_file);
  dtwin::Service service(cfg);
  auto run = service.store().start_run(dtwin::RunKind::loop,
                                       {{"feedback_file", a.feedback_file}, {"loop", cfg.loop}});
  int applied = 0;
  for (const auto& f : feedbacks) {
    if (cfg.loop.max_iterations && service.state()->iteration >= *cfg.loop.max_iterations) break;
    json req = f;
    req.erase("kind");
    try {
      const auto r = service.handle_feedback(req);
      if (!g.quiet) {
        std::cerr << "dt: step " << r.at("iteration") << ": " << r.at("action").get<std::string>()
                  << ", satisfaction " << r.at("satisfaction") << '\n';
      }
    } catch (const dtwin::ApiException& e) {
      std::cerr << "dt: warning: " << e.what() << '\n';
    }
    ++applied;
  }
  const json report = service.loop_report();
  emit(report, a.report);
  std::vector<std::string> artifacts;
  if (!a.report.empty()) artifacts.push_back(a.report);
  if (auto snap = service.store().latest_snapshot()) artifacts.push_back(*snap);
  service.store().finish_run(run.run_id, dtwin::RunStatus::succeeded, artifacts,
                             {{"applied", applied}, {"ft_count", report.at("ft_count")}});
  return 0;
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string in;
  std::string classes;
  std::vector<std::string> baselines;
  bool json_out = false;
  std::string out;
  std::string csv;
  std::string rubric = "Rate how useful the response is for railway defect inspection.";
};

int eval_classify(const Globals&, const EvalArgs& a) {
  const auto input = dtwin::read_predictions_jsonl(a.in, split_csv(a.classes));
  auto report = dtwin::classification_metrics(input.records, input.class_names.size());
  report.class_names = input.class_names;
  std::vector<dtwin::BaselineRow> rows;
  for (const auto& b : a.baselines) {
    auto row = dtwin::builtin_baseline(b);
    if (!row) dtwin::fail(dtwin::ErrorCode::validation, "unknown baseline '" + b + "'");
    rows.push_back(*row);
  }
  json j = report;
  if (!a.out.empty()) emit(j, a.out);
  if (a.json_out) {
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << dtwin::metrics_table(report, rows);
  }
  for (const auto& w : report.warnings) std::cerr << "dt: warning: " << w << '\n';
  return 0;
}

int eval_rouge(const Globals&, const EvalArgs& a) {
  const auto rows = dtwin::read_rouge_jsonl(a.in);
  json out_rows = json::array();
  double sp = 0, sr = 0, sf = 0;
  for (const auto& r : rows) {
    const auto res = dtwin::rouge_l(std::string_view(r.candidate), std::string_view(r.reference));
    sp += res.precision;
    sr += res.recall;
    sf += res.f_measure;
    out_rows.push_back(res);
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  json j = {{"rows", out_rows},
            {"mean", {{"precision", sp / n}, {"recall", sr / n}, {"f_measure", sf / n}}},
            {"count", rows.size()}};
  emit(j, a.out);
  if (!a.out.empty()) std::cout << j.at("mean").dump() << '\n';
  return 0;
}

int eval_relevance(const Globals& g, const EvalArgs& a) {
  auto cfg = load(g);
  const auto backends = cfg.make_backends();
  const auto rows = dtwin::read_relevance_jsonl(a.in);
  json out_rows = json::array();
  double sa = 0, sc = 0, sf = 0;
  std::size_t with_ref = 0;
  for (const auto& r : rows) {
    const auto rel = dtwin::relevance(r.question, r.answer, r.contexts, backends);
    json row = rel;
    sa += rel.answer_relevance;
    sc += rel.context_relevance;
    if (r.reference) {
      const auto rouge = dtwin::rouge_l(std::string_view(r.answer), std::string_view(*r.reference));
      row["rouge_l"] = rouge.f_measure;
      sf += rouge.f_measure;
      ++with_ref;
    }
    out_rows.push_back(std::move(row));
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  json mean = {{"answer_relevance", sa / n}, {"context_relevance", sc / n}};
  if (with_ref) mean["rouge_l"] = sf / static_cast<double>(with_ref);
  json j = {{"rows", out_rows}, {"mean", mean}, {"count", rows.size()}};
  emit(j, a.out);
  if (!a.out.empty()) std::cout << mean.dump() << '\n';
  return 0;
}

int eval_usefulness(const Globals& g, const EvalArgs& a) {
  auto cfg = load(g);
  const auto backends = cfg.make_backends();
  std::ifstream in(a.in);
  if (!in) dtwin::fail(dtwin::ErrorCode::io, "cannot read " + a.in);
  json scores = json::array();
  std::string line;
  double sum = 0;
  while (std::getline(in, line)) {
    if (dtwin::text::trim(line).empty()) continue;
    auto row = json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.is_object() || !row.contains("response")) {
      dtwin::fail(dtwin::ErrorCode::validation, "usefulness rows need a response field");
    }
    const int s = dtwin::usefulness(row.at("response").get<std::string>(),
                                    row.value("rubric", a.rubric), backends);
    scores.push_back(s);
    sum += s;
  }
  json j = {{"scores", scores},
            {"mean", scores.empty() ? 0.0 : sum / static_cast<double>(scores.size())}};
  emit(j, a.out);
  return 0;
}

int eval_latency(const Globals&, const EvalArgs& a) {
  const auto records = dtwin::read_latency_jsonl(a.in);
  const auto groups = dtwin::latency_report(records);
  emit(json(groups), a.out);
  if (!a.csv.empty()) write_file(a.csv, dtwin::latency_csv(groups));
  return 0;
}

// ---- serve ---------------------------------------------------------------

int serve_cmd(const Globals& g, std::optional<int> port, const std::string& static_dir) {
  auto cfg = load(g);
  if (port) cfg.port = *port;
  if (!static_dir.empty()) cfg.static_dir = static_dir;
  dtwin::Service service(cfg);
  dtwin::serve(service, cfg.port, cfg.static_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dt: railway defect twin engine"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Engine config JSON")->check(CLI::ExistingFile);
  app.add_option("--data-dir", g.data_dir, "Data directory (default $DATA_DIR or ./data)");
  app.add_option("--backend", g.backend, "mock | http")->check(CLI::IsMember({"mock", "http"}));
  app.add_flag("-q,--quiet", g.quiet, "Less progress output");

  auto* dataset = app.add_subcommand("dataset", "Synthetic dataset generation");
  dataset->require_subcommand(1);
  DatasetGenerateArgs gen;
  auto* generate = dataset->add_subcommand("generate", "Rephrase captions into a training dataset");
  generate->add_option("--captions", gen.captions, "Captions JSONL or text file")
      ->required()
      ->check(CLI::ExistingFile);
  generate->add_option("--k", gen.k, "Samples per caption")->check(CLI::PositiveNumber);
  generate->add_option("--out", gen.out, "Output directory")->required();
  generate->add_option("--threshold", gen.threshold, "3-gram Jaccard similarity threshold");
  generate->add_option("--lambda", gen.lambda, "Reconstruction loss weight");
  generate->add_option("--max-attempts", gen.max_attempts, "Attempts per caption");
  generate->add_option("--system-message", gen.system_message,
                       "System message template ({caption}, {caption_id})");
  DatasetCaptionArgs cap;
  auto* caption = dataset->add_subcommand("caption", "Caption images with a template");
  caption->add_option("--image", cap.images, "Image file")->required();
  caption->add_option("--template", cap.template_id, "Caption template id");
  caption->add_option("--out", cap.out, "Captions JSONL output");

  InferArgs inf;
  auto* infer = app.add_subcommand("infer", "Run one multimodal inference");
  infer->add_option("--text", inf.text, "Prompt text");
  infer->add_option("--image", inf.images, "Image file (repeatable)");
  infer->add_option("--video", inf.video, "Video file");
  infer->add_option("--intent", inf.intent, "analyze | generate")
      ->check(CLI::IsMember({"analyze", "generate"}));
  infer->add_flag("--json", inf.json_out, "Print the full JSON response");

  auto* loop = app.add_subcommand("loop", "Instant user feedback loop");
  loop->require_subcommand(1);
  LoopArgs la;
  auto* loop_run_cmd = loop->add_subcommand("run", "Apply a feedback stream to the persisted loop");
  loop_run_cmd->add_option("--feedback-file", la.feedback_file, "Feedback JSONL")
      ->required()
      ->check(CLI::ExistingFile);
  loop_run_cmd->add_option("--alpha", la.alpha, "Fine-tune interval");
  loop_run_cmd->add_option("--beta", la.beta, "Satisfaction threshold (percent)");
  loop_run_cmd->add_option("--ema-alpha", la.ema_alpha, "Satisfaction smoothing in (0,1]");
  loop_run_cmd->add_option("--max-iterations", la.max_iterations, "Iteration budget");
  loop_run_cmd->add_flag("--literal-ge", la.literal_ge, "Fine-tune when satisfaction >= threshold");
  loop_run_cmd->add_option("--report", la.report, "Write the loop report here instead of stdout");

  auto* eval = app.add_subcommand("eval", "Evaluation metrics");
  eval->require_subcommand(1);
  EvalArgs ea;
  auto add_common = [&ea](CLI::App* c) {
    c->add_option("--in", ea.in, "Input JSONL")->required()->check(CLI::ExistingFile);
    c->add_option("--out", ea.out, "Write the JSON report here");
  };
  auto* classify = eval->add_subcommand("classify", "Precision, recall, F1 and AUC");
  add_common(classify);
  classify->add_option("--classes", ea.classes, "Comma-separated class order");
  classify->add_option("--baseline", ea.baselines,
                       "Reference row: image-in-domain, image-zero-shot, video-in-domain, "
                       "video-zero-shot");
  classify->add_flag("--json", ea.json_out, "Print JSON instead of a table");
  auto* rouge = eval->add_subcommand("rouge", "ROUGE-L of candidate/reference rows");
  add_common(rouge);
  auto* rel = eval->add_subcommand("relevance", "Answer and context relevance");
  add_common(rel);
  auto* useful = eval->add_subcommand("usefulness", "Judge-scored usefulness (1-10)");
  add_common(useful);
  useful->add_option("--rubric", ea.rubric, "Default rubric");
  auto* latency = eval->add_subcommand("latency", "Latency and tokens grouped by frames");
  add_common(latency);
  latency->add_option("--csv", ea.csv, "Also write CSV");

  std::optional<int> port;
  std::string static_dir;
  auto* serve = app.add_subcommand("serve", "Serve the HTTP API");
  serve->add_option("--port", port, "Port (default $PORT or 8080)");
  serve->add_option("--static", static_dir, "Console bundle directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate) return dataset_generate(g, gen);
    if (*caption) return dataset_caption(g, cap);
    if (*infer) return infer_cmd(g, inf);
    if (*loop_run_cmd) return loop_run(g, la);
    if (*classify) return eval_classify(g, ea);
    if (*rouge) return eval_rouge(g, ea);
    if (*rel) return eval_relevance(g, ea);
    if (*useful) return eval_usefulness(g, ea);
    if (*latency) return eval_latency(g, ea);
    if (*serve) return serve_cmd(g, port, static_dir);
  } catch (const dtwin::ApiException& e) {
    std::cerr << "dt: error [" << dtwin::to_string(e.error().code) << "]: " << e.what() << '\n';
    return e.error().code == dtwin::ApiErrorCode::validation ? 2 : 1;
  } catch (const dtwin::Error& e) {
    std::cerr << "dt: error [" << dtwin::to_string(e.code()) << "]: " << e.what() << '\n';
    return e.code() == dtwin::ErrorCode::validation ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "dt: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
