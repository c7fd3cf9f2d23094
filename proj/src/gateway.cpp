#include "dtwin/gateway.hpp"

#include <httplib.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>

#include "dtwin/dataset_gen.hpp"
#include "dtwin/evalsuite.hpp"
#include "dtwin/inference.hpp"
#include "dtwin/text.hpp"

namespace fs = std::filesystem;

namespace dtwin {

std::string_view to_string(ApiErrorCode code) {
  switch (code) {
    case ApiErrorCode::validation: return "validation";
    case ApiErrorCode::transport: return "transport";
    case ApiErrorCode::backend: return "backend";
    case ApiErrorCode::not_found: return "not_found";
    case ApiErrorCode::internal: return "internal";
  }
  return "internal";
}

int ApiError::http_status() const {
  switch (code) {
    case ApiErrorCode::validation: return 400;
    case ApiErrorCode::not_found: return 404;
    case ApiErrorCode::transport: return 503;
    case ApiErrorCode::backend: return 502;
    case ApiErrorCode::internal: return 500;
  }
  return 500;
}

nlohmann::json ApiError::body() const {
  nlohmann::json err = {{"code", to_string(code)},
                        {"message", message},
                        {"detail", detail},
                        {"retryable", retryable()}};
  if (retryable()) err["retry_after_ms"] = 1000;
  return {{"error", err}};
}

ApiError to_api_error(const Error& e) {
  ApiError out;
  out.message = e.what();
  out.detail = e.detail();
  switch (e.code()) {
    case ErrorCode::validation:
    case ErrorCode::template_not_found:
    case ErrorCode::degenerate_input:
      out.code = ApiErrorCode::validation;
      break;
    case ErrorCode::not_found:
      out.code = ApiErrorCode::not_found;
      break;
    case ErrorCode::transport:
    case ErrorCode::rate_limit:
    case ErrorCode::timeout:
      out.code = ApiErrorCode::transport;
      break;
    case ErrorCode::backend:
    case ErrorCode::malformed_response:
    case ErrorCode::generation:
    case ErrorCode::processing:
    case ErrorCode::scoring:
      out.code = ApiErrorCode::backend;
      break;
    case ErrorCode::io:
    case ErrorCode::restore:
    case ErrorCode::internal:
      out.code = ApiErrorCode::internal;
      break;
  }
  if (!out.detail.is_object()) out.detail = nlohmann::json::object();
  out.detail["engine_code"] = to_string(e.code());
  return out;
}

namespace {

std::optional<std::string> request_id_of(const nlohmann::json& req) {
  if (req.is_object() && req.contains("request_id") && req.at("request_id").is_string()) {
    auto id = req.at("request_id").get<std::string>();
    if (!id.empty()) return id;
  }
  return std::nullopt;
}

nlohmann::json ok_envelope(const nlohmann::json& body) { return {{"ok", true}, {"body", body}}; }

nlohmann::json err_envelope(const ApiError& e) {
  return {{"ok", false},
          {"code", to_string(e.code)},
          {"message", e.message},
          {"detail", e.detail}};
}

nlohmann::json unwrap(const nlohmann::json& envelope) {
  if (envelope.at("ok").get<bool>()) return envelope.at("body");
  ApiError e;
  const auto code = envelope.at("code").get<std::string>();
  for (auto c : {ApiErrorCode::validation, ApiErrorCode::transport, ApiErrorCode::backend,
                 ApiErrorCode::not_found, ApiErrorCode::internal}) {
    if (to_string(c) == code) e.code = c;
  }
  e.message = envelope.at("message").get<std::string>();
  e.detail = envelope.at("detail");
  throw ApiException(e);
}

nlohmann::json state_summary(const LoopState& s, const LoopConfig& cfg) {
  return {{"iteration", s.iteration},
          {"counter", s.counter},
          {"satisfaction", s.satisfaction.value},
          {"ft_count", s.ft_count},
          {"model_id", s.model_id},
          {"model_chain", s.model_chain},
          {"sm", {{"text", s.sm.text}, {"version", s.sm.version}}},
          {"instruction", s.instruction},
          {"params", s.params},
          {"feedback_count", s.feedbacks.size()},
          {"config",
           {{"ft_interval", cfg.ft_interval},
            {"satisfaction_threshold", cfg.satisfaction_threshold},
            {"ema_alpha", cfg.ema_alpha}}}};
}

bool safe_id(const std::string& id) {
  static const std::regex pattern("[A-Za-z0-9_-][A-Za-z0-9_.-]*");
  return std::regex_match(id, pattern) && id.find("..") == std::string::npos;
}

}  // namespace

Service::Service(EngineConfig config) : config_(std::move(config)) {
  if (config_.backend == "mock" && config_.mock.media_dir.empty()) {
    config_.mock.media_dir = (fs::path(config_.data_dir) / "media").string();
  }
  if (config_.backend == "http" && config_.http.media_dir == "media") {
    config_.http.media_dir = (fs::path(config_.data_dir) / "media").string();
  }
  backends_ = config_.make_backends();
  if (!config_.vpi_rules_path.empty()) vpi_rules_ = load_vpi_rules(config_.vpi_rules_path);
  store_ = std::make_unique<Store>(config_.data_dir);

  LoopState s;
  if (auto latest = store_->latest_snapshot()) {
    s = store_->restore_state(*latest);
  } else {
    s = initial_state(config_.loop, config_.base_model, config_.loop_system_message,
                      config_.instruction);
  }
  if (!store_->find_model(s.model_chain.front())) {
    store_->register_model({s.model_chain.front(), std::nullopt, now_ms(), "", s.params});
  }
  state_ = std::make_shared<const LoopState>(std::move(s));

  for (const auto& r : store_->load_feedback().records) {
    if (r.record.contains("request_id") && r.record.contains("response")) {
      idempotent_[r.record.at("request_id").get<std::string>()] = r.record.at("response");
    }
  }
}

std::shared_ptr<const LoopState> Service::state() const {
  std::lock_guard lock(state_mu_);
  return state_;
}

void Service::publish(LoopState s) {
  auto next = std::make_shared<const LoopState>(std::move(s));
  std::lock_guard lock(state_mu_);
  state_ = std::move(next);
}

std::optional<nlohmann::json> Service::cached(const std::string& request_id) {
  std::lock_guard lock(idem_mu_);
  auto it = idempotent_.find(request_id);
  if (it == idempotent_.end()) return std::nullopt;
  return it->second;
}

void Service::remember(const std::string& request_id, const nlohmann::json& response) {
  std::lock_guard lock(idem_mu_);
  idempotent_.emplace(request_id, response);
}

nlohmann::json Service::handle_infer(const nlohmann::json& request) {
  const auto rid = request_id_of(request);
  if (rid) {
    if (auto hit = cached("infer:" + *rid)) return unwrap(*hit);
  }
  MultimodalInput input;
  try {
    input = request.get<MultimodalInput>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::validation, std::string("bad inference request: ") + e.what());
  }
  const ModelPlan plan = route(input);

  const auto s = state();
  InferenceOptions opts = config_.inference;
  opts.system_message = s->sm.text;
  opts.params.top_p = s->params.top_p;
  opts.params.top_k = s->params.top_k;
  opts.vpi_rules = vpi_rules_;
  BackendSet backends = backends_;
  backends.models().chat = s->model_id;

  auto run = store_->start_run(RunKind::inference, request);
  try {
    auto extractor = config_.make_frame_extractor(
        (fs::path(config_.data_dir) / "frames" / run.run_id).string());
    const RawResult raw = infer(input, plan, backends, opts, extractor.get());
    const ConsumableResponse resp = process(raw, input, plan);

    LatencyRecord lat{static_cast<std::int64_t>(raw.frames), resp.usage.tokens(), resp.usage.latency_ms,
                      input.video ? "video" : !input.images.empty() ? "image" : "text"};
    if (input.intent == Intent::generate) lat.task = "generate";
    nlohmann::json lat_row = lat;
    lat_row["run_id"] = run.run_id;
    store_->append_latency(lat_row);

    std::vector<std::string> artifacts;
    for (const auto& m : resp.media) artifacts.push_back(m.locator);
    store_->finish_run(run.run_id, raw.complete() ? RunStatus::succeeded : RunStatus::failed,
                       artifacts, {{"usage", resp.usage}, {"warnings", resp.warnings}});

    nlohmann::json out = resp;
    out["run_id"] = run.run_id;
    out["plan"] = plan;
    out["complete"] = raw.complete();
    out["model_id"] = s->model_id;
    if (rid) remember("infer:" + *rid, ok_envelope(out));
    return out;
  } catch (const Error& e) {
    const auto api = to_api_error(e);
    store_->finish_run(run.run_id, RunStatus::failed, {}, api.body());
    if (rid && !e.retryable()) remember("infer:" + *rid, err_envelope(api));
    throw;
  }
}

nlohmann::json Service::handle_feedback(const nlohmann::json& request) {
  std::lock_guard writer(writer_mu_);
  const auto rid = request_id_of(request);
  if (rid) {
    if (auto hit = cached(*rid)) return unwrap(*hit);
  }
  require(request.is_object(), "feedback must be a JSON object");
  Feedback f = request.get<Feedback>();
  if (f.timestamp_ms == 0) f.timestamp_ms = now_ms();

  LoopState s = *state();
  LoopDeps deps{&backends_, (fs::path(store_->dataset_dir()) / "loop").string(), config_.finetune};
  const std::string previous_model = s.model_id;
  const StepOutcome outcome = step(s, f, config_.loop, deps);

  if (outcome.finetune) {
    const auto& ft = *outcome.finetune;
    const std::string ref =
        ft.dataset_ref.empty() ? "" : fs::relative(ft.dataset_ref, store_->root()).string();
    nlohmann::json job_row = {{"iteration", s.iteration},
                              {"succeeded", ft.succeeded},
                              {"dataset_ref", ref},
                              {"error", ft.error}};
    job_row["job"] = ft.job ? nlohmann::json(*ft.job) : nlohmann::json(nullptr);
    store_->append_job(job_row);
    if (ft.succeeded) {
      store_->register_model({s.model_id, previous_model, now_ms(), ref, s.params});
    }
  }

  nlohmann::json body = state_summary(s, config_.loop);
  body["action"] = to_string(outcome.action);
  body["score_pct"] = s.trace.back().score_pct;
  body["satisfaction_raw"] = s.trace.back().satisfaction_raw;

  nlohmann::json envelope;
  std::optional<ApiError> failure;
  if (outcome.action == LoopAction::finetune_failed) {
    failure = ApiError{ApiErrorCode::backend, "triggered fine-tune failed: " + outcome.finetune->error,
                       {{"state", body}}};
    envelope = err_envelope(*failure);
  } else {
    envelope = ok_envelope(body);
  }

  nlohmann::json extra = {{"action", to_string(outcome.action)}, {"iteration", s.iteration}};
  if (rid) {
    extra["request_id"] = *rid;
    extra["response"] = envelope;
  }
  store_->append_feedback(f, extra);
  store_->snapshot_state(s);
  publish(std::move(s));
  if (rid) remember(*rid, envelope);
  if (failure) throw ApiException(*failure);
  return body;
}

nlohmann::json Service::generate_dataset(const nlohmann::json& request) {
  require(request.is_object(), "dataset request must be a JSON object");
  const auto rid = request_id_of(request);
  if (rid) {
    if (auto hit = cached("dataset:" + *rid)) return unwrap(*hit);
  }
  require(request.contains("captions") && request.at("captions").is_array() &&
              !request.at("captions").empty(),
          "captions must be a non-empty array");
  std::vector<CaptionRecord> captions;
  const auto& arr = request.at("captions");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (arr[i].is_string()) {
      CaptionRecord c;
      c.id = "c" + std::to_string(i + 1);
      c.template_id = "inline";
      c.text = arr[i].get<std::string>();
      captions.push_back(std::move(c));
    } else {
      captions.push_back(arr[i].get<CaptionRecord>());
    }
  }
  GenerationPolicy policy = config_.generation;
  try {
    policy.k_max = request.value("k", policy.k_max);
    policy.similarity_threshold = request.value("similarity_threshold", policy.similarity_threshold);
    policy.lambda = request.value("lambda", policy.lambda);
    policy.max_attempts = request.value("max_attempts", std::max(policy.max_attempts, policy.k_max * 4));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::validation, std::string("bad dataset request: ") + e.what());
  }
  policy.validate();
  const std::string sm = request.value("system_message", std::string(kDefaultSystemMessage));

  auto run = store_->start_run(RunKind::dataset_gen, request);
  try {
    const auto compiled = compile_dataset(captions, policy, sm, backends_);
    const std::string id = "ds-" + run.run_id.substr(4);
    const auto path = fs::path(store_->dataset_dir()) / (id + ".jsonl");
    const auto obj_path = fs::path(store_->dataset_dir()) / (id + ".objectives.json");
    write_dataset_jsonl(path.string(), compiled.entries);
    {
      std::ofstream out(obj_path);
      out << objective_report_json(compiled.objectives).dump(2) << '\n';
    }
    nlohmann::json failures = nlohmann::json::array();
    for (const auto& f : compiled.failures) {
      failures.push_back({{"caption_id", f.caption_id}, {"code", f.code}, {"message", f.message}});
    }
    nlohmann::json out = {{"id", id},
                          {"run_id", run.run_id},
                          {"locator", (fs::path("datasets") / (id + ".jsonl")).string()},
                          {"entries", compiled.entries.size()},
                          {"duplicates_removed", compiled.duplicates_removed},
                          {"warnings", compiled.warnings},
                          {"failures", failures},
                          {"objectives", objective_report_json(compiled.objectives)}};
    store_->finish_run(run.run_id, compiled.entries.empty() ? RunStatus::failed : RunStatus::succeeded,
                       {out.at("locator").get<std::string>()}, {{"entries", compiled.entries.size()}});
    if (rid) remember("dataset:" + *rid, ok_envelope(out));
    return out;
  } catch (const Error& e) {
    store_->finish_run(run.run_id, RunStatus::failed, {}, to_api_error(e).body());
    throw;
  }
}

nlohmann::json Service::get_dataset(const std::string& id) const {
  if (!safe_id(id)) fail(ErrorCode::validation, "invalid dataset id '" + id + "'");
  const auto path = fs::path(store_->dataset_dir()) / (id + ".jsonl");
  if (!fs::exists(path)) fail(ErrorCode::not_found, "dataset '" + id + "' does not exist");
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : read_dataset_jsonl(path.string())) rows.push_back(dataset_row(e));
  nlohmann::json out = {{"id", id}, {"entries", rows}};
  const auto obj_path = fs::path(store_->dataset_dir()) / (id + ".objectives.json");
  std::ifstream obj(obj_path);
  out["objectives"] = obj ? nlohmann::json::parse(obj, nullptr, false) : nlohmann::json(nullptr);
  if (out["objectives"].is_discarded()) out["objectives"] = nullptr;
  return out;
}

nlohmann::json Service::loop_state() const { return state_summary(*state(), config_.loop); }

nlohmann::json Service::loop_report() const { return report_of(*state()); }

nlohmann::json Service::latency_metrics() const {
  std::vector<LatencyRecord> records;
  for (const auto& r : store_->load_latency().records) records.push_back(r.record.get<LatencyRecord>());
  nlohmann::json out = {{"records", records.size()}, {"groups", nlohmann::json::array()}};
  if (!records.empty()) out["groups"] = latency_report(records);
  return out;
}

nlohmann::json Service::finetune_jobs() const {
  nlohmann::json jobs = nlohmann::json::array();
  for (const auto& r : store_->load_jobs().records) {
    nlohmann::json row = r.record;
    row["seq"] = r.seq;
    row["time_ms"] = r.time_ms;
    jobs.push_back(std::move(row));
  }
  nlohmann::json models = nlohmann::json::array();
  for (const auto& m : store_->models()) models.push_back(m);
  return {{"jobs", jobs}, {"models", models}};
}

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const ApiError& e) {
  if (e.retryable()) res.set_header("Retry-After", "1");
  send_json(res, e.http_status(), e.body());
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const ApiException& e) {
      send_error(res, e.error());
    } catch (const Error& e) {
      send_error(res, to_api_error(e));
    } catch (const std::exception& e) {
      send_error(res, ApiError{ApiErrorCode::internal, e.what(), nullptr});
    }
  };
}

nlohmann::json parse_body(const httplib::Request& req) {
  auto j = nlohmann::json::parse(req.body, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::validation, "request body is not valid JSON");
  if (!j.is_object()) fail(ErrorCode::validation, "request body must be a JSON object");
  if (auto h = req.get_header_value("Idempotency-Key"); !h.empty() && !j.contains("request_id")) {
    j["request_id"] = h;
  }
  return j;
}

}  // namespace

void register_routes(httplib::Server& server, Service& service, const std::string& static_dir) {
  server.Post("/api/infer", guarded([&service](const httplib::Request& req, httplib::Response& res) {
                send_json(res, 200, service.handle_infer(parse_body(req)));
              }));
  server.Post("/api/feedback", guarded([&service](const httplib::Request& req, httplib::Response& res) {
                send_json(res, 200, service.handle_feedback(parse_body(req)));
              }));
  server.Get("/api/loop/state", guarded([&service](const httplib::Request&, httplib::Response& res) {
               send_json(res, 200, service.loop_state());
             }));
  server.Get("/api/loop/report", guarded([&service](const httplib::Request&, httplib::Response& res) {
               send_json(res, 200, service.loop_report());
             }));
  server.Post("/api/dataset/generate",
              guarded([&service](const httplib::Request& req, httplib::Response& res) {
                send_json(res, 200, service.generate_dataset(parse_body(req)));
              }));
  server.Get(R"(/api/dataset/([^/]+))",
             guarded([&service](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200, service.get_dataset(req.matches[1].str()));
             }));
  server.Get("/api/metrics/latency", guarded([&service](const httplib::Request&, httplib::Response& res) {
               send_json(res, 200, service.latency_metrics());
             }));
  server.Get("/api/finetune/jobs", guarded([&service](const httplib::Request&, httplib::Response& res) {
               send_json(res, 200, service.finetune_jobs());
             }));
  server.Get("/api/health", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}});
  });
  if (!static_dir.empty()) {
    if (!server.set_mount_point("/", static_dir)) {
      fail(ErrorCode::validation, "static directory does not exist: " + static_dir);
    }
  }
}

void serve(Service& service, int port, const std::string& static_dir) {
  require(port > 0 && port < 65536, "port must be in 1..65535");
  httplib::Server server;
  register_routes(server, service, static_dir);
  std::cerr << "dt: listening on 0.0.0.0:" << port << " (data: " << service.config().data_dir
            << ")\n";
  if (!server.listen("0.0.0.0", port)) fail(ErrorCode::io, "cannot listen on port " + std::to_string(port));
}

}  // namespace dtwin
