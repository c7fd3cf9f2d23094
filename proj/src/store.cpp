#include "dtwin/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "dtwin/error.hpp"
#include "dtwin/text.hpp"

namespace fs = std::filesystem;

namespace dtwin {

namespace {

struct ScannedLog {
  std::vector<LogRecord> records;
  std::vector<std::string> warnings;
  // Byte offset where a corrupted trailing line starts, if any.
  std::optional<std::uintmax_t> bad_tail_offset;
};

std::optional<LogRecord> parse_line(const std::string& line) {
  auto j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  if (!j.contains("seq") || !j.at("seq").is_number_integer() || !j.contains("kind") ||
      !j.at("kind").is_string() || !j.contains("time_ms") || !j.at("time_ms").is_number_integer() ||
      !j.contains("record")) {
    return std::nullopt;
  }
  return LogRecord{j.at("seq").get<std::int64_t>(), j.at("kind").get<std::string>(),
                   j.at("time_ms").get<std::int64_t>(), j.at("record")};
}

ScannedLog scan(const std::string& path) {
  ScannedLog out;
  std::error_code ec;
  if (!fs::exists(path, ec)) return out;
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot read log " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string data = buf.str();

  struct Line {
    std::uintmax_t offset;
    std::string text;
  };
  std::vector<Line> lines;
  std::size_t start = 0;
  while (start < data.size()) {
    auto nl = data.find('\n', start);
    const std::size_t end = nl == std::string::npos ? data.size() : nl;
    lines.push_back({start, data.substr(start, end - start)});
    start = end + 1;
  }
  while (!lines.empty() && text::trim(lines.back().text).empty()) lines.pop_back();

  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (text::trim(lines[i].text).empty()) continue;
    auto rec = parse_line(lines[i].text);
    if (!rec) {
      if (i + 1 == lines.size()) {
        out.warnings.push_back(path + ": skipped partially written final line " +
                               std::to_string(i + 1));
        out.bad_tail_offset = lines[i].offset;
        break;
      }
      fail(ErrorCode::io, path + ": corrupted line " + std::to_string(i + 1));
    }
    if (!out.records.empty() && rec->seq <= out.records.back().seq) {
      fail(ErrorCode::io, path + ": sequence numbers not increasing at line " + std::to_string(i + 1));
    }
    out.records.push_back(std::move(*rec));
  }
  return out;
}

bool keep(const LogRecord& r, const LoadFilter& f) {
  if (f.kind && r.kind != *f.kind) return false;
  if (f.from_ms && r.time_ms < *f.from_ms) return false;
  if (f.to_ms && r.time_ms > *f.to_ms) return false;
  return true;
}

void write_all_fsync(int fd, const std::string& bytes, const std::string& path) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      const std::string why = std::strerror(errno);
      ::close(fd);
      fail(ErrorCode::io, "write to " + path + " failed: " + why);
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) {
    const std::string why = std::strerror(errno);
    ::close(fd);
    fail(ErrorCode::io, "fsync of " + path + " failed: " + why);
  }
  ::close(fd);
}

void fsync_dir(const fs::path& dir) {
  const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
  if (fd >= 0) {
    ::fsync(fd);
    ::close(fd);
  }
}

std::string pad(std::int64_t v, int width) {
  std::ostringstream out;
  out << std::setw(width) << std::setfill('0') << v;
  return out.str();
}

}  // namespace

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

EventLog::EventLog(std::string path) : path_(std::move(path)) {
  const auto parent = fs::path(path_).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  auto scanned = scan(path_);
  if (scanned.bad_tail_offset) {
    if (::truncate(path_.c_str(), static_cast<off_t>(*scanned.bad_tail_offset)) != 0) {
      fail(ErrorCode::io, "cannot drop partial line of " + path_ + ": " + std::strerror(errno));
    }
  } else {
    // A complete final record may still lack its newline.
    std::ifstream in(path_, std::ios::binary | std::ios::ate);
    if (in && in.tellg() > 0) {
      in.seekg(-1, std::ios::end);
      char last = 0;
      in.get(last);
      if (last != '\n') {
        in.close();
        const int fd = ::open(path_.c_str(), O_WRONLY | O_APPEND);
        if (fd < 0) fail(ErrorCode::io, "cannot open log " + path_);
        write_all_fsync(fd, "\n", path_);
      }
    }
  }
  next_seq_ = scanned.records.empty() ? 0 : scanned.records.back().seq + 1;
}

std::int64_t EventLog::append(std::string_view kind, const nlohmann::json& record,
                              std::optional<std::int64_t> time_ms) {
  std::lock_guard lock(mu_);
  const std::int64_t seq = next_seq_;
  nlohmann::json env = {{"seq", seq},
                        {"kind", std::string(kind)},
                        {"time_ms", time_ms.value_or(now_ms())},
                        {"record", record}};
  std::string line;
  try {
    line = env.dump() + "\n";
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::validation, std::string("record is not serializable: ") + e.what());
  }
  const int fd = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
  if (fd < 0) fail(ErrorCode::io, "cannot open log " + path_ + ": " + std::strerror(errno));
  write_all_fsync(fd, line, path_);
  ++next_seq_;
  return seq;
}

LoadResult EventLog::load(const LoadFilter& filter) const {
  std::lock_guard lock(mu_);
  return load_records(path_, filter);
}

std::int64_t EventLog::next_seq() const {
  std::lock_guard lock(mu_);
  return next_seq_;
}

LoadResult load_records(const std::string& log_path, const LoadFilter& filter) {
  auto scanned = scan(log_path);
  LoadResult out;
  out.warnings = std::move(scanned.warnings);
  for (auto& r : scanned.records)
    if (keep(r, filter)) out.records.push_back(std::move(r));
  return out;
}

std::int64_t append_record(const std::string& log_path, std::string_view kind,
                           const nlohmann::json& record) {
  EventLog log(log_path);
  return log.append(kind, record);
}

std::string_view to_string(RunKind kind) {
  switch (kind) {
    case RunKind::dataset_gen: return "dataset_gen";
    case RunKind::inference: return "inference";
    case RunKind::loop: return "loop";
    case RunKind::eval: return "eval";
  }
  return "inference";
}

RunKind run_kind_from_string(std::string_view s) {
  for (auto k : {RunKind::dataset_gen, RunKind::inference, RunKind::loop, RunKind::eval})
    if (to_string(k) == s) return k;
  fail(ErrorCode::validation, "unknown run kind '" + std::string(s) + "'");
}

std::string_view to_string(RunStatus status) {
  switch (status) {
    case RunStatus::running: return "running";
    case RunStatus::succeeded: return "succeeded";
    case RunStatus::failed: return "failed";
  }
  return "running";
}

RunStatus run_status_from_string(std::string_view s) {
  for (auto k : {RunStatus::running, RunStatus::succeeded, RunStatus::failed})
    if (to_string(k) == s) return k;
  fail(ErrorCode::validation, "unknown run status '" + std::string(s) + "'");
}

Store::Store(std::string data_dir)
    : root_(std::move(data_dir)),
      feedback_((fs::path(root_) / "feedback" / "feedback.jsonl").string()),
      registry_((fs::path(root_) / "registry" / "models.jsonl").string()),
      runs_((fs::path(root_) / "runs" / "runs.jsonl").string()),
      latency_((fs::path(root_) / "runs" / "latency.jsonl").string()),
      jobs_((fs::path(root_) / "registry" / "jobs.jsonl").string()) {
  fs::create_directories(fs::path(root_) / "datasets");
  fs::create_directories(fs::path(root_) / "snapshots");

  for (const auto& r : registry_.load().records) {
    auto e = r.record.get<ModelRegistryEntry>();
    model_order_.push_back(e.model_id);
    models_[e.model_id] = std::move(e);
  }
  for (const auto& r : runs_.load().records) {
    auto run = r.record.get<RunRecord>();
    runs_by_id_[run.run_id] = run;
    if (run.run_id.rfind("run-", 0) == 0) {
      try {
        run_counter_ = std::max<std::int64_t>(run_counter_, std::stoll(run.run_id.substr(4)));
      } catch (const std::exception&) {
      }
    }
  }
}

std::string Store::data_dir_from_env() {
  const char* v = std::getenv("DATA_DIR");
  return v && *v ? std::string(v) : std::string("data");
}

std::string Store::resolve(std::string_view locator) const {
  const fs::path p(locator);
  return p.is_absolute() ? p.string() : (fs::path(root_) / p).string();
}

std::string Store::dataset_dir() const { return (fs::path(root_) / "datasets").string(); }

std::int64_t Store::append_feedback(const Feedback& f, const nlohmann::json& extra) {
  nlohmann::json row = f;
  if (extra.is_object()) row.update(extra);
  return feedback_.append("feedback", row,
                          f.timestamp_ms ? std::optional(f.timestamp_ms) : std::nullopt);
}

LoadResult Store::load_feedback() const { return feedback_.load(); }

std::string Store::snapshot_state(const LoopState& state, std::optional<std::int64_t> time_ms) {
  std::lock_guard lock(mu_);
  const std::string name = "state-" + pad(time_ms.value_or(now_ms()), 15) + "-" +
                           pad(state.iteration, 8) + ".json";
  const fs::path dir = fs::path(root_) / "snapshots";
  fs::create_directories(dir);
  const fs::path final_path = dir / name;
  const fs::path tmp = dir / ("." + name + ".tmp");
  const std::string body = nlohmann::json(state).dump(2) + "\n";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) fail(ErrorCode::io, "cannot write snapshot " + tmp.string());
  write_all_fsync(fd, body, tmp.string());
  std::error_code ec;
  fs::rename(tmp, final_path, ec);
  if (ec) fail(ErrorCode::io, "cannot publish snapshot " + final_path.string() + ": " + ec.message());
  fsync_dir(dir);
  return (fs::path("snapshots") / name).string();
}

LoopState Store::restore_state(const std::string& locator) const {
  const auto path = resolve(locator);
  std::ifstream in(path);
  if (!in) fail(ErrorCode::restore, "snapshot not found: " + locator);
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) fail(ErrorCode::restore, "snapshot is corrupt: " + locator);
  try {
    return j.get<LoopState>();
  } catch (const std::exception& e) {
    fail(ErrorCode::restore, "snapshot is corrupt: " + locator + ": " + e.what());
  }
}

std::optional<std::string> Store::latest_snapshot() const {
  const fs::path dir = fs::path(root_) / "snapshots";
  std::error_code ec;
  if (!fs::exists(dir, ec)) return std::nullopt;
  std::optional<std::string> best;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("state-", 0) != 0 || e.path().extension() != ".json") continue;
    if (!best || name > *best) best = name;
  }
  if (!best) return std::nullopt;
  return (fs::path("snapshots") / *best).string();
}

void Store::register_model(const ModelRegistryEntry& entry) {
  std::lock_guard lock(mu_);
  require(!text::trim(entry.model_id).empty(), "model id must be non-empty");
  require(!models_.count(entry.model_id), "model '" + entry.model_id + "' is already registered");
  if (entry.parent_model_id) {
    require(*entry.parent_model_id != entry.model_id, "a model cannot be its own parent");
    require(models_.count(*entry.parent_model_id) > 0,
            "parent model '" + *entry.parent_model_id + "' is not registered");
  }
  registry_.append("model", entry, entry.created_at ? std::optional(entry.created_at) : std::nullopt);
  models_[entry.model_id] = entry;
  model_order_.push_back(entry.model_id);
}

std::vector<ModelRegistryEntry> Store::models() const {
  std::lock_guard lock(mu_);
  std::vector<ModelRegistryEntry> out;
  for (const auto& id : model_order_) out.push_back(models_.at(id));
  return out;
}

std::optional<ModelRegistryEntry> Store::find_model(const std::string& model_id) const {
  std::lock_guard lock(mu_);
  auto it = models_.find(model_id);
  if (it == models_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> Store::model_chain(const std::string& model_id) const {
  std::lock_guard lock(mu_);
  std::vector<std::string> chain;
  std::set<std::string> seen;
  std::optional<std::string> cur = model_id;
  while (cur) {
    auto it = models_.find(*cur);
    if (it == models_.end()) fail(ErrorCode::not_found, "model '" + *cur + "' is not registered");
    if (!seen.insert(*cur).second) fail(ErrorCode::internal, "model registry has a cycle at " + *cur);
    chain.push_back(*cur);
    cur = it->second.parent_model_id;
  }
  std::reverse(chain.begin(), chain.end());
  return chain;
}

RunRecord Store::start_run(RunKind kind, nlohmann::json config) {
  std::lock_guard lock(mu_);
  RunRecord r;
  r.run_id = "run-" + pad(++run_counter_, 6);
  r.kind = kind;
  r.config = std::move(config);
  r.created_at = r.updated_at = now_ms();
  runs_.append("run", r, r.updated_at);
  runs_by_id_[r.run_id] = r;
  return r;
}

RunRecord Store::finish_run(const std::string& run_id, RunStatus status,
                            std::vector<std::string> artifacts, nlohmann::json detail) {
  std::lock_guard lock(mu_);
  auto it = runs_by_id_.find(run_id);
  if (it == runs_by_id_.end()) fail(ErrorCode::not_found, "run '" + run_id + "' does not exist");
  require(!it->second.terminal(), "run '" + run_id + "' is already " +
                                      std::string(to_string(it->second.status)));
  RunRecord r = it->second;
  r.status = status;
  r.artifacts = std::move(artifacts);
  r.detail = std::move(detail);
  r.updated_at = now_ms();
  runs_.append("run", r, r.updated_at);
  it->second = r;
  return r;
}

std::optional<RunRecord> Store::find_run(const std::string& run_id) const {
  std::lock_guard lock(mu_);
  auto it = runs_by_id_.find(run_id);
  if (it == runs_by_id_.end()) return std::nullopt;
  return it->second;
}

std::vector<RunRecord> Store::runs() const {
  std::lock_guard lock(mu_);
  std::vector<RunRecord> out;
  for (const auto& [id, r] : runs_by_id_) out.push_back(r);
  return out;
}

std::int64_t Store::append_latency(const nlohmann::json& latency_record) {
  return latency_.append("latency", latency_record);
}

LoadResult Store::load_latency() const { return latency_.load(); }

std::int64_t Store::append_job(const nlohmann::json& job_record) {
  return jobs_.append("finetune_job", job_record);
}

LoadResult Store::load_jobs() const { return jobs_.load(); }

void to_json(nlohmann::json& j, const LogRecord& r) {
  j = {{"seq", r.seq}, {"kind", r.kind}, {"time_ms", r.time_ms}, {"record", r.record}};
}

void to_json(nlohmann::json& j, const ModelRegistryEntry& e) {
  j = {{"model_id", e.model_id},
       {"created_at", e.created_at},
       {"dataset_ref", e.dataset_ref},
       {"params", e.params}};
  j["parent_model_id"] = e.parent_model_id ? nlohmann::json(*e.parent_model_id) : nullptr;
}

void from_json(const nlohmann::json& j, ModelRegistryEntry& e) {
  e.model_id = j.at("model_id").get<std::string>();
  if (j.contains("parent_model_id") && !j.at("parent_model_id").is_null()) {
    e.parent_model_id = j.at("parent_model_id").get<std::string>();
  } else {
    e.parent_model_id.reset();
  }
  e.created_at = j.value("created_at", std::int64_t{0});
  e.dataset_ref = j.value("dataset_ref", std::string());
  if (j.contains("params")) e.params = j.at("params").get<SamplingParams>();
}

void to_json(nlohmann::json& j, const RunRecord& r) {
  j = {{"run_id", r.run_id},
       {"kind", to_string(r.kind)},
       {"config", r.config},
       {"artifacts", r.artifacts},
       {"status", to_string(r.status)},
       {"created_at", r.created_at},
       {"updated_at", r.updated_at},
       {"detail", r.detail}};
}

void from_json(const nlohmann::json& j, RunRecord& r) {
  r.run_id = j.at("run_id").get<std::string>();
  r.kind = run_kind_from_string(j.at("kind").get<std::string>());
  r.config = j.value("config", nlohmann::json::object());
  r.artifacts = j.value("artifacts", std::vector<std::string>{});
  r.status = run_status_from_string(j.at("status").get<std::string>());
  r.created_at = j.value("created_at", std::int64_t{0});
  r.updated_at = j.value("updated_at", std::int64_t{0});
  r.detail = j.contains("detail") ? j.at("detail") : nlohmann::json(nullptr);
}

}  // namespace dtwin
