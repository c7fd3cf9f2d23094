#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dtwin/backends.hpp"
#include "dtwin/instauf.hpp"

namespace dtwin {

std::int64_t now_ms();

// One line of an append-only JSONL log.
struct LogRecord {
  std::int64_t seq = 0;
  std::string kind;
  std::int64_t time_ms = 0;
  nlohmann::json record;

  bool operator==(const LogRecord&) const = default;
};

struct LoadFilter {
  std::optional<std::string> kind;
  std::optional<std::int64_t> from_ms;  // inclusive
  std::optional<std::int64_t> to_ms;    // inclusive
};

struct LoadResult {
  std::vector<LogRecord> records;
  std::vector<std::string> warnings;
};

// Append-only JSONL log with monotone sequence numbers. Every append is
// fsync'ed before it returns. Opening a log whose last line was only
// partially written drops that line, so later appends start on a clean line.
class EventLog {
 public:
  explicit EventLog(std::string path);

  std::int64_t append(std::string_view kind, const nlohmann::json& record,
                      std::optional<std::int64_t> time_ms = std::nullopt);
  LoadResult load(const LoadFilter& filter = {}) const;
  const std::string& path() const { return path_; }
  std::int64_t next_seq() const;

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::int64_t next_seq_ = 0;
};

// Reads a log without opening it for writing. A missing file is an empty
// log; a corrupted final line is skipped with a warning; a corrupted line
// anywhere else is an io error.
LoadResult load_records(const std::string& log_path, const LoadFilter& filter = {});
std::int64_t append_record(const std::string& log_path, std::string_view kind,
                           const nlohmann::json& record);

struct ModelRegistryEntry {
  std::string model_id;
  std::optional<std::string> parent_model_id;
  std::int64_t created_at = 0;
  std::string dataset_ref;
  SamplingParams params;

  bool operator==(const ModelRegistryEntry&) const = default;
};

enum class RunKind { dataset_gen, inference, loop, eval };
enum class RunStatus { running, succeeded, failed };

std::string_view to_string(RunKind kind);
RunKind run_kind_from_string(std::string_view s);
std::string_view to_string(RunStatus status);
RunStatus run_status_from_string(std::string_view s);

struct RunRecord {
  std::string run_id;
  RunKind kind = RunKind::inference;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::string> artifacts;
  RunStatus status = RunStatus::running;
  std::int64_t created_at = 0;
  std::int64_t updated_at = 0;
  nlohmann::json detail = nullptr;

  bool terminal() const { return status != RunStatus::running; }
};

// Data directory layout:
//   datasets/*.jsonl   feedback/feedback.jsonl   snapshots/state-*.json
//   runs/runs.jsonl    registry/models.jsonl     runs/latency.jsonl
//   registry/jobs.jsonl
// Locators handed out are paths relative to the data directory.
class Store {
 public:
  explicit Store(std::string data_dir);
  // DATA_DIR, default "data".
  static std::string data_dir_from_env();

  const std::string& root() const { return root_; }
  std::string resolve(std::string_view locator) const;
  std::string dataset_dir() const;

  // `extra` fields (request id, step result) are merged into the row.
  std::int64_t append_feedback(const Feedback& f, const nlohmann::json& extra = nullptr);
  LoadResult load_feedback() const;

  std::string snapshot_state(const LoopState& state,
                             std::optional<std::int64_t> time_ms = std::nullopt);
  LoopState restore_state(const std::string& locator) const;
  std::optional<std::string> latest_snapshot() const;

  // Rejects duplicate ids and unknown parents, which keeps the chain acyclic.
  void register_model(const ModelRegistryEntry& entry);
  std::vector<ModelRegistryEntry> models() const;
  std::optional<ModelRegistryEntry> find_model(const std::string& model_id) const;
  // Root first, ending at model_id.
  std::vector<std::string> model_chain(const std::string& model_id) const;

  RunRecord start_run(RunKind kind, nlohmann::json config);
  // Terminal statuses are final; updating one is a validation error.
  RunRecord finish_run(const std::string& run_id, RunStatus status,
                       std::vector<std::string> artifacts, nlohmann::json detail = nullptr);
  std::optional<RunRecord> find_run(const std::string& run_id) const;
  std::vector<RunRecord> runs() const;

  std::int64_t append_latency(const nlohmann::json& latency_record);
  LoadResult load_latency() const;

  std::int64_t append_job(const nlohmann::json& job_record);
  LoadResult load_jobs() const;

 private:
  std::string root_;
  EventLog feedback_;
  EventLog registry_;
  EventLog runs_;
  EventLog latency_;
  EventLog jobs_;
  mutable std::mutex mu_;
  std::map<std::string, ModelRegistryEntry> models_;
  std::vector<std::string> model_order_;
  std::map<std::string, RunRecord> runs_by_id_;
  std::int64_t run_counter_ = 0;
};

void to_json(nlohmann::json& j, const LogRecord& r);
void to_json(nlohmann::json& j, const ModelRegistryEntry& e);
void from_json(const nlohmann::json& j, ModelRegistryEntry& e);
void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);

}  // namespace dtwin
