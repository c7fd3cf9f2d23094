#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dtwin/backends.hpp"

namespace dtwin {

struct PredictionRecord {
  int true_label = 0;
  int predicted_label = 0;
  std::optional<std::vector<double>> scores;  // one per class
};

struct ClassMetrics {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::int64_t support = 0;  // records whose true label is the class
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0;
  double macro_recall = 0;
  double macro_f1 = 0;
  std::optional<double> macro_auc;
  std::vector<double> per_class_auc;  // NaN for excluded classes
  std::vector<std::string> warnings;
};

// One-vs-rest confusion per class and unweighted macro averages over all
// num_classes classes. Ratios with a zero denominator are 0.
MetricsReport classification_metrics(std::span<const PredictionRecord> records,
                                     std::size_t num_classes);

struct AucResult {
  double macro_auc = 0;
  std::vector<double> per_class;  // NaN for excluded classes
  std::vector<std::string> warnings;
};

// Macro one-vs-rest rank AUC. Classes without positives or negatives are
// excluded with a warning; excluding every class is a validation error.
AucResult auc_ovr(std::span<const PredictionRecord> records, std::size_t num_classes);

struct RougeResult {
  double precision = 0;
  double recall = 0;
  double f_measure = 0;
  std::size_t lcs_length = 0;
};

// Lowercase, split on anything that is not [A-Za-z0-9_].
std::vector<std::string> rouge_tokens(std::string_view text);

RougeResult rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);
RougeResult rouge_l(std::string_view candidate, std::string_view reference);

struct RelevanceResult {
  double answer_relevance = 0;
  double context_relevance = 0;
};

// Cosine similarities rescaled from [-1,1] to [0,1]; context relevance is
// the mean over contexts and 0 when there are none.
RelevanceResult relevance(const std::string& question, const std::string& answer,
                          std::span<const std::string> contexts, const BackendSet& backends);

// First integer in 1..10 of the judge reply.
int parse_judge_score(std::string_view reply);
int usefulness(const std::string& response, const std::string& rubric, const BackendSet& backends);

struct LatencyRecord {
  std::int64_t frames = 0;
  std::int64_t tokens = 0;
  std::int64_t latency_ms = 0;
  std::string task;
};

struct LatencyGroup {
  std::int64_t frames = 0;
  std::size_t count = 0;
  double mean_latency_ms = 0;
  double mean_tokens = 0;
};

// Groups by frame count, ascending.
std::vector<LatencyGroup> latency_report(std::span<const LatencyRecord> records);
std::string latency_csv(std::span<const LatencyGroup> groups);

// A reference row shown next to a computed report.
struct BaselineRow {
  std::string label;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double auc = 0;
};

std::optional<BaselineRow> builtin_baseline(std::string_view name);

// Plain-text table of macro metrics, one row per report plus baselines.
std::string metrics_table(const MetricsReport& report, std::span<const BaselineRow> baselines);

struct ClassificationInput {
  std::vector<std::string> class_names;
  std::vector<PredictionRecord> records;
};

// JSONL rows {true_label, predicted_label, scores?}. Labels are class
// names or integer ids; scores are an array in class order or an object
// keyed by class name. `classes` fixes the class order when non-empty;
// otherwise names are ordered by first appearance.
ClassificationInput read_predictions_jsonl(const std::string& path,
                                           std::vector<std::string> classes = {});

struct RougeRow {
  std::string candidate;
  std::string reference;
};
std::vector<RougeRow> read_rouge_jsonl(const std::string& path);

struct RelevanceRow {
  std::string question;
  std::string answer;
  std::vector<std::string> contexts;
  std::optional<std::string> reference;
};
std::vector<RelevanceRow> read_relevance_jsonl(const std::string& path);

std::vector<LatencyRecord> read_latency_jsonl(const std::string& path);

void to_json(nlohmann::json& j, const MetricsReport& r);
void to_json(nlohmann::json& j, const RougeResult& r);
void to_json(nlohmann::json& j, const RelevanceResult& r);
void to_json(nlohmann::json& j, const LatencyRecord& r);
void from_json(const nlohmann::json& j, LatencyRecord& r);
void to_json(nlohmann::json& j, const LatencyGroup& g);

}  // namespace dtwin
