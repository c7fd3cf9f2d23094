#include "dtwin/evalsuite.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "dtwin/error.hpp"
#include "dtwin/kernels.hpp"
#include "dtwin/text.hpp"

namespace dtwin {

namespace {

double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

double harmonic(double p, double r) { return p + r == 0 ? 0.0 : 2 * p * r / (p + r); }

void check_records(std::span<const PredictionRecord> records, std::size_t num_classes) {
  require(!records.empty(), "no prediction records");
  require(num_classes >= 1, "need at least one class");
  const auto n = static_cast<int>(num_classes);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.true_label < 0 || r.true_label >= n || r.predicted_label < 0 || r.predicted_label >= n) {
      fail(ErrorCode::validation, "record " + std::to_string(i) + ": unknown label");
    }
    if (r.scores) {
      require(r.scores->size() == num_classes,
              "record " + std::to_string(i) + ": scores must cover all classes");
      for (double s : *r.scores) {
        require(std::isfinite(s), "record " + std::to_string(i) + ": scores must be finite");
      }
    }
  }
}

template <typename Fn>
void for_each_jsonl(const std::string& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io, "cannot read " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    if (j.is_discarded() || !j.is_object()) fail(ErrorCode::validation, where + "not a JSON object");
    try {
      fn(j);
    } catch (const Error& e) {
      fail(e.code(), where + e.what());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::validation, where + e.what());
    }
  }
}

std::string get_string(const nlohmann::json& j, const char* key) {
  require(j.contains(key) && j.at(key).is_string(), std::string("missing string field '") + key + "'");
  return j.at(key).get<std::string>();
}

}  // namespace

MetricsReport classification_metrics(std::span<const PredictionRecord> records,
                                     std::size_t num_classes) {
  check_records(records, num_classes);
  MetricsReport report;
  report.per_class.resize(num_classes);
  const auto total = static_cast<std::int64_t>(records.size());
  for (const auto& r : records) {
    if (r.true_label == r.predicted_label) {
      ++report.per_class[r.true_label].tp;
    } else {
      ++report.per_class[r.predicted_label].fp;
      ++report.per_class[r.true_label].fn;
    }
  }
  for (auto& c : report.per_class) {
    c.tn = total - c.tp - c.fp - c.fn;
    c.support = c.tp + c.fn;
    c.precision = ratio(c.tp, c.tp + c.fp);
    c.recall = ratio(c.tp, c.tp + c.fn);
    c.f1 = harmonic(c.precision, c.recall);
    report.macro_precision += c.precision;
    report.macro_recall += c.recall;
    report.macro_f1 += c.f1;
  }
  const auto k = static_cast<double>(num_classes);
  report.macro_precision /= k;
  report.macro_recall /= k;
  report.macro_f1 /= k;

  const bool all_scored = std::all_of(records.begin(), records.end(),
                                      [](const PredictionRecord& r) { return r.scores.has_value(); });
  if (all_scored) {
    try {
      auto auc = auc_ovr(records, num_classes);
      report.macro_auc = auc.macro_auc;
      report.per_class_auc = std::move(auc.per_class);
      report.warnings = std::move(auc.warnings);
    } catch (const Error& e) {
      report.warnings.push_back(std::string("AUC unavailable: ") + e.what());
    }
  }
  return report;
}

AucResult auc_ovr(std::span<const PredictionRecord> records, std::size_t num_classes) {
  check_records(records, num_classes);
  std::vector<double> scores;
  scores.reserve(records.size() * num_classes);
  std::vector<int> labels;
  labels.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    require(records[i].scores.has_value(), "record " + std::to_string(i) + ": scores missing");
    scores.insert(scores.end(), records[i].scores->begin(), records[i].scores->end());
    labels.push_back(records[i].true_label);
  }
  AucResult out;
  out.per_class = kernels::per_class_auc(scores, labels, num_classes);
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (std::isnan(out.per_class[c])) {
      out.warnings.push_back("class " + std::to_string(c) +
                             " excluded from AUC: no positives or no negatives");
    } else {
      sum += out.per_class[c];
      ++used;
    }
  }
  require(used > 0, "AUC undefined: every class lacks positives or negatives");
  out.macro_auc = sum / static_cast<double>(used);
  return out;
}

std::vector<std::string> rouge_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '_') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

RougeResult rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  RougeResult r;
  r.lcs_length = kernels::lcs_length(candidate, reference);
  const auto lcs = static_cast<std::int64_t>(r.lcs_length);
  r.precision = ratio(lcs, static_cast<std::int64_t>(candidate.size()));
  r.recall = ratio(lcs, static_cast<std::int64_t>(reference.size()));
  r.f_measure = harmonic(r.precision, r.recall);
  return r;
}

RougeResult rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = rouge_tokens(candidate);
  const auto r = rouge_tokens(reference);
  return rouge_l(std::span<const std::string>(c), std::span<const std::string>(r));
}

RelevanceResult relevance(const std::string& question, const std::string& answer,
                          std::span<const std::string> contexts, const BackendSet& backends) {
  require(!text::trim(question).empty(), "question must be non-empty");
  require(!text::trim(answer).empty(), "answer must be non-empty");
  auto rescale = [](double c) { return std::clamp((c + 1.0) / 2.0, 0.0, 1.0); };
  const auto q = embed(question, backends);
  RelevanceResult out;
  out.answer_relevance = rescale(cosine(q, embed(answer, backends)));
  if (!contexts.empty()) {
    double sum = 0;
    for (const auto& c : contexts) sum += rescale(cosine(q, embed(c, backends)));
    out.context_relevance = sum / static_cast<double>(contexts.size());
  }
  return out;
}

int parse_judge_score(std::string_view reply) {
  std::size_t i = 0;
  while (i < reply.size()) {
    if (!std::isdigit(static_cast<unsigned char>(reply[i]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < reply.size() && std::isdigit(static_cast<unsigned char>(reply[j]))) ++j;
    const auto run = reply.substr(i, j - i);
    if (run.size() <= 2) {
      const int v = std::stoi(std::string(run));
      if (v >= 1 && v <= 10) return v;
    }
    i = j;
  }
  fail(ErrorCode::scoring, "judge reply has no integer in 1..10", {{"reply", std::string(reply)}});
}

int usefulness(const std::string& response, const std::string& rubric, const BackendSet& backends) {
  require(!text::trim(response).empty(), "response must be non-empty");
  ComposedPrompt p;
  p.system = "You are a strict evaluator. Rate the response on a scale of 1 to 10.";
  p.user = "Rubric:\n" + rubric + "\n\nResponse:\n" + response +
           "\n\nReply with the score as an integer from 1 to 10.";
  p.task = "judge";
  const auto c = chat(p, SamplingParams{1.0, 1, 0.0}, backends, ModelRole::judge);
  return parse_judge_score(c.text);
}

std::vector<LatencyGroup> latency_report(std::span<const LatencyRecord> records) {
  require(!records.empty(), "no latency records");
  std::map<std::int64_t, LatencyGroup> groups;
  for (const auto& r : records) {
    require(r.frames >= 0 && r.tokens >= 0 && r.latency_ms >= 0,
            "latency records must be non-negative");
    auto& g = groups[r.frames];
    g.frames = r.frames;
    ++g.count;
    g.mean_latency_ms += static_cast<double>(r.latency_ms);
    g.mean_tokens += static_cast<double>(r.tokens);
  }
  std::vector<LatencyGroup> out;
  for (auto& [frames, g] : groups) {
    g.mean_latency_ms /= static_cast<double>(g.count);
    g.mean_tokens /= static_cast<double>(g.count);
    out.push_back(g);
  }
  return out;
}

std::string latency_csv(std::span<const LatencyGroup> groups) {
  std::ostringstream out;
  out << "frames,mean_latency_ms,mean_tokens\n";
  out << std::setprecision(10);
  for (const auto& g : groups) out << g.frames << ',' << g.mean_latency_ms << ',' << g.mean_tokens << '\n';
  return out.str();
}

std::optional<BaselineRow> builtin_baseline(std::string_view name) {
  static const std::vector<std::pair<std::string_view, BaselineRow>> rows = {
      {"image-in-domain", {"reference image in-domain", 0.92, 0.93, 0.92, 0.93}},
      {"image-zero-shot", {"reference image zero-shot", 0.6, 0.65, 0.62, 0.63}},
      {"video-in-domain", {"reference video in-domain", 0.76, 0.74, 0.77, 0.77}},
      {"video-zero-shot", {"reference video zero-shot", 0.55, 0.58, 0.55, 0.57}},
  };
  for (const auto& [key, row] : rows)
    if (key == name) return row;
  return std::nullopt;
}

std::string metrics_table(const MetricsReport& report, std::span<const BaselineRow> baselines) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << std::left << std::setw(28) << "model" << std::right << std::setw(10) << "precision"
      << std::setw(10) << "recall" << std::setw(10) << "f1" << std::setw(10) << "auc" << '\n';
  auto row = [&](const std::string& label, double p, double r, double f, std::optional<double> auc) {
    out << std::left << std::setw(28) << label << std::right << std::setw(10) << p << std::setw(10)
        << r << std::setw(10) << f << std::setw(10);
    if (auc) {
      out << *auc;
    } else {
      out << "-";
    }
    out << '\n';
  };
  row("evaluated", report.macro_precision, report.macro_recall, report.macro_f1, report.macro_auc);
  for (const auto& b : baselines) row(b.label, b.precision, b.recall, b.f1, b.auc);
  return out.str();
}

ClassificationInput read_predictions_jsonl(const std::string& path,
                                           std::vector<std::string> classes) {
  ClassificationInput in;
  const bool fixed = !classes.empty();
  in.class_names = std::move(classes);
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < in.class_names.size(); ++i) {
    require(index.emplace(in.class_names[i], static_cast<int>(i)).second,
            "duplicate class name " + in.class_names[i]);
  }
  auto label_of = [&](const nlohmann::json& v) -> int {
    if (v.is_number_integer()) {
      const int id = v.get<int>();
      require(id >= 0, "negative class id");
      if (!fixed) {
        while (static_cast<int>(in.class_names.size()) <= id) {
          const std::string name = std::to_string(in.class_names.size());
          index.emplace(name, static_cast<int>(in.class_names.size()));
          in.class_names.push_back(name);
        }
      }
      require(id < static_cast<int>(in.class_names.size()), "unknown class id " + std::to_string(id));
      return id;
    }
    require(v.is_string(), "labels must be class names or integer ids");
    const auto name = v.get<std::string>();
    if (auto it = index.find(name); it != index.end()) return it->second;
    require(!fixed, "unknown label '" + name + "'");
    const int id = static_cast<int>(in.class_names.size());
    index.emplace(name, id);
    in.class_names.push_back(name);
    return id;
  };

  std::vector<nlohmann::json> raw_scores;
  for_each_jsonl(path, [&](const nlohmann::json& j) {
    require(j.contains("true_label") && j.contains("predicted_label"),
            "rows need true_label and predicted_label");
    PredictionRecord r;
    r.true_label = label_of(j.at("true_label"));
    r.predicted_label = label_of(j.at("predicted_label"));
    in.records.push_back(r);
    raw_scores.push_back(j.contains("scores") ? j.at("scores") : nlohmann::json());
    if (raw_scores.back().is_object()) {
      for (const auto& [name, _] : raw_scores.back().items()) label_of(name);
    }
  });

  // Scores resolve after every class name has been seen.
  const std::size_t k = in.class_names.size();
  for (std::size_t i = 0; i < in.records.size(); ++i) {
    const auto& s = raw_scores[i];
    if (s.is_null()) continue;
    std::vector<double> v(k, 0.0);
    if (s.is_array()) {
      require(s.size() == k, "row " + std::to_string(i + 1) + ": scores must cover all classes");
      for (std::size_t c = 0; c < k; ++c) v[c] = s.at(c).get<double>();
    } else {
      require(s.is_object(), "scores must be an array or an object");
      require(s.size() == k, "row " + std::to_string(i + 1) + ": scores must cover all classes");
      for (const auto& [name, val] : s.items()) v[index.at(name)] = val.get<double>();
    }
    in.records[i].scores = std::move(v);
  }
  return in;
}

std::vector<RougeRow> read_rouge_jsonl(const std::string& path) {
  std::vector<RougeRow> rows;
  for_each_jsonl(path, [&](const nlohmann::json& j) {
    const char* cand = j.contains("candidate") ? "candidate" : "answer";
    rows.push_back({get_string(j, cand), get_string(j, "reference")});
  });
  return rows;
}

std::vector<RelevanceRow> read_relevance_jsonl(const std::string& path) {
  std::vector<RelevanceRow> rows;
  for_each_jsonl(path, [&](const nlohmann::json& j) {
    RelevanceRow r;
    r.question = get_string(j, "question");
    r.answer = get_string(j, "answer");
    if (j.contains("contexts")) r.contexts = j.at("contexts").get<std::vector<std::string>>();
    if (j.contains("reference") && j.at("reference").is_string()) {
      r.reference = j.at("reference").get<std::string>();
    }
    rows.push_back(std::move(r));
  });
  return rows;
}

std::vector<LatencyRecord> read_latency_jsonl(const std::string& path) {
  std::vector<LatencyRecord> rows;
  for_each_jsonl(path, [&](const nlohmann::json& j) { rows.push_back(j.get<LatencyRecord>()); });
  return rows;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    nlohmann::json row = {{"class", c < r.class_names.size() ? r.class_names[c] : std::to_string(c)},
                          {"precision", m.precision},
                          {"recall", m.recall},
                          {"f1", m.f1},
                          {"support", m.support},
                          {"tp", m.tp},
                          {"fp", m.fp},
                          {"fn", m.fn},
                          {"tn", m.tn}};
    row["auc"] = c < r.per_class_auc.size() && !std::isnan(r.per_class_auc[c])
                     ? nlohmann::json(r.per_class_auc[c])
                     : nlohmann::json(nullptr);
    per.push_back(std::move(row));
  }
  j = {{"per_class", per},
       {"macro_precision", r.macro_precision},
       {"macro_recall", r.macro_recall},
       {"macro_f1", r.macro_f1},
       {"warnings", r.warnings}};
  j["macro_auc"] = r.macro_auc ? nlohmann::json(*r.macro_auc) : nullptr;
}

void to_json(nlohmann::json& j, const RougeResult& r) {
  j = {{"precision", r.precision},
       {"recall", r.recall},
       {"f_measure", r.f_measure},
       {"lcs_length", r.lcs_length}};
}

void to_json(nlohmann::json& j, const RelevanceResult& r) {
  j = {{"answer_relevance", r.answer_relevance}, {"context_relevance", r.context_relevance}};
}

void to_json(nlohmann::json& j, const LatencyRecord& r) {
  j = {{"frames", r.frames}, {"tokens", r.tokens}, {"latency_ms", r.latency_ms}, {"task", r.task}};
}

void from_json(const nlohmann::json& j, LatencyRecord& r) {
  r.frames = j.at("frames").get<std::int64_t>();
  r.tokens = j.at("tokens").get<std::int64_t>();
  r.latency_ms = j.at("latency_ms").get<std::int64_t>();
  r.task = j.value("task", std::string());
  require(r.frames >= 0 && r.tokens >= 0 && r.latency_ms >= 0, "latency fields must be non-negative");
}

void to_json(nlohmann::json& j, const LatencyGroup& g) {
  j = {{"frames", g.frames},
       {"count", g.count},
       {"mean_latency_ms", g.mean_latency_ms},
       {"mean_tokens", g.mean_tokens}};
}

}  // namespace dtwin
