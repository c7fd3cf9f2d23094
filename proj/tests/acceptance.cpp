// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dtwin/dataset_gen.hpp"
#include "dtwin/evalsuite.hpp"
#include "dtwin/gateway.hpp"
#include "dtwin/inference.hpp"
#include "dtwin/instauf.hpp"
#include "dtwin/text.hpp"
#include "test_support.hpp"

using namespace dtwin;
using dtwin::testing::TempDir;
using nlohmann::json;

namespace {

struct Check {
  std::ostringstream why;
  bool ok = true;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) why << what;
    ok = ok && cond;
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---- 1. classification metrics -------------------------------------------

double ratio(double num, double den) { return den == 0 ? 0.0 : num / den; }

double auc_by_pairs(const std::vector<PredictionRecord>& recs, int c) {
  double wins = 0;
  long pairs = 0;
  for (const auto& p : recs) {
    if (p.true_label != c) continue;
    for (const auto& n : recs) {
      if (n.true_label == c) continue;
      const double sp = (*p.scores)[c], sn = (*n.scores)[c];
      wins += sp > sn ? 1.0 : (sp == sn ? 0.5 : 0.0);
      ++pairs;
    }
  }
  return pairs == 0 ? NAN : wins / static_cast<double>(pairs);
}

void criterion_metrics(Check& chk, std::string& detail) {
  const auto t0 = Clock::now();
  std::mt19937 rng(1);
  int auc_compared = 0, auc_rejected = 0;
  for (int inst = 0; inst < 1000 && chk.ok; ++inst) {
    const int n = 1 + static_cast<int>(rng() % 6);
    const int m = 1 + static_cast<int>(rng() % 50);
    const bool coarse = rng() % 2 == 0;
    std::vector<PredictionRecord> recs(m);
    for (auto& r : recs) {
      r.true_label = static_cast<int>(rng() % n);
      r.predicted_label = static_cast<int>(rng() % n);
      std::vector<double> s(n);
      for (auto& x : s) x = coarse ? static_cast<double>(rng() % 4) / 4.0 : std::generate_canonical<double, 53>(rng);
      r.scores = s;
    }

    const auto rep = classification_metrics(recs, n);
    double mp = 0, mr = 0, mf = 0;
    for (int c = 0; c < n; ++c) {
      long tp = 0, fp = 0, fn = 0, tn = 0;
      for (const auto& r : recs) {
        const bool t = r.true_label == c, p = r.predicted_label == c;
        tp += t && p;
        fp += !t && p;
        fn += t && !p;
        tn += !t && !p;
      }
      const double p = ratio(tp, tp + fp), rc = ratio(tp, tp + fn), f = ratio(2 * p * rc, p + rc);
      mp += p;
      mr += rc;
      mf += f;
      const auto& got = rep.per_class[c];
      chk.expect(got.tp == tp && got.fp == fp && got.fn == fn && got.tn == tn,
                 "confusion counts differ on instance " + std::to_string(inst));
      chk.expect(std::abs(got.precision - p) <= 1e-9 && std::abs(got.recall - rc) <= 1e-9 &&
                     std::abs(got.f1 - f) <= 1e-9,
                 "per-class ratios differ on instance " + std::to_string(inst));
    }
    chk.expect(std::abs(rep.macro_precision - mp / n) <= 1e-9 && std::abs(rep.macro_recall - mr / n) <= 1e-9 &&
                   std::abs(rep.macro_f1 - mf / n) <= 1e-9,
               "macro averages differ on instance " + std::to_string(inst));

    double sum = 0;
    int kept = 0;
    std::vector<double> per(n);
    for (int c = 0; c < n; ++c) {
      per[c] = auc_by_pairs(recs, c);
      if (!std::isnan(per[c])) {
        sum += per[c];
        ++kept;
      }
    }
    if (kept == 0) {
      bool threw = false;
      try {
        auc_ovr(recs, n);
      } catch (const Error& e) {
        threw = e.code() == ErrorCode::validation;
      }
      chk.expect(threw, "auc_ovr accepted an instance with no usable class");
      ++auc_rejected;
      continue;
    }
    const auto auc = auc_ovr(recs, n);
    chk.expect(std::abs(auc.macro_auc - sum / kept) <= 1e-9, "macro AUC differs on instance " + std::to_string(inst));
    for (int c = 0; c < n; ++c) {
      chk.expect(std::isnan(per[c]) ? std::isnan(auc.per_class[c]) : std::abs(auc.per_class[c] - per[c]) <= 1e-9,
                 "per-class AUC differs on instance " + std::to_string(inst));
    }
    ++auc_compared;
  }
  const double secs = seconds_since(t0);
  chk.expect(secs < 10.0, "runtime over 10 s");
  std::ostringstream d;
  d << "1000 instances, " << auc_compared << " AUC compared, " << auc_rejected << " AUC rejected, " << secs << " s";
  detail = d.str();
}

// ---- 2. ROUGE-L ------------------------------------------------------------

std::size_t lcs_memo(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == a.size() || j == b.size()) return 0;
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const std::size_t v = a[i] == b[j] ? 1 + go(i + 1, j + 1) : std::max(go(i + 1, j), go(i, j + 1));
    memo[key] = v;
    return v;
  };
  return go(0, 0);
}

void criterion_rouge(Check& chk, std::string& detail) {
  std::mt19937 rng(2);
  for (int i = 0; i < 500 && chk.ok; ++i) {
    auto gen = [&] {
      std::vector<std::string> v(rng() % 31);
      for (auto& t : v) t = "t" + std::to_string(rng() % 8);
      return v;
    };
    const auto a = gen(), b = gen();
    const double l = static_cast<double>(lcs_memo(a, b));
    const double p = a.empty() ? 0 : l / a.size(), r = b.empty() ? 0 : l / b.size();
    const double f = p + r == 0 ? 0 : 2 * p * r / (p + r);
    const auto got = rouge_l(std::span<const std::string>(a), std::span<const std::string>(b));
    chk.expect(got.lcs_length == lcs_memo(a, b) && std::abs(got.precision - p) <= 1e-12 &&
                   std::abs(got.recall - r) <= 1e-12 && std::abs(got.f_measure - f) <= 1e-12,
               "pair " + std::to_string(i) + " differs");
  }
  const auto cat = rouge_l(std::string_view("the cat sat"), std::string_view("the cat ran"));
  chk.expect(cat.f_measure == 2.0 / 3.0, "worked case is not exactly 2/3");
  detail = "500 pairs, worked case F = " + std::to_string(cat.f_measure);
}

// ---- 3. dataset generation -------------------------------------------------

void criterion_dataset(Check& chk, std::string& detail) {
  const std::vector<std::string> texts = {"A crack on the rail", "Corrosion at the joint", "A missing bolt"};
  std::vector<CaptionRecord> caps;
  for (std::size_t i = 0; i < texts.size(); ++i) caps.push_back({"c" + std::to_string(i + 1), std::nullopt, "manual", texts[i], {}, {}});
  GenerationPolicy policy;
  policy.k_max = 5;
  auto backends = dtwin::testing::mock_set();
  const auto out = compile_dataset(caps, policy, "You are a railway defect analyst.", backends);
  chk.expect(out.entries.size() == 15, "expected 15 entries, got " + std::to_string(out.entries.size()));
  std::set<std::string> seen;
  std::map<std::string, int> cap_complexity;
  for (const auto& c : caps) cap_complexity[c.id] = complexity_score(c.text);
  for (const auto& e : out.entries) {
    chk.expect(seen.insert(text::normalize(e.response)).second, "duplicate entry after normalization");
    chk.expect(e.sample.complexity >= cap_complexity[e.sample.caption_id], "sample simpler than its caption");
    chk.expect(e.sample.complexity == complexity_score(e.response), "stored complexity is stale");
  }

  MockConfig dup;
  dup.fixed_reply = "PROMPT: describe\nRESPONSE: A long crack on the rail near the joint.";
  auto dup_backends = dtwin::testing::mock_set(dup);
  GenerationPolicy small;
  small.k_max = 3;
  small.max_attempts = 5;
  const auto r = rephrase_caption(caps[0], small, dup_backends);
  const std::string want = "caption c1: accepted 1 of 3 samples after 5 attempts";
  chk.expect(r.samples.size() == 1, "duplicate fixture accepted " + std::to_string(r.samples.size()));
  chk.expect(r.warning && *r.warning == want, "warning was '" + r.warning.value_or("") + "'");
  detail = std::to_string(out.entries.size()) + " entries; fixture warning: " + r.warning.value_or("none");
}

// ---- 4. satisfaction trace -------------------------------------------------

struct LoopHarness {
  explicit LoopHarness(LoopConfig c) : backends(dtwin::testing::mock_set()), cfg(std::move(c)) {
    cfg.generation.k_max = 1;
    cfg.generation.max_attempts = 2;
    deps.backends = &backends;
    deps.dataset_dir = dir.file("datasets");
    deps.finetune = {std::chrono::milliseconds(1), std::chrono::seconds(5)};
  }
  TempDir dir;
  BackendSet backends;
  LoopConfig cfg;
  LoopDeps deps;
};

void criterion_trace(Check& chk, std::string& detail) {
  LoopConfig cfg;
  cfg.ft_interval = 3;
  cfg.satisfaction_threshold = 70;
  cfg.ema_alpha = 1.0;
  LoopHarness h(cfg);
  const std::vector<int> scores = {9, 8, 10, 6, 7, 9, 5, 8, 8, 8, 3, 10, 7, 7, 9, 2, 9, 9, 9, 7};
  const std::vector<double> raw = {90, 80, 100, 60, 70, 90, 50, 80, 80, 80, 30, 100, 70, 70, 90, 20, 90, 90, 90, 70};
  const std::vector<double> after = {90, 80, 100, 100, 70, 90, 100, 80, 80, 100,
                                     100, 100, 70, 100, 90, 100, 90, 90, 100, 70};
  const std::set<int> ft_steps = {3, 4, 7, 10, 11, 14, 16, 19};
  auto s = initial_state(h.cfg, "defect-llm", "You inspect rails.");
  for (int k : scores) step(s, parse_feedback(std::nullopt, k), h.cfg, h.deps);
  chk.expect(s.trace.size() == 20, "trace length");
  for (std::size_t i = 0; i < s.trace.size() && i < 20; ++i) {
    const auto& t = s.trace[i];
    const int it = static_cast<int>(i) + 1;
    chk.expect(t.satisfaction_raw == raw[i], "raw S differs at step " + std::to_string(it));
    chk.expect(t.satisfaction == after[i], "S differs at step " + std::to_string(it));
    chk.expect((t.action == LoopAction::finetuned) == (ft_steps.count(it) == 1),
               "fine-tune placement differs at step " + std::to_string(it));
  }
  chk.expect(s.ft_count == 8, "FT = " + std::to_string(s.ft_count));
  detail = "20 steps, FT = " + std::to_string(s.ft_count);
}

// ---- 5. fine-tune count bound -----------------------------------------------

void criterion_bound(Check& chk, std::string& detail) {
  std::mt19937 rng(5);
  const std::vector<std::string> remarks = {"accurate and helpful", "missed the cracks", "the rail looks fine",
                                            "wrong location, poor result"};
  int never_crossing = 0;
  for (int sidx = 0; sidx < 200 && chk.ok; ++sidx) {
    LoopConfig cfg;
    cfg.ft_interval = 1 + static_cast<int>(rng() % 6);
    cfg.satisfaction_threshold = 50 + static_cast<double>(rng() % 40);
    cfg.ema_alpha = 0.1 + 0.9 * std::generate_canonical<double, 53>(rng);
    LoopHarness h(cfg);
    const bool calm = sidx % 2 == 0;
    const int len = static_cast<int>(rng() % 101);
    std::vector<Feedback> fs;
    for (int i = 0; i < len; ++i) {
      if (calm) {
        fs.push_back(parse_feedback(std::nullopt, 9 + static_cast<int>(rng() % 2)));
      } else if (rng() % 3 == 0) {
        fs.push_back(parse_feedback(remarks[rng() % remarks.size()], std::nullopt));
      } else {
        fs.push_back(parse_feedback(std::nullopt, 1 + static_cast<int>(rng() % 10)));
      }
    }
    auto s = initial_state(h.cfg, "defect-llm", "You inspect rails.");
    const auto rep = run_loop(s, fs, h.cfg, h.deps);
    const int T = rep.iterations;
    int crossings = 0;
    for (const auto& t : rep.trace) crossings += t.satisfaction_raw < cfg.satisfaction_threshold;
    const int bound = T / cfg.ft_interval + crossings;
    chk.expect(rep.ft_count <= bound, "stream " + std::to_string(sidx) + ": FT " + std::to_string(rep.ft_count) +
                                          " > " + std::to_string(bound));
    if (crossings == 0) {
      ++never_crossing;
      chk.expect(rep.ft_count == T / cfg.ft_interval, "stream " + std::to_string(sidx) + ": FT != floor(T/alpha)");
    }
  }
  chk.expect(never_crossing >= 50, "too few non-crossing streams");
  detail = "200 streams, " + std::to_string(never_crossing) + " never crossed";
}

// ---- 6. latency and tokens -------------------------------------------------

EngineConfig service_config(const TempDir& dir) {
  EngineConfig c = config_from_json({{"backend", "mock"}, {"data_dir", dir.file("data")}});
  c.loop.ft_interval = 3;
  c.loop.generation.k_max = 1;
  c.loop.generation.max_attempts = 2;
  c.finetune.poll_interval = std::chrono::milliseconds(1);
  c.retry.base_backoff = std::chrono::milliseconds(1);
  return c;
}

void criterion_latency(Check& chk, std::string& detail) {
  TempDir dir;
  const int d = 20;
  MockConfig mock;
  mock.delay = std::chrono::milliseconds(d);
  auto backends = dtwin::testing::mock_set(mock);
  ManifestFrameExtractor extractor(dir.file("frames"));
  std::vector<LatencyRecord> records;
  std::ostringstream dd;
  for (int n : {1, 5, 10}) {
    const auto path = dir.file("clip" + std::to_string(n) + ".json");
    dtwin::testing::write_file(path, json{{"duration_s", n}}.dump());
    MultimodalInput in;
    in.text = "inspect the track";
    in.video = path;
    const auto raw = infer(in, route(in), backends, {}, &extractor);
    chk.expect(raw.frames == static_cast<std::size_t>(n), "frame count for n=" + std::to_string(n));
    chk.expect(raw.usage.latency_ms >= static_cast<std::int64_t>(n) * d,
               "latency below n*d for n=" + std::to_string(n));
    std::int64_t tokens = 0, latency = 0;
    for (const auto& st : raw.steps) {
      tokens += st.usage.tokens();
      latency += st.usage.latency_ms;
    }
    chk.expect(tokens == raw.usage.tokens(), "token total is not the step sum for n=" + std::to_string(n));
    chk.expect(latency == raw.usage.latency_ms, "latency total is not the step sum for n=" + std::to_string(n));
    records.push_back({static_cast<std::int64_t>(raw.frames), raw.usage.tokens(), raw.usage.latency_ms, "video"});
    dd << "n=" << n << ": " << raw.usage.latency_ms << " ms, " << raw.usage.tokens() << " tokens; ";
  }
  const auto groups = latency_report(records);
  chk.expect(groups.size() == 3, "expected 3 latency groups");
  for (std::size_t i = 1; i < groups.size(); ++i) {
    chk.expect(groups[i].mean_latency_ms > groups[i - 1].mean_latency_ms, "latency groups not strictly increasing");
  }
  detail = dd.str() + "groups increasing";
}

// ---- 7. determinism and durability ----------------------------------------

std::vector<json> feedback_stream() {
  std::vector<json> out;
  std::mt19937 rng(7);
  const std::vector<std::string> remarks = {"Missed the small cracks near the joint.", "Accurate and clear.",
                                            "The size estimate was wrong."};
  for (int i = 0; i < 30; ++i) {
    json f = {{"score", 1 + static_cast<int>(rng() % 10)}};
    if (rng() % 2) f["text"] = remarks[rng() % remarks.size()];
    out.push_back(f);
  }
  return out;
}

void criterion_durability(Check& chk, std::string& detail) {
  const auto stream = feedback_stream();
  auto run_all = [&](const TempDir& dir) {
    Service svc(service_config(dir));
    for (const auto& f : stream) {
      try {
        svc.handle_feedback(f);
      } catch (const ApiException&) {
      }
    }
    return svc.loop_report().dump();
  };
  TempDir a, b, c;
  const auto first = run_all(a);
  const auto second = run_all(b);
  chk.expect(first == second, "replayed LoopReport differs");

  {
    Service svc(service_config(c));
    for (std::size_t i = 0; i < 13; ++i) svc.handle_feedback(stream[i]);
  }
  Service restarted(service_config(c));
  for (std::size_t i = 13; i < stream.size(); ++i) restarted.handle_feedback(stream[i]);
  const auto resumed = restarted.loop_report();
  chk.expect(resumed.dump() == first, "restarted run diverges from the uninterrupted run");
  const auto& trace = resumed.at("trace");
  for (std::size_t i = 0; i < trace.size(); ++i) {
    chk.expect(trace[i].at("iteration") == i + 1, "trace gap at " + std::to_string(i + 1));
  }
  detail = std::to_string(trace.size()) + " steps, report " + std::to_string(first.size()) + " bytes, ft_count " +
           resumed.at("ft_count").dump();
}

// ---- 8. CLI pipeline -------------------------------------------------------

std::vector<json> read_jsonl(const std::string& path) {
  std::vector<json> rows;
  std::istringstream in(dtwin::testing::read_file(path));
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(json::parse(line));
  return rows;
}

bool has_keys(const json& j, std::initializer_list<const char*> keys) {
  for (const char* k : keys)
    if (!j.contains(k)) return false;
  return true;
}

void criterion_cli(Check& chk, std::string& detail) {
  TempDir dir;
  const auto t0 = Clock::now();
  const std::string dt = "env -u BACKEND_BASE_URL -u BACKEND_KIND " + std::string(DT_BINARY) +
                         " --backend mock --data-dir " + dir.file("data") + " ";
  dtwin::testing::write_file(dir.file("captions.jsonl"),
                             "{\"id\":\"c1\",\"template_id\":\"manual\",\"text\":\"A crack on the rail\"}\n"
                             "{\"id\":\"c2\",\"template_id\":\"manual\",\"text\":\"Corrosion at the joint\"}\n"
                             "A missing bolt\n");
  std::string fb;
  for (int i = 0; i < 12; ++i) fb += json{{"score", 3 + (i * 7) % 8}, {"text", "Missed the hairline cracks."}}.dump() + "\n";
  dtwin::testing::write_file(dir.file("feedback.jsonl"), fb);
  dtwin::testing::write_file(dir.file("pred.jsonl"),
                             "{\"true_label\":\"crack\",\"predicted_label\":\"crack\",\"scores\":{\"crack\":0.8,\"rust\":0.2}}\n"
                             "{\"true_label\":\"rust\",\"predicted_label\":\"crack\",\"scores\":{\"crack\":0.6,\"rust\":0.4}}\n"
                             "{\"true_label\":\"rust\",\"predicted_label\":\"rust\",\"scores\":{\"crack\":0.1,\"rust\":0.9}}\n");

  auto gen = dtwin::testing::run_command(dt + "dataset generate --captions " + dir.file("captions.jsonl") +
                                             " --k 5 --out " + dir.file("ds"),
                                         dir);
  chk.expect(gen.exit_code == 0, "dataset generate failed: " + gen.err);
  auto loop = dtwin::testing::run_command(dt + "-q loop run --feedback-file " + dir.file("feedback.jsonl") +
                                              " --alpha 3 --report " + dir.file("report.json"),
                                          dir);
  chk.expect(loop.exit_code == 0, "loop run failed: " + loop.err);
  auto eval = dtwin::testing::run_command(dt + "eval classify --json --in " + dir.file("pred.jsonl") + " --out " +
                                              dir.file("metrics.json"),
                                          dir);
  chk.expect(eval.exit_code == 0, "eval classify failed: " + eval.err);
  const double secs = seconds_since(t0);
  chk.expect(secs < 30.0, "pipeline over 30 s");
  if (!chk.ok) return;

  const auto dataset = read_jsonl(dir.file("ds/dataset.jsonl"));
  chk.expect(dataset.size() == 15, "dataset has " + std::to_string(dataset.size()) + " rows");
  for (const auto& r : dataset)
    chk.expect(has_keys(r, {"id", "caption_id", "system_message", "prompt", "response", "complexity", "attempt_index"}),
               "dataset row schema");

  std::size_t log_rows = 0;
  for (const char* log : {"feedback/feedback.jsonl", "runs/runs.jsonl", "registry/models.jsonl", "registry/jobs.jsonl"}) {
    const auto rows = read_jsonl(dir.file(std::string("data/") + log));
    chk.expect(!rows.empty(), std::string("empty log ") + log);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      chk.expect(has_keys(rows[i], {"seq", "kind", "time_ms", "record"}) && rows[i].at("seq") == i,
                 std::string("log row schema in ") + log);
    }
    log_rows += rows.size();
  }
  for (const auto& ft : std::filesystem::directory_iterator(dir.file("data/datasets"))) {
    for (const auto& r : read_jsonl(ft.path().string()))
      chk.expect(has_keys(r, {"id", "caption_id", "system_message", "prompt", "response"}), "fine-tune dataset schema");
  }

  const auto report = json::parse(dtwin::testing::read_file(dir.file("report.json")));
  chk.expect(has_keys(report, {"iterations", "ft_count", "model_chain", "trace", "warnings"}) &&
                 report.at("iterations") == 12,
             "loop report schema");
  chk.expect(report.at("model_chain").size() == static_cast<std::size_t>(report.at("ft_count").get<int>() + 1),
             "model chain length");
  const auto metrics = json::parse(dtwin::testing::read_file(dir.file("metrics.json")));
  chk.expect(has_keys(metrics, {"per_class", "macro_precision", "macro_recall", "macro_f1", "macro_auc"}) &&
                 metrics.at("macro_auc").get<double>() == 1.0,
             "metrics schema");
  std::ostringstream d;
  d << secs << " s, " << dataset.size() << " dataset rows, " << log_rows << " log rows, ft_count "
    << report.at("ft_count");
  detail = d.str();
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Check&, std::string&)>>> criteria = {
      {"metric oracles", criterion_metrics},
      {"ROUGE-L oracle", criterion_rouge},
      {"dataset generation invariants", criterion_dataset},
      {"satisfaction trace", criterion_trace},
      {"fine-tune count bound", criterion_bound},
      {"latency and token accounting", criterion_latency},
      {"determinism and durability", criterion_durability},
      {"CLI end-to-end", criterion_cli},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Check chk;
    std::string detail;
    try {
      criteria[i].second(chk, detail);
    } catch (const std::exception& e) {
      chk.expect(false, std::string("exception: ") + e.what());
    }
    std::cout << (chk.ok ? "PASS" : "FAIL") << "  criterion " << i + 1 << ": " << criteria[i].first << " ("
              << (chk.ok ? detail : chk.why.str()) << ")" << std::endl;
    failed += !chk.ok;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
