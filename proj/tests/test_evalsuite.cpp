#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dtwin/error.hpp"
#include "dtwin/evalsuite.hpp"
#include "test_support.hpp"

using namespace dtwin;
using dtwin::testing::mock_set;
using dtwin::testing::TempDir;

namespace {

PredictionRecord rec(int t, int p, std::optional<std::vector<double>> s = std::nullopt) {
  return {t, p, std::move(s)};
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::internal;
}

}  // namespace

TEST(ClassificationMetrics, AllCorrect) {
  std::vector<PredictionRecord> r = {rec(0, 0), rec(1, 1), rec(2, 2), rec(1, 1)};
  auto m = classification_metrics(r, 3);
  EXPECT_DOUBLE_EQ(m.macro_precision, 1.0);
  EXPECT_DOUBLE_EQ(m.macro_recall, 1.0);
  EXPECT_DOUBLE_EQ(m.macro_f1, 1.0);
  EXPECT_EQ(m.per_class[1].support, 2);
}

TEST(ClassificationMetrics, BinaryHandConfusion) {
  // TP=2, FP=1, FN=1, TN=6 for class 1
  std::vector<PredictionRecord> r = {rec(1, 1), rec(1, 1), rec(0, 1), rec(1, 0)};
  for (int i = 0; i < 6; ++i) r.push_back(rec(0, 0));
  auto m = classification_metrics(r, 2);
  const auto& c = m.per_class[1];
  EXPECT_EQ(c.tp, 2);
  EXPECT_EQ(c.fp, 1);
  EXPECT_EQ(c.fn, 1);
  EXPECT_EQ(c.tn, 6);
  EXPECT_DOUBLE_EQ(c.precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(c.recall, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(c.f1, 2.0 / 3.0);
}

TEST(ClassificationMetrics, ZeroDivisionAndErrors) {
  std::vector<PredictionRecord> r = {rec(0, 0), rec(0, 0)};
  auto m = classification_metrics(r, 2);
  EXPECT_DOUBLE_EQ(m.per_class[1].precision, 0.0);
  EXPECT_DOUBLE_EQ(m.per_class[1].f1, 0.0);
  EXPECT_DOUBLE_EQ(m.macro_precision, 0.5);
  EXPECT_EQ(code_of([] { classification_metrics({}, 2); }), ErrorCode::validation);
  std::vector<PredictionRecord> bad = {rec(0, 5)};
  EXPECT_EQ(code_of([&] { classification_metrics(bad, 2); }), ErrorCode::validation);
}

TEST(Auc, EnumeratedPairs) {
  std::vector<PredictionRecord> r = {rec(1, 1, std::vector<double>{0.1, 0.9}),
                                     rec(1, 0, std::vector<double>{0.6, 0.4}),
                                     rec(0, 1, std::vector<double>{0.5, 0.5}),
                                     rec(0, 0, std::vector<double>{0.9, 0.1})};
  auto a = auc_ovr(r, 2);
  EXPECT_DOUBLE_EQ(a.per_class[1], 0.75);
}

TEST(Auc, PerfectAndInverted) {
  std::vector<PredictionRecord> r;
  for (int i = 0; i < 5; ++i) {
    r.push_back(rec(0, 0, std::vector<double>{0.9 - i * 0.01, 0.1}));
    r.push_back(rec(1, 1, std::vector<double>{0.1, 0.9 - i * 0.01}));
  }
  EXPECT_DOUBLE_EQ(auc_ovr(r, 2).macro_auc, 1.0);
  for (auto& x : r) std::swap((*x.scores)[0], (*x.scores)[1]);
  EXPECT_DOUBLE_EQ(auc_ovr(r, 2).macro_auc, 0.0);
}

TEST(Auc, ClassWithoutPositivesExcluded) {
  std::vector<PredictionRecord> r = {rec(0, 0, std::vector<double>{0.8, 0.1, 0.1}),
                                     rec(1, 1, std::vector<double>{0.1, 0.8, 0.1})};
  auto a = auc_ovr(r, 3);
  EXPECT_TRUE(std::isnan(a.per_class[2]));
  EXPECT_DOUBLE_EQ(a.macro_auc, 1.0);
  ASSERT_EQ(a.warnings.size(), 1u);
  std::vector<PredictionRecord> one = {rec(0, 0, std::vector<double>{1.0, 0.0})};
  EXPECT_EQ(code_of([&] { auc_ovr(one, 2); }), ErrorCode::validation);
}

TEST(Auc, MetricsIncludeAucWhenScored) {
  std::vector<PredictionRecord> r = {rec(0, 0, std::vector<double>{0.8, 0.2}),
                                     rec(1, 1, std::vector<double>{0.3, 0.7})};
  EXPECT_TRUE(classification_metrics(r, 2).macro_auc);
  std::vector<PredictionRecord> u = {rec(0, 0), rec(1, 1)};
  EXPECT_FALSE(classification_metrics(u, 2).macro_auc);
}

TEST(RougeL, WorkedExample) {
  auto r = rouge_l("the cat sat", "the cat ran");
  EXPECT_EQ(r.lcs_length, 2u);
  EXPECT_EQ(r.precision, 2.0 / 3.0);
  EXPECT_EQ(r.recall, 2.0 / 3.0);
  EXPECT_EQ(r.f_measure, 2.0 / 3.0);
}

TEST(RougeL, EdgeCases) {
  auto same = rouge_l("a b c", "a b c");
  EXPECT_DOUBLE_EQ(same.f_measure, 1.0);
  EXPECT_DOUBLE_EQ(rouge_l("a b", "c d").f_measure, 0.0);
  auto empty = rouge_l("", "a");
  EXPECT_DOUBLE_EQ(empty.precision, 0.0);
  EXPECT_DOUBLE_EQ(empty.f_measure, 0.0);
  EXPECT_EQ(rouge_tokens("The CAT, sat_down!"), (std::vector<std::string>{"the", "cat", "sat_down"}));
}

TEST(RougeL, RoleSymmetry) {
  std::mt19937 rng(2);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> a(rng() % 12), b(rng() % 12);
    for (auto& t : a) t = std::string(1, static_cast<char>('a' + rng() % 4));
    for (auto& t : b) t = std::string(1, static_cast<char>('a' + rng() % 4));
    auto ab = rouge_l(a, b);
    auto ba = rouge_l(b, a);
    EXPECT_DOUBLE_EQ(ab.recall, ba.precision);
    EXPECT_DOUBLE_EQ(ab.f_measure, ba.f_measure);
    EXPECT_GE(ab.f_measure, 0.0);
    EXPECT_LE(ab.f_measure, 1.0);
  }
}

TEST(Relevance, SelfSimilarityAndEmptyContexts) {
  auto backends = mock_set();
  auto r = relevance("crack on the rail", "crack on the rail", {}, backends);
  EXPECT_NEAR(r.answer_relevance, 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.context_relevance, 0.0);
  EXPECT_EQ(code_of([&] { relevance("", "a", {}, backends); }), ErrorCode::validation);
}

TEST(Relevance, MatchesHashingPipeline) {
  MockConfig cfg;
  cfg.seed = 5;
  auto backends = mock_set(cfg);
  const std::vector<std::string> ctx = {"joint bolts", "rail crack length"};
  auto r = relevance("where is the crack", "on the rail head", ctx, backends);
  auto q = hashing_embedding("where is the crack", 5, cfg.embed_dim);
  auto rescale = [](double c) { return (c + 1) / 2; };
  EXPECT_NEAR(r.answer_relevance, rescale(cosine(q, hashing_embedding("on the rail head", 5, cfg.embed_dim))),
              1e-12);
  const double c0 = rescale(cosine(q, hashing_embedding(ctx[0], 5, cfg.embed_dim)));
  const double c1 = rescale(cosine(q, hashing_embedding(ctx[1], 5, cfg.embed_dim)));
  EXPECT_NEAR(r.context_relevance, (c0 + c1) / 2, 1e-12);
}

TEST(JudgeScore, Parser) {
  EXPECT_EQ(parse_judge_score("8"), 8);
  EXPECT_EQ(parse_judge_score("Score: 10/10 because it is thorough"), 10);
  EXPECT_EQ(parse_judge_score("I give it a 3."), 3);
  EXPECT_EQ(code_of([] { parse_judge_score("excellent"); }), ErrorCode::scoring);
  try {
    parse_judge_score("excellent");
  } catch (const Error& e) {
    EXPECT_EQ(e.detail().at("reply"), "excellent");
  }
}

TEST(JudgeScore, UsefulnessViaMock) {
  MockConfig cfg;
  cfg.task_replies["judge"] = "8";
  auto backends = mock_set(cfg);
  EXPECT_EQ(usefulness("The rail has a crack.", "Rate usefulness 1-10.", backends), 8);
  auto plain = mock_set();
  const int v = usefulness("The rail has a crack.", "Rate usefulness 1-10.", plain);
  EXPECT_GE(v, 1);
  EXPECT_LE(v, 10);
}

TEST(Latency, Groups) {
  std::vector<LatencyRecord> one = {{3, 100, 40, "video"}};
  auto g = latency_report(one);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_DOUBLE_EQ(g[0].mean_latency_ms, 40);
  std::vector<LatencyRecord> r = {{4, 10, 80, "video"}, {2, 6, 40, "video"}, {2, 8, 60, "video"}};
  g = latency_report(r);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[0].frames, 2);
  EXPECT_DOUBLE_EQ(g[0].mean_latency_ms, 50);
  EXPECT_DOUBLE_EQ(g[0].mean_tokens, 7);
  EXPECT_LT(g[0].mean_latency_ms, g[1].mean_latency_ms);
  EXPECT_EQ(latency_csv(g), "frames,mean_latency_ms,mean_tokens\n2,50,7\n4,80,10\n");
  EXPECT_EQ(code_of([] { latency_report({}); }), ErrorCode::validation);
}

TEST(Baselines, TableRows) {
  auto b = builtin_baseline("image-in-domain");
  ASSERT_TRUE(b);
  EXPECT_DOUBLE_EQ(b->precision, 0.92);
  EXPECT_DOUBLE_EQ(b->recall, 0.93);
  EXPECT_DOUBLE_EQ(b->f1, 0.92);
  EXPECT_DOUBLE_EQ(b->auc, 0.93);
  EXPECT_DOUBLE_EQ(builtin_baseline("image-zero-shot")->precision, 0.6);
  EXPECT_DOUBLE_EQ(builtin_baseline("video-in-domain")->precision, 0.76);
  EXPECT_FALSE(builtin_baseline("nope"));
  std::vector<PredictionRecord> r = {rec(0, 0), rec(1, 1)};
  std::vector<BaselineRow> rows = {*b};
  auto table = metrics_table(classification_metrics(r, 2), rows);
  EXPECT_NE(table.find("0.92"), std::string::npos);
}

TEST(EvalReaders, PredictionsByNameAndId) {
  TempDir dir;
  dtwin::testing::write_file(
      dir.file("p.jsonl"),
      "{\"true_label\":\"crack\",\"predicted_label\":\"rust\",\"scores\":{\"crack\":0.4,\"rust\":0.6}}\n"
      "{\"true_label\":1,\"predicted_label\":1,\"scores\":[0.2,0.8]}\n");
  auto in = read_predictions_jsonl(dir.file("p.jsonl"), {"crack", "rust"});
  ASSERT_EQ(in.records.size(), 2u);
  EXPECT_EQ(in.records[0].true_label, 0);
  EXPECT_EQ(in.records[0].predicted_label, 1);
  EXPECT_EQ(*in.records[0].scores, (std::vector<double>{0.4, 0.6}));
  dtwin::testing::write_file(dir.file("bad.jsonl"), "{\"true_label\":\"bogie\",\"predicted_label\":0}\n");
  EXPECT_THROW(read_predictions_jsonl(dir.file("bad.jsonl"), {"crack", "rust"}), Error);
}

TEST(EvalReaders, RougeRelevanceLatency) {
  TempDir dir;
  dtwin::testing::write_file(dir.file("r.jsonl"), "{\"candidate\":\"a\",\"reference\":\"b\"}\n"
                                                  "{\"answer\":\"c\",\"reference\":\"d\"}\n");
  EXPECT_EQ(read_rouge_jsonl(dir.file("r.jsonl")).size(), 2u);
  dtwin::testing::write_file(dir.file("q.jsonl"), "{\"question\":\"q\",\"answer\":\"a\",\"contexts\":[\"x\"]}\n");
  EXPECT_EQ(read_relevance_jsonl(dir.file("q.jsonl"))[0].contexts.size(), 1u);
  dtwin::testing::write_file(dir.file("l.jsonl"),
                             "{\"frames\":2,\"tokens\":5,\"latency_ms\":9,\"task\":\"video\"}\n");
  EXPECT_EQ(read_latency_jsonl(dir.file("l.jsonl"))[0].latency_ms, 9);
}
