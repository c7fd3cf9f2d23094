#include <benchmark/benchmark.h>

#include <algorithm>
#include <random>

#include "dtwin/kernels.hpp"

using namespace dtwin::kernels;

namespace {

std::vector<TokenSeq> token_corpus(std::size_t n, std::size_t len, unsigned seed) {
  std::mt19937 rng(seed);
  std::vector<TokenSeq> out(n);
  for (auto& s : out) {
    s.resize(len);
    for (auto& t : s) t = "w" + std::to_string(rng() % 64);
  }
  return out;
}

struct ScoreMatrix {
  std::vector<double> scores;
  std::vector<int> labels;
};

ScoreMatrix score_matrix(std::size_t records, std::size_t classes) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ScoreMatrix m;
  m.scores.resize(records * classes);
  for (auto& s : m.scores) s = u(rng);
  m.labels.resize(records);
  for (auto& l : m.labels) l = static_cast<int>(rng() % classes);
  return m;
}

std::vector<std::vector<std::string>> word_sets(std::size_t n) {
  auto corpus = token_corpus(n, 24, 9);
  for (auto& s : corpus) {
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
  }
  return corpus;
}

}  // namespace

static void BM_BatchLcs(benchmark::State& state) {
  const auto c = token_corpus(static_cast<std::size_t>(state.range(0)), 60, 1);
  const auto r = token_corpus(c.size(), 60, 2);
  for (auto _ : state) benchmark::DoNotOptimize(batch_lcs(c, r));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

static void BM_BatchLcsSerial(benchmark::State& state) {
  const auto c = token_corpus(static_cast<std::size_t>(state.range(0)), 60, 1);
  const auto r = token_corpus(c.size(), 60, 2);
  for (auto _ : state) benchmark::DoNotOptimize(batch_lcs_serial(c, r));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

static void BM_PerClassAuc(benchmark::State& state) {
  const auto m = score_matrix(static_cast<std::size_t>(state.range(0)), 8);
  for (auto _ : state) benchmark::DoNotOptimize(per_class_auc(m.scores, m.labels, 8));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

static void BM_PerClassAucSerial(benchmark::State& state) {
  const auto m = score_matrix(static_cast<std::size_t>(state.range(0)), 8);
  for (auto _ : state) benchmark::DoNotOptimize(per_class_auc_serial(m.scores, m.labels, 8));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

static void BM_PairwiseDiversity(benchmark::State& state) {
  const auto sets = word_sets(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(pairwise_diversity(sets));
}

static void BM_PairwiseDiversitySerial(benchmark::State& state) {
  const auto sets = word_sets(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(pairwise_diversity_serial(sets));
}

BENCHMARK(BM_BatchLcs)->Arg(256)->Arg(2048);
BENCHMARK(BM_BatchLcsSerial)->Arg(256)->Arg(2048);
BENCHMARK(BM_PerClassAuc)->Arg(1000)->Arg(10000);
BENCHMARK(BM_PerClassAucSerial)->Arg(1000)->Arg(10000);
BENCHMARK(BM_PairwiseDiversity)->Arg(100)->Arg(400);
BENCHMARK(BM_PairwiseDiversitySerial)->Arg(100)->Arg(400);

BENCHMARK_MAIN();
