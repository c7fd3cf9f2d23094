#include "dtwin/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dtwin/error.hpp"

namespace dtwin::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  if (a.empty() || b.empty()) return 0;
  if (b.size() > a.size()) std::swap(a, b);
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::vector<std::size_t> batch_lcs(std::span<const TokenSeq> candidates,
                                   std::span<const TokenSeq> references) {
  require(candidates.size() == references.size(), "batch_lcs: size mismatch");
  std::vector<std::size_t> out(candidates.size());
  const auto n = static_cast<std::ptrdiff_t>(candidates.size());
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    out[i] = lcs_length(candidates[i], references[i]);
  }
  return out;
}

std::vector<std::size_t> batch_lcs_serial(std::span<const TokenSeq> candidates,
                                          std::span<const TokenSeq> references) {
  require(candidates.size() == references.size(), "batch_lcs: size mismatch");
  std::vector<std::size_t> out(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out[i] = lcs_length(candidates[i], references[i]);
  }
  return out;
}

double binary_auc(std::span<const double> scores, std::span<const char> positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Mann-Whitney U with mid-ranks for ties.
  double positive_rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        positive_rank_sum += mid_rank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
  const double p = static_cast<double>(pos);
  return (positive_rank_sum - p * (p + 1) / 2) / (p * static_cast<double>(neg));
}

namespace {

double class_auc(std::span<const double> scores, std::span<const int> labels,
                 std::size_t num_classes, std::size_t c) {
  const std::size_t n = labels.size();
  std::vector<double> column(n);
  std::vector<char> positive(n);
  for (std::size_t r = 0; r < n; ++r) {
    column[r] = scores[r * num_classes + c];
    positive[r] = labels[r] == static_cast<int>(c);
  }
  return binary_auc(column, positive);
}

}  // namespace

std::vector<double> per_class_auc(std::span<const double> scores, std::span<const int> labels,
                                  std::size_t num_classes) {
  require(scores.size() == labels.size() * num_classes, "per_class_auc: score matrix shape");
  std::vector<double> out(num_classes);
  const auto classes = static_cast<std::ptrdiff_t>(num_classes);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < classes; ++c) {
    out[c] = class_auc(scores, labels, num_classes, static_cast<std::size_t>(c));
  }
  return out;
}

std::vector<double> per_class_auc_serial(std::span<const double> scores,
                                         std::span<const int> labels, std::size_t num_classes) {
  require(scores.size() == labels.size() * num_classes, "per_class_auc: score matrix shape");
  std::vector<double> out(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) out[c] = class_auc(scores, labels, num_classes, c);
  return out;
}

namespace {

double set_jaccard(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t common = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++common;
      ++i;
      ++j;
    }
  }
  return static_cast<double>(common) / static_cast<double>(a.size() + b.size() - common);
}

}  // namespace

double pairwise_diversity(std::span<const std::vector<std::string>> sets) {
  const auto n = static_cast<std::ptrdiff_t>(sets.size());
  if (n < 2) return 0.0;
  double total = 0.0;
#pragma omp parallel for reduction(+ : total) schedule(dynamic, 8)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    for (std::ptrdiff_t j = i + 1; j < n; ++j) total += 1.0 - set_jaccard(sets[i], sets[j]);
  }
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  return total / pairs;
}

double pairwise_diversity_serial(std::span<const std::vector<std::string>> sets) {
  const std::size_t n = sets.size();
  if (n < 2) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) total += 1.0 - set_jaccard(sets[i], sets[j]);
  }
  return total / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

}  // namespace dtwin::kernels
