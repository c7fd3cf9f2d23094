#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

// Data-parallel metric kernels. Every OpenMP kernel has a `_serial`
// counterpart with the same contract; tests pin one against the other and
// bench/ compares their throughput.
namespace dtwin::kernels {

using TokenSeq = std::vector<std::string>;

// Length of the longest common subsequence (two-row DP).
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

// LCS length of every (candidates[i], references[i]) pair.
std::vector<std::size_t> batch_lcs(std::span<const TokenSeq> candidates,
                                   std::span<const TokenSeq> references);
std::vector<std::size_t> batch_lcs_serial(std::span<const TokenSeq> candidates,
                                          std::span<const TokenSeq> references);

// Rank-statistic AUC of one binary problem: P(score(pos) > score(neg)),
// ties counted 1/2. Returns NaN when either side is empty.
double binary_auc(std::span<const double> scores, std::span<const char> positive);

// One-vs-rest AUC per class. `scores` is row-major [records x classes].
// Classes without positives or negatives yield NaN.
std::vector<double> per_class_auc(std::span<const double> scores, std::span<const int> labels,
                                  std::size_t num_classes);
std::vector<double> per_class_auc_serial(std::span<const double> scores,
                                         std::span<const int> labels, std::size_t num_classes);

// Mean over unordered pairs of (1 - Jaccard) between word sets.
double pairwise_diversity(std::span<const std::vector<std::string>> sorted_word_sets);
double pairwise_diversity_serial(std::span<const std::vector<std::string>> sorted_word_sets);

int max_threads();

}  // namespace dtwin::kernels
