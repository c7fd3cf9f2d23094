#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

// Lexical helpers shared by dataset generation, feedback parsing and metrics.
namespace dtwin::text {

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);

// Lowercase, trim, collapse internal whitespace runs to one space.
std::string normalize(std::string_view s);

// Lowercased maximal runs of ASCII letters/digits. Everything else separates.
std::vector<std::string> words(std::string_view s);

std::set<std::string> word_set(std::string_view s);

// Word n-gram shingles joined by a single space. Texts with fewer than n
// words yield one shingle of the whole word sequence (none if empty).
std::set<std::string> shingles(std::string_view s, std::size_t n);

// |a ∩ b| / |a ∪ b|; two empty sets are treated as identical (1.0).
double jaccard(const std::set<std::string>& a, const std::set<std::string>& b);

bool is_stop_word(std::string_view word);
const std::vector<std::string_view>& stop_words();

// Net polarity from the embedded lexicon (sum of per-word weights).
int polarity(std::string_view s);

std::uint64_t fnv1a64(std::string_view s);
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace dtwin::text
