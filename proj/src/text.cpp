#include "dtwin/text.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <unordered_map>

namespace dtwin::text {

namespace {

bool is_word_char(unsigned char c) { return std::isalnum(c) != 0; }

// Small fixed English list; changing it changes reconstruction loss values.
constexpr std::array<std::string_view, 52> kStopWords = {
    "a",     "an",    "the",   "and",  "or",    "but",   "if",    "of",    "at",
    "by",    "for",   "with",  "to",   "from",  "in",    "on",    "into",  "onto",
    "is",    "are",   "was",   "were", "be",    "been",  "being", "has",   "have",
    "had",   "it",    "its",   "this", "that",  "these", "those", "as",    "there",
    "their", "which", "who",   "what", "very",  "can",   "will",  "shall", "may",
    "some",  "any",   "do",    "does", "so",    "than",  "then"};

const std::unordered_map<std::string_view, int>& lexicon() {
  static const std::unordered_map<std::string_view, int> table = {
      // positive
      {"accurately", 2}, {"accurate", 2}, {"correct", 2}, {"correctly", 2},
      {"great", 2}, {"excellent", 2}, {"perfect", 2}, {"good", 1},
      {"helpful", 1}, {"useful", 1}, {"precise", 1}, {"detailed", 1},
      {"clear", 1}, {"realistic", 1}, {"well", 1},
      // negative
      {"failed", -2}, {"fails", -2}, {"fail", -2}, {"missed", -2},
      {"misses", -2}, {"wrong", -2}, {"incorrect", -2}, {"incorrectly", -2},
      {"inaccurate", -2}, {"unrealistic", -2}, {"poor", -2}, {"bad", -2},
      {"useless", -2}, {"struggles", -1}, {"struggle", -1}, {"vague", -1},
      {"confusing", -1}, {"unclear", -1}, {"miss", -1}};
  return table;
}

}  // namespace

std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string trim(std::string_view s) {
  auto begin = s.find_first_not_of(" \t\r\n\f\v");
  if (begin == std::string_view::npos) return {};
  auto end = s.find_last_not_of(" \t\r\n\f\v");
  return std::string(s.substr(begin, end - begin + 1));
}

std::string normalize(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  std::string current;
  for (unsigned char c : s) {
    if (is_word_char(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::set<std::string> word_set(std::string_view s) {
  auto w = words(s);
  return {w.begin(), w.end()};
}

std::set<std::string> shingles(std::string_view s, std::size_t n) {
  auto w = words(s);
  std::set<std::string> out;
  if (w.empty()) return out;
  if (w.size() < n) n = w.size();
  for (std::size_t i = 0; i + n <= w.size(); ++i) {
    std::string gram = w[i];
    for (std::size_t j = 1; j < n; ++j) gram += ' ' + w[i + j];
    out.insert(std::move(gram));
  }
  return out;
}

double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t common = 0;
  for (const auto& x : a) common += b.count(x);
  return static_cast<double>(common) / static_cast<double>(a.size() + b.size() - common);
}

bool is_stop_word(std::string_view word) {
  return std::find(kStopWords.begin(), kStopWords.end(), word) != kStopWords.end();
}

const std::vector<std::string_view>& stop_words() {
  static const std::vector<std::string_view> list(kStopWords.begin(), kStopWords.end());
  return list;
}

int polarity(std::string_view s) {
  int score = 0;
  const auto& table = lexicon();
  for (const auto& w : words(s)) {
    if (auto it = table.find(w); it != table.end()) score += it->second;
  }
  return score;
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace dtwin::text
