#include "refilter/evaluation/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>

#include "refilter/errors.hpp"

namespace refilter::evaluation {
namespace {

bool is_article(const std::string& w) { return w == "a" || w == "an" || w == "the"; }

std::vector<std::string> words(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char c : text) {
    if (std::ispunct(c)) continue;
    cleaned += static_cast<char>(std::tolower(c));
  }
  std::istringstream in(cleaned);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::vector<std::string> normalized_tokens(std::string_view text) {
  std::vector<std::string> all = words(text);
  std::vector<std::string> kept;
  for (const auto& w : all) {
    if (!is_article(w)) kept.push_back(w);
  }
  return kept.empty() ? all : kept;
}

void require_golds(const std::vector<std::string>& golds) {
  if (golds.empty()) throw DataError("metric needs at least one gold answer");
}

double f1_single(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.empty() || gold.empty()) return pred.empty() && gold.empty() ? 1.0 : 0.0;
  std::map<std::string, int> counts;
  for (const auto& w : gold) ++counts[w];
  int common = 0;
  for (const auto& w : pred) {
    auto it = counts.find(w);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double p = static_cast<double>(common) / static_cast<double>(pred.size());
  const double r = static_cast<double>(common) / static_cast<double>(gold.size());
  return 2.0 * p * r / (p + r);
}

}  // namespace

std::string normalize_answer(std::string_view text) {
  std::string out;
  for (const auto& w : normalized_tokens(text)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

double token_f1(std::string_view prediction, const std::vector<std::string>& golds) {
  require_golds(golds);
  const auto pred = normalized_tokens(prediction);
  if (pred.empty()) return 0.0;
  double best = 0.0;
  for (const auto& g : golds) best = std::max(best, f1_single(pred, normalized_tokens(g)));
  return best;
}

double exact_match(std::string_view prediction, const std::vector<std::string>& golds) {
  require_golds(golds);
  const std::string p = normalize_answer(prediction);
  if (p.empty()) return 0.0;
  for (const auto& g : golds) {
    if (normalize_answer(g) == p) return 1.0;
  }
  return 0.0;
}

char option_letter(std::string_view text) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (!std::isalnum(c)) continue;
    if (!std::isalpha(c)) return 0;
    const bool alone = i + 1 == text.size() || !std::isalnum(static_cast<unsigned char>(text[i + 1]));
    return alone ? static_cast<char>(std::toupper(c)) : 0;
  }
  return 0;
}

double choice_accuracy(std::string_view prediction, const std::vector<std::string>& golds) {
  require_golds(golds);
  const char p = option_letter(prediction);
  if (p == 0) return 0.0;
  for (const auto& g : golds) {
    if (option_letter(g) == p) return 1.0;
  }
  return 0.0;
}

}  // namespace refilter::evaluation
