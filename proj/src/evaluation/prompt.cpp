#include "refilter/evaluation/prompt.hpp"

#include "refilter/errors.hpp"

namespace refilter::evaluation {

std::vector<int> question_prompt(const corpus::Vocabulary& vocab, const std::string& question) {
  std::vector<int> out = {corpus::kBosId};
  for (int id : vocab.encode(question)) out.push_back(id);
  return out;
}

SragPrompt srag_prompt(const corpus::Vocabulary& vocab, const std::vector<corpus::Chunk>& chunks,
                       const std::string& question, std::size_t max_positions,
                       std::size_t reserve) {
  const std::vector<int> q = vocab.encode(question);
  const std::size_t fixed = 1 + q.size() + reserve;
  if (fixed > max_positions) {
    throw DataError("question of " + std::to_string(q.size()) + " tokens does not fit in " +
                    std::to_string(max_positions) + " positions");
  }
  std::size_t budget = max_positions - fixed;
  // Keep the newest (highest-ranked-last) suffix of chunks that fits.
  std::size_t first = chunks.size();
  while (first > 0 && chunks[first - 1].length <= budget) {
    budget -= chunks[first - 1].length;
    --first;
  }
  SragPrompt p;
  p.truncated = first > 0;
  p.chunks_used = chunks.size() - first;
  p.tokens.push_back(corpus::kBosId);
  for (std::size_t i = first; i < chunks.size(); ++i) {
    const auto& ids = chunks[i].token_ids;
    p.tokens.insert(p.tokens.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(chunks[i].length));
  }
  p.tokens.insert(p.tokens.end(), q.begin(), q.end());
  return p;
}

std::vector<int> answer_targets(const corpus::Vocabulary& vocab, const std::string& answer) {
  std::vector<int> out = vocab.encode(answer);
  out.push_back(corpus::kEosId);
  return out;
}

}  // namespace refilter::evaluation
