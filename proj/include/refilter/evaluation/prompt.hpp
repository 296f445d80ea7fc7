#pragma once

#include <string>
#include <vector>

#include "refilter/corpus/corpus.hpp"

namespace refilter::evaluation {

// [bos] question tokens. Used by the no-retrieval baseline and ReFilter,
// whose prompt never contains retrieved text.
std::vector<int> question_prompt(const corpus::Vocabulary& vocab, const std::string& question);

struct SragPrompt {
  std::vector<int> tokens;
  std::size_t chunks_used = 0;   // chunks kept after truncation
  bool truncated = false;        // oldest chunks were dropped to fit
};

// [bos] chunk_1 ... chunk_k question, with each chunk's unpadded tokens in
// retrieval-rank order. When the prompt plus `reserve` generated tokens
// would exceed max_positions, leading (oldest) chunks are dropped first.
SragPrompt srag_prompt(const corpus::Vocabulary& vocab, const std::vector<corpus::Chunk>& chunks,
                       const std::string& question, std::size_t max_positions,
                       std::size_t reserve);

// First answer's tokens followed by eos.
std::vector<int> answer_targets(const corpus::Vocabulary& vocab, const std::string& answer);

}  // namespace refilter::evaluation
