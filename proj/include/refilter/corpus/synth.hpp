#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refilter/corpus/corpus.hpp"

namespace refilter::corpus {

// Planted-fact world. Every entity (two-word name) owns one document built
// from fixed-length chunks: fact chunks "the <rel> of <name> is <value> ."
// padded with filler, plus mention chunks "people say the <rel> of <name> is
// unclear ." that match the question lexically but carry no value. Some
// facts use a synonym of the relation word, so lexical retrieval needs a
// deeper k to find them.
struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t num_entities = 250;
  std::size_t facts_per_entity = 3;
  std::size_t mentions_per_entity = 6;
  double synonym_prob = 0.35;
  std::size_t num_test = 200;  // test questions, drawn from held-out entities
  std::size_t num_noise_docs = 40;
  std::size_t noise_chunks_per_doc = 4;
  std::size_t chunk_len = 16;
  bool all_train = false;  // no test split (used for backbone pretraining data)
};

struct SynthData {
  std::vector<Document> corpus;
  std::vector<Document> noise;
  std::vector<QAExample> qa;
};

// Every word the generator can emit, in a fixed order independent of seed.
const std::vector<std::string>& synth_lexicon();
// Vocabulary over synth_lexicon(); identical across seeds.
Vocabulary synth_vocabulary();

SynthData generate_synthetic(const SynthConfig& config);

// "what is the <rel> of <name> ?"
std::string question_text(const std::string& relation, const std::string& entity);

}  // namespace refilter::corpus
