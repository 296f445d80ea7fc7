#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "refilter/corpus/corpus.hpp"

namespace refilter::retriever {

struct Posting {
  std::uint32_t ordinal = 0;
  std::uint32_t tf = 0;
};

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

// Okapi BM25 index. Chunk ordinals follow build order; terms are the
// tokenizer's lowercase words. Immutable after build.
class InvertedIndex {
 public:
  InvertedIndex() = default;

  std::size_t num_chunks() const { return chunk_ids_.size(); }
  std::size_t num_terms() const { return postings_.size(); }
  double avg_length() const { return avg_length_; }
  const Bm25Params& params() const { return params_; }
  const std::string& chunk_id(std::size_t ordinal) const { return chunk_ids_.at(ordinal); }
  std::uint32_t chunk_length(std::size_t ordinal) const { return lengths_.at(ordinal); }
  const std::vector<std::string>& chunk_ids() const { return chunk_ids_; }
  // Empty when the term is not indexed.
  const std::vector<Posting>& postings(const std::string& term) const;
  const std::map<std::string, std::vector<Posting>>& terms() const { return postings_; }
  const std::vector<std::uint32_t>& ordinals_by_id() const { return by_id_; }

  double idf(const std::string& term) const;

  // Binary layout: header (magic, version, counts, k1, b, avg length), chunk
  // table (id, length), term dictionary (term, df, posting offset), postings.
  std::string serialize() const;
  static InvertedIndex deserialize(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static InvertedIndex load(const std::filesystem::path& path);

 private:
  friend InvertedIndex build_index(const std::vector<corpus::Chunk>& chunks, Bm25Params params);
  void finalize();

  Bm25Params params_;
  std::vector<std::string> chunk_ids_;
  std::vector<std::uint32_t> lengths_;
  double avg_length_ = 0.0;
  std::map<std::string, std::vector<Posting>> postings_;
  std::vector<std::uint32_t> by_id_;  // ordinals sorted by chunk_id, for padding
};

// Throws DataError on duplicate chunk ids. Chunk length is the number of
// tokens in the chunk text (padding excluded).
InvertedIndex build_index(const std::vector<corpus::Chunk>& chunks, Bm25Params params = {});

struct Hit {
  std::string chunk_id;
  std::size_t ordinal = 0;
  double score = 0.0;
  bool padded = false;  // filler added to reach k, not a lexical match
};

struct RetrievalResult {
  std::string query_id;
  std::size_t k = 0;
  std::vector<Hit> hits;  // scores non-increasing, ties by ascending chunk_id
};

struct SearchOptions {
  // When fewer than k chunks score above zero, append the lexicographically
  // smallest remaining chunk ids (flagged padded) until k hits or the corpus
  // is exhausted.
  bool pad_to_k = false;
};

// Each distinct query term contributes once. Zero-score chunks are never
// returned as matches; a query with no indexed terms yields no matches.
RetrievalResult search(const InvertedIndex& index, const std::string& query, std::size_t k,
                       const SearchOptions& options = {}, const std::string& query_id = "");

// 1 if any gold chunk appears in the hits, else 0; nullopt for empty gold.
std::optional<double> recall_at_k(const RetrievalResult& result,
                                  const std::vector<std::string>& gold);

struct SweepRow {
  std::size_t k = 0;
  double recall = 0.0;
  std::size_t examples = 0;  // examples with non-empty gold
  std::map<std::string, double> downstream;  // method -> metric, filled by evaluation
};

// One row per k (ascending, else ConfigError), recall averaged over examples
// with non-empty gold. Uses unpadded retrieval.
std::vector<SweepRow> recall_vs_k_sweep(const InvertedIndex& index,
                                        const std::vector<corpus::QAExample>& dataset,
                                        const std::vector<std::size_t>& k_values);

}  // namespace refilter::retriever
