#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <random>

#include "refilter/corpus/corpus.hpp"
#include "refilter/errors.hpp"
#include "refilter/retriever/bm25.hpp"

using namespace refilter;
using namespace refilter::corpus;
using namespace refilter::retriever;

namespace {

std::vector<Chunk> make_chunks(const std::vector<std::pair<std::string, std::string>>& items) {
  std::vector<Chunk> out;
  for (const auto& [id, text] : items) {
    Chunk c;
    c.chunk_id = id;
    c.doc_id = id;
    c.text = text;
    out.push_back(c);
  }
  return out;
}

// Brute-force closed-form BM25, written without the index structures.
double oracle_score(const std::vector<Chunk>& chunks, std::size_t target, const std::string& query) {
  const double k1 = 1.2, b = 0.75;
  std::vector<std::vector<std::string>> docs;
  double total = 0;
  for (const auto& c : chunks) {
    docs.push_back(tokenize(c.text));
    total += static_cast<double>(docs.back().size());
  }
  const double n = static_cast<double>(docs.size());
  const double avg = total / n;
  std::vector<std::string> q = tokenize(query);
  std::sort(q.begin(), q.end());
  q.erase(std::unique(q.begin(), q.end()), q.end());
  double score = 0;
  for (const auto& t : q) {
    double df = 0;
    for (const auto& d : docs) df += std::count(d.begin(), d.end(), t) > 0 ? 1 : 0;
    const double tf = static_cast<double>(std::count(docs[target].begin(), docs[target].end(), t));
    if (tf == 0) continue;
    const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
    const double len = static_cast<double>(docs[target].size());
    score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avg));
  }
  return score;
}

}  // namespace

TEST(Bm25, EmptyIndex) {
  InvertedIndex idx = build_index({});
  EXPECT_EQ(idx.num_chunks(), 0u);
  EXPECT_EQ(idx.avg_length(), 0.0);
  EXPECT_TRUE(search(idx, "anything", 3).hits.empty());
}

TEST(Bm25, SingleChunkPostings) {
  InvertedIndex idx = build_index(make_chunks({{"a", "x y z x"}}));
  for (const auto& [term, list] : idx.terms()) EXPECT_EQ(list.size(), 1u) << term;
  EXPECT_EQ(idx.postings("x")[0].tf, 2u);
  EXPECT_DOUBLE_EQ(idx.avg_length(), 4.0);
}

TEST(Bm25, DuplicateIdRejected) {
  EXPECT_THROW(build_index(make_chunks({{"a", "x"}, {"a", "y"}})), DataError);
}

TEST(Bm25, RareTermRanksItsChunkFirst) {
  auto chunks = make_chunks({{"c1", "the history of rome"},
                             {"c2", "the rivers of mesopotamia"},
                             {"c3", "the history of greece"}});
  InvertedIndex idx = build_index(chunks);
  auto r = search(idx, "mesopotamia", 3);
  ASSERT_EQ(r.hits.size(), 1u);
  EXPECT_EQ(r.hits[0].chunk_id, "c2");
}

TEST(Bm25, KLargerThanCorpusReturnsAll) {
  auto chunks = make_chunks({{"a", "w x"}, {"b", "w y"}, {"c", "w z"}});
  InvertedIndex idx = build_index(chunks);
  EXPECT_EQ(search(idx, "w", 10).hits.size(), 3u);
}

TEST(Bm25, NoIndexedTermsGivesEmptyResult) {
  InvertedIndex idx = build_index(make_chunks({{"a", "w x"}}));
  EXPECT_TRUE(search(idx, "unseen words", 2).hits.empty());
  EXPECT_THROW(search(idx, "w", 0), ConfigError);
}

TEST(Bm25, TiesBreakByAscendingChunkId) {
  auto chunks = make_chunks({{"d", "same text"}, {"b", "same text"}, {"c", "same text"}});
  InvertedIndex idx = build_index(chunks);
  auto r = search(idx, "same", 3);
  ASSERT_EQ(r.hits.size(), 3u);
  EXPECT_EQ(r.hits[0].chunk_id, "b");
  EXPECT_EQ(r.hits[1].chunk_id, "c");
  EXPECT_EQ(r.hits[2].chunk_id, "d");
}

TEST(Bm25, PaddingUsesSmallestRemainingIds) {
  auto chunks = make_chunks({{"z", "apple"}, {"m", "pear"}, {"a", "plum"}, {"b", "fig"}});
  InvertedIndex idx = build_index(chunks);
  auto r = search(idx, "apple", 3, SearchOptions{true});
  ASSERT_EQ(r.hits.size(), 3u);
  EXPECT_EQ(r.hits[0].chunk_id, "z");
  EXPECT_FALSE(r.hits[0].padded);
  EXPECT_EQ(r.hits[1].chunk_id, "a");
  EXPECT_TRUE(r.hits[1].padded);
  EXPECT_EQ(r.hits[2].chunk_id, "b");
  auto none = search(idx, "kiwi", 2, SearchOptions{true});
  ASSERT_EQ(none.hits.size(), 2u);
  EXPECT_TRUE(none.hits[0].padded && none.hits[1].padded);
}

TEST(Bm25, HandCorpusMatchesOracle) {
  auto chunks = make_chunks({{"a", "the cat sat on the mat"},
                             {"b", "a dog sat in the fog"},
                             {"c", "cats and dogs and the mat"}});
  InvertedIndex idx = build_index(chunks);
  for (const std::string q : {"cat mat", "the dog", "sat the fog fog", "and"}) {
    auto r = search(idx, q, 3);
    for (const Hit& h : r.hits) {
      EXPECT_NEAR(h.score, oracle_score(chunks, h.ordinal, q), 1e-9) << q;
    }
    std::size_t positive = 0;
    for (std::size_t i = 0; i < chunks.size(); ++i) positive += oracle_score(chunks, i, q) > 0;
    EXPECT_EQ(r.hits.size(), positive);
  }
}

TEST(Bm25, RandomSmallCorporaMatchOracle) {
  std::mt19937_64 rng(42);
  const std::vector<std::string> words = {"ab", "cd", "ef", "gh", "ij", "kl", "mn"};
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 10;
    std::vector<std::pair<std::string, std::string>> items;
    for (std::size_t i = 0; i < n; ++i) {
      std::string text;
      for (std::size_t w = 0, len = 1 + rng() % 8; w < len; ++w) text += words[rng() % words.size()] + " ";
      items.push_back({"c" + std::to_string(i), text});
    }
    auto chunks = make_chunks(items);
    InvertedIndex idx = build_index(chunks);
    std::string q = words[rng() % words.size()] + " " + words[rng() % words.size()];
    auto r = search(idx, q, n);
    for (std::size_t i = 0; i + 1 < r.hits.size(); ++i) {
      EXPECT_GE(r.hits[i].score, r.hits[i + 1].score);
    }
    for (const Hit& h : r.hits) EXPECT_NEAR(h.score, oracle_score(chunks, h.ordinal, q), 1e-9);
  }
}

TEST(Bm25, RebuildAndPersistAreByteIdentical) {
  auto chunks = make_chunks({{"a", "one two three"}, {"b", "two three four four"}});
  InvertedIndex x = build_index(chunks), y = build_index(chunks);
  EXPECT_EQ(x.serialize(), y.serialize());
  auto path = std::filesystem::temp_directory_path() / "refilter_index.bin";
  x.save(path);
  InvertedIndex z = InvertedIndex::load(path);
  EXPECT_EQ(z.serialize(), x.serialize());
  EXPECT_EQ(search(z, "four", 2).hits[0].chunk_id, "b");
}

TEST(Bm25, CorruptFilesRejected) {
  auto chunks = make_chunks({{"a", "one two"}});
  std::string bytes = build_index(chunks).serialize();
  EXPECT_THROW(InvertedIndex::deserialize(bytes.substr(0, bytes.size() - 3)), DataError);
  std::string bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(InvertedIndex::deserialize(bad_version), IncompatibleError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(InvertedIndex::deserialize(bad_magic), DataError);
}

TEST(Recall, MembershipAndExclusion) {
  RetrievalResult r;
  r.hits = {{"x", 0, 2.0, false}, {"g", 1, 1.0, false}, {"y", 2, 0.5, false}};
  RetrievalResult top1 = r;
  top1.hits.resize(1);
  EXPECT_EQ(*recall_at_k(top1, {"g"}), 0.0);
  EXPECT_EQ(*recall_at_k(r, {"g"}), 1.0);
  EXPECT_FALSE(recall_at_k(r, {}).has_value());
}

TEST(Recall, SweepRowsAndMonotonicity) {
  auto chunks = make_chunks({{"g", "alpha beta gamma"},
                             {"h", "alpha beta"},
                             {"i", "alpha"},
                             {"j", "delta"}});
  InvertedIndex idx = build_index(chunks);
  std::vector<QAExample> qa = {{"q0", "alpha beta gamma", {"x"}, {"g"}, Split::kTest},
                               {"q1", "alpha", {"x"}, {"i"}, Split::kTest},
                               {"q2", "alpha", {"x"}, {}, Split::kTest}};
  auto rows = recall_vs_k_sweep(idx, qa, {1, 3, 5});
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_GE(rows[i].recall, rows[i - 1].recall);
  EXPECT_EQ(rows[0].examples, 2u);
  EXPECT_THROW(recall_vs_k_sweep(idx, qa, {3, 1}), ConfigError);
}

TEST(Recall, PlantedRankOneGivesFullRecall) {
  auto chunks = make_chunks({{"g0", "zeta unique0"}, {"g1", "zeta unique1"}, {"n", "zeta"}});
  InvertedIndex idx = build_index(chunks);
  std::vector<QAExample> qa = {{"a", "unique0", {"x"}, {"g0"}, Split::kTest},
                               {"b", "unique1", {"x"}, {"g1"}, Split::kTest}};
  for (const auto& row : recall_vs_k_sweep(idx, qa, {1, 2, 3})) EXPECT_EQ(row.recall, 1.0);
}

TEST(Recall, RandomQueriesNonDecreasingInK) {
  std::mt19937_64 rng(7);
  std::vector<std::pair<std::string, std::string>> items;
  const std::vector<std::string> words = {"a1", "b2", "c3", "d4", "e5", "f6", "g7", "h8"};
  for (int i = 0; i < 60; ++i) {
    std::string t;
    for (int w = 0; w < 6; ++w) t += words[rng() % words.size()] + " ";
    items.push_back({"c" + std::to_string(i), t});
  }
  InvertedIndex idx = build_index(make_chunks(items));
  std::vector<QAExample> qa;
  for (int q = 0; q < 1000; ++q) {
    qa.push_back({"q" + std::to_string(q), words[rng() % 8] + " " + words[rng() % 8], {"x"},
                  {"c" + std::to_string(rng() % 60)}, Split::kTest});
  }
  for (const auto& ex : qa) {
    double prev = 0;
    for (std::size_t k : {1u, 3u, 5u, 8u, 20u}) {
      double r = *recall_at_k(search(idx, ex.question, k), ex.gold_chunk_ids);
      EXPECT_GE(r, prev);
      prev = r;
    }
  }
}
