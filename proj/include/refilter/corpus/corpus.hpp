#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace refilter::corpus {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr std::size_t kNumSpecials = 4;

// Lowercases and splits on whitespace; punctuation characters become their
// own tokens.
std::vector<std::string> tokenize(std::string_view text);

// Word-level vocabulary. Ids 0..3 are pad/bos/eos/unk; words follow in order
// of decreasing frequency, ties broken by first occurrence.
class Vocabulary {
 public:
  Vocabulary();

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;  // unk when absent
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;

  std::vector<int> encode(std::string_view text) const;
  // Joins tokens with single spaces; special tokens are skipped.
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  friend Vocabulary build_vocab(const std::vector<std::string>& texts, std::size_t max_size);
  void push(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

Vocabulary build_vocab(const std::vector<std::string>& texts, std::size_t max_size = 2048);

struct Document {
  std::string doc_id;
  std::string text;
};

struct Chunk {
  std::string chunk_id;
  std::string doc_id;
  std::string text;
  std::vector<int> token_ids;  // exactly chunk_len, pad-filled
  std::size_t length = 0;      // tokens before padding
  bool is_noise = false;
};

// Consecutive non-overlapping windows of s tokens; the last is padded.
// Chunk ids are "<doc_id>#<ordinal>".
std::vector<Chunk> chunk_document(const std::string& doc_id, std::string_view text,
                                  std::size_t chunk_len, const Vocabulary& vocab);

// Chunks with an id -> ordinal lookup. Rejects duplicate chunk ids.
class ChunkStore {
 public:
  ChunkStore() = default;
  explicit ChunkStore(std::vector<Chunk> chunks);
  static ChunkStore from_documents(const std::vector<Document>& docs, std::size_t chunk_len,
                                   const Vocabulary& vocab, bool is_noise = false);

  const std::vector<Chunk>& chunks() const { return chunks_; }
  std::size_t size() const { return chunks_.size(); }
  const Chunk& at(std::size_t ordinal) const { return chunks_.at(ordinal); }
  const Chunk& by_id(const std::string& chunk_id) const;
  bool contains(const std::string& chunk_id) const { return ordinals_.count(chunk_id) > 0; }
  std::size_t ordinal(const std::string& chunk_id) const;

 private:
  std::vector<Chunk> chunks_;
  std::unordered_map<std::string, std::size_t> ordinals_;
};

enum class Split { kTrain, kDev, kTest };
std::string split_name(Split s);
Split parse_split(const std::string& s);

struct QAExample {
  std::string id;
  std::string question;
  std::vector<std::string> answers;
  std::vector<std::string> gold_chunk_ids;
  Split split = Split::kTrain;
};

// Line-delimited JSON. Corpus / noise pool records: {"doc_id", "text"}.
// QA records: {"question", "answers", "gold_chunk_ids", "split"} plus optional "id".
std::vector<Document> load_corpus(const std::filesystem::path& path);
std::vector<QAExample> load_dataset(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, const std::vector<Document>& docs);
void save_dataset(const std::filesystem::path& path, const std::vector<QAExample>& examples);

// Throws DataError if any example points at a chunk missing from the store.
void validate_gold(const std::vector<QAExample>& examples, const ChunkStore& store);

// Number of replacements for a fraction of k slots: round-half-up(fraction * k).
std::size_t noise_replacements(double fraction, std::size_t k);

// Replaces noise_replacements(fraction, k) seeded, uniformly chosen positions
// with distinct noise-pool chunks (is_noise=true). Untouched positions keep
// their order.
std::vector<Chunk> inject_noise(const std::vector<Chunk>& retrieved,
                                const std::vector<Chunk>& noise_pool, double fraction,
                                std::uint64_t seed);

}  // namespace refilter::corpus
