#include "refilter/corpus/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_set>

#include "json.hpp"
#include "refilter/errors.hpp"

namespace refilter::corpus {
namespace {

using nlohmann::json;

const char* const kSpecialTokens[kNumSpecials] = {"<pad>", "<bos>", "<eos>", "<unk>"};

bool is_punct(unsigned char c) { return std::ispunct(c) != 0; }

std::string join(const std::vector<std::string>& parts, std::size_t begin, std::size_t end) {
  std::string out;
  for (std::size_t i = begin; i < end; ++i) {
    if (i > begin) out += ' ';
    out += parts[i];
  }
  return out;
}

std::string require_string(const json& rec, const char* field, std::size_t line) {
  auto it = rec.find(field);
  if (it == rec.end()) throw ParseError(std::string("missing field '") + field + "'", line);
  if (!it->is_string()) throw ParseError(std::string("field '") + field + "' must be a string", line);
  return it->get<std::string>();
}

std::vector<std::string> require_string_list(const json& rec, const char* field, std::size_t line) {
  auto it = rec.find(field);
  if (it == rec.end()) throw ParseError(std::string("missing field '") + field + "'", line);
  if (!it->is_array()) throw ParseError(std::string("field '") + field + "' must be a list", line);
  std::vector<std::string> out;
  for (const json& v : *it) {
    if (!v.is_string()) {
      throw ParseError(std::string("field '") + field + "' must hold strings", line);
    }
    out.push_back(v.get<std::string>());
  }
  return out;
}

// Calls fn(record, line_number) for each non-blank line.
template <typename Fn>
void for_each_record(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed record: ") + e.what(), lineno);
    }
    if (!rec.is_object()) throw ParseError("record must be an object", lineno);
    fn(rec, lineno);
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FileError("cannot write " + path.string());
  return out;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() {
  for (const char* t : kSpecialTokens) push(t);
}

void Vocabulary::push(const std::string& token) {
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

int Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return ids_.count(std::string(token)) > 0;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const std::string& t : tokenize(text)) ids.push_back(id(t));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> parts;
  for (int i : ids) {
    if (i == kPadId || i == kBosId || i == kEosId) continue;
    parts.push_back(token(i));
  }
  return join(parts, 0, parts.size());
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out = open_out(path);
  for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open " + path.string());
  Vocabulary v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (v.contains(line)) throw ParseError("duplicate token '" + line + "'", lineno);
    v.push(line);
  }
  return v;
}

Vocabulary build_vocab(const std::vector<std::string>& texts, std::size_t max_size) {
  if (max_size < kNumSpecials) {
    throw ConfigError("vocabulary max_size " + std::to_string(max_size) +
                      " is smaller than the " + std::to_string(kNumSpecials) + " special tokens");
  }
  std::unordered_map<std::string, std::size_t> count;
  std::unordered_map<std::string, std::size_t> first_seen;
  std::vector<std::string> order;
  for (const std::string& text : texts) {
    for (std::string& t : tokenize(text)) {
      if (++count[t] == 1) {
        first_seen[t] = order.size();
        order.push_back(t);
      }
    }
  }
  std::stable_sort(order.begin(), order.end(), [&](const std::string& a, const std::string& b) {
    return count[a] > count[b];
  });
  Vocabulary v;
  for (const std::string& t : order) {
    if (v.size() >= max_size) break;
    if (!v.contains(t)) v.push(t);
  }
  return v;
}

std::vector<Chunk> chunk_document(const std::string& doc_id, std::string_view text,
                                  std::size_t chunk_len, const Vocabulary& vocab) {
  if (chunk_len == 0) throw ConfigError("chunk_len must be at least 1");
  const std::vector<std::string> toks = tokenize(text);
  std::vector<Chunk> out;
  for (std::size_t begin = 0, ord = 0; begin < toks.size(); begin += chunk_len, ++ord) {
    const std::size_t end = std::min(toks.size(), begin + chunk_len);
    Chunk c;
    c.chunk_id = doc_id + "#" + std::to_string(ord);
    c.doc_id = doc_id;
    c.text = join(toks, begin, end);
    c.length = end - begin;
    c.token_ids.assign(chunk_len, kPadId);
    for (std::size_t i = begin; i < end; ++i) c.token_ids[i - begin] = vocab.id(toks[i]);
    out.push_back(std::move(c));
  }
  return out;
}

ChunkStore::ChunkStore(std::vector<Chunk> chunks) : chunks_(std::move(chunks)) {
  for (std::size_t i = 0; i < chunks_.size(); ++i) {
    if (!ordinals_.emplace(chunks_[i].chunk_id, i).second) {
      throw DataError("duplicate chunk_id '" + chunks_[i].chunk_id + "'");
    }
  }
}

ChunkStore ChunkStore::from_documents(const std::vector<Document>& docs, std::size_t chunk_len,
                                      const Vocabulary& vocab, bool is_noise) {
  std::vector<Chunk> all;
  for (const Document& d : docs) {
    for (Chunk& c : chunk_document(d.doc_id, d.text, chunk_len, vocab)) {
      c.is_noise = is_noise;
      all.push_back(std::move(c));
    }
  }
  return ChunkStore(std::move(all));
}

const Chunk& ChunkStore::by_id(const std::string& chunk_id) const {
  return chunks_[ordinal(chunk_id)];
}

std::size_t ChunkStore::ordinal(const std::string& chunk_id) const {
  auto it = ordinals_.find(chunk_id);
  if (it == ordinals_.end()) throw DataError("unknown chunk_id '" + chunk_id + "'");
  return it->second;
}

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "dev") return Split::kDev;
  if (s == "test") return Split::kTest;
  throw DataError("unknown split '" + s + "'");
}

std::vector<Document> load_corpus(const std::filesystem::path& path) {
  std::vector<Document> docs;
  std::unordered_set<std::string> seen;
  for_each_record(path, [&](const json& rec, std::size_t line) {
    Document d{require_string(rec, "doc_id", line), require_string(rec, "text", line)};
    if (!seen.insert(d.doc_id).second) {
      throw DataError("line " + std::to_string(line) + ": duplicate doc_id '" + d.doc_id + "'");
    }
    docs.push_back(std::move(d));
  });
  return docs;
}

std::vector<QAExample> load_dataset(const std::filesystem::path& path) {
  std::vector<QAExample> out;
  for_each_record(path, [&](const json& rec, std::size_t line) {
    QAExample ex;
    ex.id = rec.contains("id") && rec["id"].is_string() ? rec["id"].get<std::string>()
                                                       : "q" + std::to_string(out.size());
    ex.question = require_string(rec, "question", line);
    ex.answers = require_string_list(rec, "answers", line);
    ex.gold_chunk_ids = require_string_list(rec, "gold_chunk_ids", line);
    try {
      ex.split = parse_split(require_string(rec, "split", line));
    } catch (const DataError& e) {
      throw ParseError(e.what(), line);
    }
    if (ex.answers.empty()) throw ParseError("field 'answers' must be non-empty", line);
    out.push_back(std::move(ex));
  });
  return out;
}

void save_corpus(const std::filesystem::path& path, const std::vector<Document>& docs) {
  std::ofstream out = open_out(path);
  for (const Document& d : docs) out << json{{"doc_id", d.doc_id}, {"text", d.text}}.dump() << '\n';
}

void save_dataset(const std::filesystem::path& path, const std::vector<QAExample>& examples) {
  std::ofstream out = open_out(path);
  for (const QAExample& ex : examples) {
    json rec{{"id", ex.id},
             {"question", ex.question},
             {"answers", ex.answers},
             {"gold_chunk_ids", ex.gold_chunk_ids},
             {"split", split_name(ex.split)}};
    out << rec.dump() << '\n';
  }
}

void validate_gold(const std::vector<QAExample>& examples, const ChunkStore& store) {
  for (const QAExample& ex : examples) {
    for (const std::string& id : ex.gold_chunk_ids) {
      if (!store.contains(id)) {
        throw DataError("example '" + ex.id + "' references unknown gold chunk '" + id + "'");
      }
      if (store.by_id(id).is_noise) {
        throw DataError("example '" + ex.id + "' uses noise chunk '" + id + "' as gold");
      }
    }
  }
}

std::size_t noise_replacements(double fraction, std::size_t k) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) {
    throw ConfigError("noise fraction must lie in [0, 1], got " + std::to_string(fraction));
  }
  const double n = std::floor(fraction * static_cast<double>(k) + 0.5);
  return std::min(k, static_cast<std::size_t>(n));
}

std::vector<Chunk> inject_noise(const std::vector<Chunk>& retrieved,
                                const std::vector<Chunk>& noise_pool, double fraction,
                                std::uint64_t seed) {
  const std::size_t m = noise_replacements(fraction, retrieved.size());
  if (m == 0) return retrieved;
  if (noise_pool.size() < m) {
    throw DataError("noise pool has " + std::to_string(noise_pool.size()) + " chunks but " +
                    std::to_string(m) + " replacements are required");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> slots(retrieved.size());
  std::iota(slots.begin(), slots.end(), 0);
  std::vector<std::size_t> pool_idx(noise_pool.size());
  std::iota(pool_idx.begin(), pool_idx.end(), 0);
  // Partial Fisher-Yates on both index lists.
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> ds(i, slots.size() - 1);
    std::swap(slots[i], slots[ds(rng)]);
    std::uniform_int_distribution<std::size_t> dp(i, pool_idx.size() - 1);
    std::swap(pool_idx[i], pool_idx[dp(rng)]);
  }
  std::vector<Chunk> out = retrieved;
  for (std::size_t i = 0; i < m; ++i) {
    Chunk c = noise_pool[pool_idx[i]];
    c.is_noise = true;
    out[slots[i]] = std::move(c);
  }
  return out;
}

}  // namespace refilter::corpus
