#include "refilter/retriever/bm25.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "refilter/binary_io.hpp"
#include "refilter/errors.hpp"

namespace refilter::retriever {
namespace {

constexpr char kMagic[8] = {'R', 'F', 'B', 'M', '2', '5', 'I', 'X'};
constexpr std::uint32_t kVersion = 1;

const std::vector<Posting> kNoPostings;

}  // namespace

const std::vector<Posting>& InvertedIndex::postings(const std::string& term) const {
  auto it = postings_.find(term);
  return it == postings_.end() ? kNoPostings : it->second;
}

double InvertedIndex::idf(const std::string& term) const {
  const double n = static_cast<double>(num_chunks());
  const double df = static_cast<double>(postings(term).size());
  return std::log((n - df + 0.5) / (df + 0.5) + 1.0);
}

void InvertedIndex::finalize() {
  const double total = std::accumulate(lengths_.begin(), lengths_.end(), 0.0);
  avg_length_ = lengths_.empty() ? 0.0 : total / static_cast<double>(lengths_.size());
  by_id_.resize(chunk_ids_.size());
  std::iota(by_id_.begin(), by_id_.end(), 0u);
  std::sort(by_id_.begin(), by_id_.end(),
            [&](std::uint32_t a, std::uint32_t b) { return chunk_ids_[a] < chunk_ids_[b]; });
}

InvertedIndex build_index(const std::vector<corpus::Chunk>& chunks, Bm25Params params) {
  InvertedIndex index;
  index.params_ = params;
  std::unordered_set<std::string> seen;
  for (std::size_t ord = 0; ord < chunks.size(); ++ord) {
    const corpus::Chunk& c = chunks[ord];
    if (!seen.insert(c.chunk_id).second) {
      throw DataError("duplicate chunk_id '" + c.chunk_id + "' while building index");
    }
    const auto toks = corpus::tokenize(c.text);
    std::map<std::string, std::uint32_t> tf;
    for (const auto& t : toks) ++tf[t];
    for (const auto& [term, count] : tf) {
      index.postings_[term].push_back({static_cast<std::uint32_t>(ord), count});
    }
    index.chunk_ids_.push_back(c.chunk_id);
    index.lengths_.push_back(static_cast<std::uint32_t>(toks.size()));
  }
  index.finalize();
  return index;
}

std::string InvertedIndex::serialize() const {
  io::Writer w;
  for (char c : kMagic) w.put(c);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint64_t>(chunk_ids_.size());
  w.put<std::uint64_t>(postings_.size());
  std::uint64_t total_postings = 0;
  for (const auto& [term, list] : postings_) total_postings += list.size();
  w.put<std::uint64_t>(total_postings);
  w.put<double>(params_.k1);
  w.put<double>(params_.b);
  w.put<double>(avg_length_);
  for (std::size_t i = 0; i < chunk_ids_.size(); ++i) {
    w.put_string(chunk_ids_[i]);
    w.put<std::uint32_t>(lengths_[i]);
  }
  std::uint64_t offset = 0;
  for (const auto& [term, list] : postings_) {
    w.put_string(term);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(list.size()));
    w.put<std::uint64_t>(offset);
    offset += list.size();
  }
  for (const auto& [term, list] : postings_) {
    for (const Posting& p : list) {
      w.put<std::uint32_t>(p.ordinal);
      w.put<std::uint32_t>(p.tf);
    }
  }
  return w.bytes();
}

InvertedIndex InvertedIndex::deserialize(const std::string& bytes) {
  io::Reader<DataError> r(bytes, "index file");
  for (char c : kMagic) {
    if (r.get<char>() != c) throw DataError("index file: bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw IncompatibleError("index file version " + std::to_string(version) + ", expected " +
                            std::to_string(kVersion));
  }
  InvertedIndex index;
  const auto n_chunks = r.get<std::uint64_t>();
  const auto n_terms = r.get<std::uint64_t>();
  const auto n_postings = r.get<std::uint64_t>();
  index.params_.k1 = r.get<double>();
  index.params_.b = r.get<double>();
  const double stored_avg = r.get<double>();
  for (std::uint64_t i = 0; i < n_chunks; ++i) {
    index.chunk_ids_.push_back(r.get_string());
    index.lengths_.push_back(r.get<std::uint32_t>());
  }
  struct TermEntry {
    std::string term;
    std::uint32_t df;
    std::uint64_t offset;
  };
  std::vector<TermEntry> dict;
  for (std::uint64_t i = 0; i < n_terms; ++i) {
    TermEntry e;
    e.term = r.get_string();
    e.df = r.get<std::uint32_t>();
    e.offset = r.get<std::uint64_t>();
    dict.push_back(std::move(e));
  }
  std::vector<Posting> all(n_postings);
  for (auto& p : all) {
    p.ordinal = r.get<std::uint32_t>();
    p.tf = r.get<std::uint32_t>();
    if (p.ordinal >= n_chunks) throw DataError("index file: posting references chunk out of range");
  }
  if (!r.at_end()) throw DataError("index file: trailing bytes");
  for (const TermEntry& e : dict) {
    if (e.offset + e.df > all.size()) throw DataError("index file: posting range out of bounds");
    index.postings_[e.term].assign(all.begin() + static_cast<std::ptrdiff_t>(e.offset),
                                   all.begin() + static_cast<std::ptrdiff_t>(e.offset + e.df));
  }
  index.finalize();
  if (index.avg_length_ != stored_avg) throw DataError("index file: average length mismatch");
  return index;
}

void InvertedIndex::save(const std::filesystem::path& path) const {
  io::write_file_atomic(path, serialize());
}

InvertedIndex InvertedIndex::load(const std::filesystem::path& path) {
  return deserialize(io::read_file(path));
}

RetrievalResult search(const InvertedIndex& index, const std::string& query, std::size_t k,
                       const SearchOptions& options, const std::string& query_id) {
  if (k == 0) throw ConfigError("search requires k >= 1");
  RetrievalResult result;
  result.query_id = query_id;
  result.k = k;

  const auto& prm = index.params();
  const double avg = index.avg_length();
  std::unordered_map<std::uint32_t, double> scores;
  std::set<std::string> terms;
  for (auto& t : corpus::tokenize(query)) terms.insert(std::move(t));
  for (const std::string& term : terms) {
    const auto& list = index.postings(term);
    if (list.empty()) continue;
    const double idf = index.idf(term);
    for (const Posting& p : list) {
      const double tf = p.tf;
      const double len = index.chunk_length(p.ordinal);
      const double norm = avg > 0.0 ? len / avg : 0.0;
      scores[p.ordinal] += idf * tf * (prm.k1 + 1.0) / (tf + prm.k1 * (1.0 - prm.b + prm.b * norm));
    }
  }
  std::vector<Hit> hits;
  for (const auto& [ord, score] : scores) {
    if (score > 0.0) hits.push_back({index.chunk_id(ord), ord, score, false});
  }
  auto better = [](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.chunk_id < b.chunk_id;
  };
  if (hits.size() > k) {
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(),
                      better);
    hits.resize(k);
  } else {
    std::sort(hits.begin(), hits.end(), better);
  }
  if (options.pad_to_k && hits.size() < k) {
    std::unordered_set<std::size_t> taken;
    for (const Hit& h : hits) taken.insert(h.ordinal);
    for (std::size_t ord : index.ordinals_by_id()) {
      if (hits.size() >= k) break;
      if (taken.count(ord)) continue;
      hits.push_back({index.chunk_id(ord), ord, 0.0, true});
    }
  }
  result.hits = std::move(hits);
  return result;
}

std::optional<double> recall_at_k(const RetrievalResult& result,
                                  const std::vector<std::string>& gold) {
  if (gold.empty()) return std::nullopt;
  for (const Hit& h : result.hits) {
    if (std::find(gold.begin(), gold.end(), h.chunk_id) != gold.end()) return 1.0;
  }
  return 0.0;
}

std::vector<SweepRow> recall_vs_k_sweep(const InvertedIndex& index,
                                        const std::vector<corpus::QAExample>& dataset,
                                        const std::vector<std::size_t>& k_values) {
  if (k_values.empty()) return {};
  for (std::size_t i = 0; i < k_values.size(); ++i) {
    if (k_values[i] == 0 || (i > 0 && k_values[i] <= k_values[i - 1])) {
      throw ConfigError("k_values must be strictly ascending and positive");
    }
  }
  std::vector<SweepRow> rows(k_values.size());
  for (std::size_t i = 0; i < k_values.size(); ++i) rows[i].k = k_values[i];
  for (const auto& ex : dataset) {
    if (ex.gold_chunk_ids.empty()) continue;
    // One search at the largest k; every smaller k is a prefix of it.
    const RetrievalResult full = search(index, ex.question, k_values.back());
    for (SweepRow& row : rows) {
      RetrievalResult prefix = full;
      if (prefix.hits.size() > row.k) prefix.hits.resize(row.k);
      row.recall += *recall_at_k(prefix, ex.gold_chunk_ids);
      ++row.examples;
    }
  }
  for (SweepRow& row : rows) {
    if (row.examples > 0) row.recall /= static_cast<double>(row.examples);
  }
  return rows;
}

}  // namespace refilter::retriever
