#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "refilter/backbone/model.hpp"
#include "refilter/context_encoder/encoder.hpp"
#include "refilter/corpus/corpus.hpp"
#include "refilter/evaluation/report.hpp"
#include "refilter/fusion/fusion.hpp"
#include "refilter/gated_filter/gate.hpp"
#include "refilter/retriever/bm25.hpp"

namespace refilter::evaluation {

inline const std::string kNoRetrieval = "no_retrieval";
inline const std::string kSrag = "srag";
inline const std::string kReFilter = "refilter";

// Corpus, noise pool, index and QA splits of one task instance.
struct Task {
  corpus::Vocabulary vocab;
  corpus::ChunkStore store;  // corpus chunks first, then noise-pool chunks
  std::size_t num_corpus_chunks = 0;
  std::vector<corpus::Chunk> noise_pool;
  retriever::InvertedIndex index;  // corpus chunks only, ordinals shared with the store
  std::vector<corpus::QAExample> train, test;  // dev-split items join train
};

// Chunks every document and validates gold chunk ids against the corpus.
Task make_task(corpus::Vocabulary vocab, const std::vector<corpus::Document>& corpus,
               const std::vector<corpus::Document>& noise,
               const std::vector<corpus::QAExample>& qa, std::size_t chunk_len);

// Chunks handed to a method for each query: padded top-k BM25 hits, then
// seeded noise replacement, then (optionally) a seeded permutation. Every
// entry points into task.store. Query i uses seeds derived from (seed, i).
std::vector<std::vector<context::PoolChunk>> deliver(const Task& task,
                                                     const std::vector<corpus::QAExample>& queries,
                                                     std::size_t k, double noise_fraction,
                                                     bool shuffle, std::uint64_t seed);

struct Models {
  const backbone::Backbone* backbone = nullptr;
  const fusion::ReFilter* refilter = nullptr;
  const context::FeatureCache* cache = nullptr;  // optional, for ReFilter pools
};

struct EvalOptions {
  std::size_t max_new = 4;
  std::size_t batch_size = 32;
};

// Runs one method under one condition. ReFilter requires condition.k to
// match the model's pool; S-RAG truncates the oldest chunks to fit the
// backbone's positions.
EvalReport evaluate(const Task& task, const std::vector<corpus::QAExample>& queries,
                    const Condition& condition, const Models& models,
                    const EvalOptions& options = {});

// Recall per k from the retriever plus each method's metric per k. ReFilter
// is evaluated at k only when refilter_by_k has a model for it.
struct DecouplingResult {
  std::vector<retriever::SweepRow> rows;
  std::vector<EvalReport> reports;
};
DecouplingResult run_decoupling(const Task& task, const std::vector<corpus::QAExample>& queries,
                                const std::vector<std::size_t>& k_values,
                                const backbone::Backbone& backbone,
                                const std::map<std::size_t, const fusion::ReFilter*>& refilter_by_k,
                                std::uint64_t seed, const EvalOptions& options = {});

// One report per (fraction, method).
std::vector<EvalReport> run_noise(const Task& task, const std::vector<corpus::QAExample>& queries,
                                  const std::vector<double>& fractions,
                                  const std::vector<std::string>& methods, const Models& models,
                                  std::size_t k, std::uint64_t seed,
                                  const EvalOptions& options = {});

struct ShuffleResult {
  std::vector<EvalReport> in_order, shuffled;          // aligned by method
  std::map<std::string, std::vector<double>> deltas;   // shuffled - in-order, per example
  std::map<std::string, double> mean_abs_delta;
};
ShuffleResult run_shuffle(const Task& task, const std::vector<corpus::QAExample>& queries,
                          const std::vector<std::string>& methods, const Models& models,
                          std::size_t k, std::uint64_t seed, const EvalOptions& options = {});

// Prompt length a method feeds the backbone for one query.
std::size_t prompt_tokens(const Task& task, const corpus::QAExample& query,
                          const std::string& method, const std::vector<context::PoolChunk>& chunks,
                          std::size_t max_positions, std::size_t reserve);

struct LatencyOptions {
  std::vector<std::size_t> batch_sizes = {1, 4, 8, 16, 32, 64};
  std::size_t trials = 20;
  std::size_t warmup = 3;
  std::size_t gen_tokens = 32;  // fixed; eos does not stop generation
};

// Wall-clock per batched query. A trial decodes one batch of queries drawn
// in order (cycling) from `queries`; ReFilter's time includes building the
// pools from the delivered chunks. Retrieval itself is excluded for all
// methods. Trials are interleaved across methods and batch sizes.
std::vector<LatencyReport> run_latency(const Task& task,
                                       const std::vector<corpus::QAExample>& queries,
                                       const std::vector<std::string>& methods,
                                       const Models& models, std::size_t k,
                                       const LatencyOptions& options);

// Token weights of one query at every fusion layer, taken when the hook
// first fires (the prompt's last position). Entries mark tokens that belong
// to a gold answer and tokens from the noise pool.
std::vector<gate::WeightRecord> export_weights(const fusion::ReFilter& model, const Task& task,
                                               const corpus::QAExample& query,
                                               const std::vector<context::PoolChunk>& chunks,
                                               std::size_t max_new = 4);

// Mean W_t over gold-marked entries and over all entries of one record.
struct WeightSummary {
  double mean_gold = 0.0;
  double mean_all = 0.0;
  std::size_t n_gold = 0;
};
WeightSummary summarize_weights(const gate::WeightRecord& record);

}  // namespace refilter::evaluation
