#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "refilter/backbone/model.hpp"
#include "refilter/context_encoder/encoder.hpp"
#include "refilter/corpus/corpus.hpp"
#include "refilter/fusion/fusion.hpp"
#include "refilter/numerics/optim.hpp"
#include "refilter/retriever/bm25.hpp"

namespace refilter::training {

using nn::Tensor;

struct TrainConfig {
  std::size_t epochs = 8;
  std::size_t batch_size = 16;
  double lr = 3e-4;
  double warmup_fraction = 0.05;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double lambda = 0.01;
  std::uint64_t seed = 1;
  double dev_fraction = 0.1;
  bool train_encoder = true;  // false keeps encoder.* frozen (W_p stays trainable)
  std::size_t dev_max_new = 4;  // decode budget for the per-epoch dev exact match

  void validate() const;
};

// One QA item ready for fused training or evaluation.
struct Example {
  std::string id;
  std::vector<int> prompt;   // [bos] question tokens
  std::vector<int> targets;  // answer tokens then eos
  std::vector<std::string> answers;
  std::vector<context::PoolChunk> chunks;  // empty means no retrieval
};

// Question prompts plus padded top-k BM25 retrievals.
std::vector<Example> build_examples(const std::vector<corpus::QAExample>& qa,
                                    const corpus::Vocabulary& vocab,
                                    const retriever::InvertedIndex& index,
                                    const corpus::ChunkStore& store, std::size_t k);

// Deterministic dev carve-out: a seeded shuffle, the first ceil(f*n) items
// become dev (at least one when n > 1).
void split_dev(const std::vector<Example>& train, double fraction, std::uint64_t seed,
               std::vector<Example>& fit, std::vector<Example>& dev);

struct LossBreakdown {
  double nll = 0.0;
  double gate = 0.0;
  double total = 0.0;
  double mean_gate = 0.0;   // same as gate; kept as the diagnostic name
  std::size_t examples = 0;  // examples that contributed
  Tensor total_tensor;       // differentiable total
};

// Teacher-forced answer NLL (question tokens masked) plus lambda * mean gate.
// Examples with an empty answer are skipped with a warning on stderr.
LossBreakdown compute_loss(const fusion::ReFilter& model, const std::vector<const Example*>& batch,
                           double lambda, bool training, std::uint64_t seed);

struct MetricRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double nll = 0.0;
  double gate = 0.0;
  double total = 0.0;
  double mean_gate = 0.0;
  std::optional<double> dev_metric;  // set on the last step of an epoch

  bool operator==(const MetricRecord&) const = default;
};

std::string metric_json(const MetricRecord& r);

// Everything needed to continue a run exactly.
struct TrainState {
  nn::OptimizerState optimizer;
  std::mt19937_64 rng;
  std::size_t epoch = 0;         // epochs completed
  std::size_t position = 0;      // batches consumed in the current epoch
  std::vector<std::size_t> order;  // current epoch's example order
  double best_dev = -1.0;
  std::size_t best_epoch = 0;
  std::vector<std::pair<std::string, std::vector<double>>> best_params;  // trainable snapshot
  std::vector<MetricRecord> log;
};

// Trains the adapter side of `model`. `stop_after_steps` ends early (used to
// checkpoint mid-run); `state` may come from load_checkpoint to resume.
// Trainable parameters are restored to the best-dev snapshot only when the
// run finishes all epochs.
struct TrainOptions {
  std::optional<std::size_t> stop_after_steps;
  std::function<void(const MetricRecord&)> on_record;
};

TrainState initial_state(const fusion::ReFilter& model, const TrainConfig& config,
                         std::size_t num_fit);
void train(fusion::ReFilter& model, const std::vector<Example>& fit,
           const std::vector<Example>& dev, const TrainConfig& config, TrainState& state,
           const TrainOptions& options = {});

// Fraction of examples whose greedy fused answer (tokens before eos) equals
// the target tokens.
double dev_exact_match(const fusion::ReFilter& model, const std::vector<Example>& dev,
                       std::size_t max_new);

// Pools for a batch. Fresh encoder features when `fresh`, otherwise the
// cache is consulted when given.
std::vector<context::ContextEmbeddings> batch_pools(const fusion::ReFilter& model,
                                                    const std::vector<const Example*>& batch,
                                                    bool fresh,
                                                    const context::FeatureCache* cache = nullptr);

// ---- checkpoints -------------------------------------------------------------

// Versioned binary: magic, version, config JSON, name-indexed tensor table,
// optimizer moments, RNG state, counters, best-dev snapshot and metric log.
void save_checkpoint(const std::string& path, const nn::ParameterSet& params,
                     const std::string& config_json, const TrainState* state);

struct LoadedCheckpoint {
  std::string config_json;
  std::optional<TrainState> state;
};

// Copies stored tensors into same-named parameters in place. Throws
// IncompatibleError on a version mismatch and DimensionError naming the
// parameter on a shape mismatch; parameters absent from `params` are
// ignored unless `strict`.
LoadedCheckpoint load_checkpoint(const std::string& path, nn::ParameterSet& params,
                                 bool strict = false);
// Reads only the config JSON.
std::string checkpoint_config(const std::string& path);

// ---- backbone pretraining ----------------------------------------------------

struct LmExample {
  std::vector<int> prompt;
  std::vector<int> targets;
};

struct PretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double warmup_fraction = 0.05;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
};

// Answer-only next-token training of every backbone parameter on examples
// sampled with replacement. Returns the per-step losses.
std::vector<double> pretrain_backbone(backbone::Backbone& model,
                                      const std::function<LmExample(std::mt19937_64&)>& sample,
                                      const PretrainConfig& config,
                                      const std::function<void(std::size_t, double)>& progress = {});

}  // namespace refilter::training
