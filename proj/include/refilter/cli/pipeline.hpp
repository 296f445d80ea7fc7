#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>

#include "refilter/cli/config.hpp"
#include "refilter/evaluation/harness.hpp"
#include "refilter/fusion/fusion.hpp"
#include "refilter/training/training.hpp"

namespace refilter::cli {

// File names inside a data directory.
struct DataFiles {
  std::filesystem::path corpus, noise, qa, vocab;
  explicit DataFiles(const std::filesystem::path& dir);
};

// Writes the synthetic world plus its vocabulary into `dir`.
void write_synth(const std::filesystem::path& dir, const corpus::SynthData& data,
                 const corpus::Vocabulary& vocab);

evaluation::Task load_task(const std::filesystem::path& dir, std::size_t chunk_len);
evaluation::Task synth_task(const corpus::SynthConfig& config);

using Progress = std::function<void(const std::string&)>;

// Answer-only pretraining of a fresh backbone on a separate, all-train
// synthetic world (backbone.pretrain.*). Each sample is an S-RAG prompt with
// a uniformly drawn k in 0..k_max. Needs the synthetic vocabulary.
std::shared_ptr<backbone::Backbone> pretrain(const RunConfig& config,
                                             const corpus::Vocabulary& vocab,
                                             const Progress& progress = {});

// Backbone checkpoint: backbone parameters only, header JSON
// {"kind": "backbone", "config": <tree>, "seconds": <pretraining time>}.
void save_backbone(const std::filesystem::path& path, const backbone::Backbone& model,
                   const RunConfig& config, double seconds);
struct LoadedBackbone {
  std::shared_ptr<backbone::Backbone> model;
  double seconds = 0.0;
};
// Architecture comes from the checkpoint's own config.
LoadedBackbone load_backbone(const std::filesystem::path& path);

// Loads backbone.checkpoint when set, otherwise pretrains. A loaded
// checkpoint's architecture is copied into `config`; a fresh backbone is
// saved to `save_to` when that is non-empty.
LoadedBackbone obtain_backbone(RunConfig& config, const corpus::Vocabulary& vocab,
                               const std::filesystem::path& save_to, const Progress& progress = {});

struct TrainedReFilter {
  std::unique_ptr<fusion::ReFilter> model;
  training::TrainState state;
  double seconds = 0.0;
};

// Copies the trainable parameters of `src` into `dst` by name. Position
// mask slots shared by both pools are copied; extra slots of a larger pool
// keep their initial value.
void warm_start(fusion::ReFilter& dst, const fusion::ReFilter& src);

// Builds a ReFilter on `backbone` and trains it on the task's train split
// with clean top-k retrieval; the dev carve-out follows train.dev_fraction.
// With `init_from`, training starts from that adapter (usually one trained at
// another k) and runs train.warm_start_epochs instead of train.epochs.
TrainedReFilter train_refilter(const RunConfig& config, const evaluation::Task& task,
                               std::shared_ptr<backbone::Backbone> backbone,
                               const std::function<void(const training::MetricRecord&)>& on_record = {},
                               const fusion::ReFilter* init_from = nullptr);

// ReFilter checkpoint: every parameter (backbone included) plus training
// state; header JSON {"kind": "refilter", "config": <tree>}.
void save_refilter(const std::filesystem::path& path, const fusion::ReFilter& model,
                   const RunConfig& config, const training::TrainState* state);
struct LoadedReFilter {
  std::unique_ptr<fusion::ReFilter> model;
  RunConfig config;  // as stored
};
LoadedReFilter load_refilter(const std::filesystem::path& path);

// Writes <dir>/config.json with the resolved configuration and command.
void write_resolved_config(const std::filesystem::path& dir, const RunConfig& config,
                           const std::string& command);

}  // namespace refilter::cli
