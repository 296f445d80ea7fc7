#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "refilter/backbone/model.hpp"
#include "refilter/context_encoder/encoder.hpp"
#include "refilter/corpus/synth.hpp"
#include "refilter/evaluation/harness.hpp"
#include "refilter/fusion/fusion.hpp"
#include "refilter/training/training.hpp"

namespace refilter::cli {

// Resolved run configuration: a JSON tree built from defaults, then a config
// file, then individual overrides. Only keys present in the defaults are
// accepted, and each override must keep the default's value type.
class RunConfig {
 public:
  RunConfig();

  static nlohmann::json defaults();

  // Merges a JSON object file. Throws FileError when unreadable and
  // ConfigError naming the dotted key on an unknown key or a type mismatch.
  void merge_file(const std::filesystem::path& path);
  void merge(const nlohmann::json& patch);
  // Sets one dotted key, e.g. set("train.lambda", 0.1).
  void set(const std::string& key, const nlohmann::json& value);
  const nlohmann::json& at(const std::string& key) const;

  const nlohmann::json& tree() const { return tree_; }
  std::string dump() const { return tree_.dump(2); }

  // Range checks across the tree; throws ConfigError naming the key.
  void validate() const;

  std::uint64_t seed() const;
  std::size_t chunk_len() const;
  std::size_t k() const;

  corpus::SynthConfig synth_config() const;
  backbone::BackboneConfig backbone_config(std::size_t vocab_size) const;
  training::PretrainConfig pretrain_config() const;
  context::EncoderConfig encoder_config(std::size_t vocab_size) const;
  // Empty "fusion.layers" resolves to the last backbone layer.
  fusion::FusionConfig fusion_config() const;
  training::TrainConfig train_config() const;
  evaluation::EvalOptions eval_options() const;
  evaluation::LatencyOptions latency_options() const;

 private:
  nlohmann::json tree_;
};

// "4,5,6" -> {4, 5, 6}. Throws ConfigError on malformed input.
std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& key);
std::vector<double> parse_double_list(const std::string& text, const std::string& key);

}  // namespace refilter::cli
