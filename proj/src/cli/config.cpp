#include "refilter/cli/config.hpp"

#include <fstream>
#include <sstream>

#include "refilter/errors.hpp"

namespace refilter::cli {
namespace {

using nlohmann::json;

std::vector<std::string> split_key(const std::string& key) {
  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  return parts;
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // integers may not receive fractional values
    return !(a.is_number_integer() && b.is_number_float());
  }
  return a.type() == b.type();
}

void merge_into(json& dst, const json& src, const std::string& prefix) {
  if (!src.is_object()) throw ConfigError((prefix.empty() ? "config" : prefix) + ": expected an object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!dst.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = dst[it.key()];
    if (slot.is_object()) {
      merge_into(slot, it.value(), key);
      continue;
    }
    if (!same_kind(slot, it.value())) {
      const std::string want = slot.is_number_integer() ? "an integer" : slot.type_name();
      throw ConfigError("config key '" + key + "' expects " + want + ", got " +
                        it.value().dump());
    }
    if (slot.is_array()) {
      for (const auto& e : it.value()) {
        if (!slot.empty() && !same_kind(slot.front(), e)) {
          throw ConfigError("config key '" + key + "' has an element of the wrong type");
        }
      }
    }
    slot = it.value();
  }
}

std::size_t get_size(const json& tree, const std::string& key) {
  const json* node = &tree;
  for (const auto& part : split_key(key)) node = &node->at(part);
  if (!node->is_number_integer() || node->get<long long>() < 0) {
    throw ConfigError("config key '" + key + "' must be a non-negative integer");
  }
  return node->get<std::size_t>();
}

double get_double(const json& tree, const std::string& key) {
  const json* node = &tree;
  for (const auto& part : split_key(key)) node = &node->at(part);
  return node->get<double>();
}

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError("config key '" + key + "' " + what);
}

}  // namespace

json RunConfig::defaults() {
  return {
      {"seed", 1},
      {"data", {{"chunk_len", 16}}},
      {"synth",
       {{"num_entities", 250},
        {"facts_per_entity", 3},
        {"mentions_per_entity", 6},
        {"synonym_prob", 0.35},
        {"num_test", 200},
        {"num_noise_docs", 40},
        {"noise_chunks_per_doc", 4}}},
      {"backbone",
       {{"layers", 6},
        {"d_model", 64},
        {"heads", 4},
        {"d_ff", 256},
        {"max_positions", 160},
        {"init_seed", 7},
        {"checkpoint", ""},
        {"pretrain",
         {{"steps", 1500},
          {"batch_size", 16},
          {"lr", 1e-3},
          {"warmup_fraction", 0.05},
          {"clip_norm", 1.0},
          {"seed", 1},
          {"corpus_seed", 1000},
          {"num_entities", 600},
          {"k_max", 8}}}}},
      {"encoder", {{"d_encoder", 32}, {"layers", 2}, {"heads", 2}, {"d_ff", 64}}},
      {"fusion",
       {{"k", 3},
        {"layers", json::array()},
        {"dropout", 0.1},
        {"alpha_init", 0.1},
        {"recompute_per_step", true}}},
      {"train",
       {{"epochs", 40},
        {"warm_start_epochs", 20},
        {"batch_size", 16},
        {"lr", 3e-3},
        {"warmup_fraction", 0.05},
        {"weight_decay", 0.01},
        {"clip_norm", 1.0},
        {"lambda", 0.01},
        {"dev_fraction", 0.1},
        {"train_encoder", true}}},
      {"eval",
       {{"experiment", "clean"},
        {"methods", {evaluation::kNoRetrieval, evaluation::kSrag, evaluation::kReFilter}},
        {"noise_fraction", 0.0},
        {"shuffle", false},
        {"k_values", {1, 3, 5, 8}},
        {"noise_fractions", {0.0, 0.33, 0.66}},
        {"max_new", 4},
        {"batch_size", 32},
        {"query_id", ""}}},
      {"bench",
       {{"batch_sizes", {1, 4, 8, 16, 32, 64}}, {"trials", 20}, {"warmup", 3}, {"gen_tokens", 32}}},
  };
}

RunConfig::RunConfig() : tree_(defaults()) {}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open config file " + path.string());
  json patch;
  try {
    patch = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  merge(patch);
}

void RunConfig::merge(const json& patch) { merge_into(tree_, patch, ""); }

void RunConfig::set(const std::string& key, const json& value) {
  json patch = value;
  const auto parts = split_key(key);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge(patch);
}

const json& RunConfig::at(const std::string& key) const {
  const json* node = &tree_;
  for (const auto& part : split_key(key)) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &node->at(part);
  }
  return *node;
}

void RunConfig::validate() const {
  for (const char* key : {"data.chunk_len", "backbone.layers", "backbone.d_model", "backbone.heads",
                          "backbone.max_positions", "encoder.d_encoder", "encoder.layers",
                          "encoder.heads", "fusion.k", "train.epochs", "train.warm_start_epochs", "train.batch_size",
                          "eval.max_new", "eval.batch_size", "bench.trials"}) {
    require(get_size(tree_, key) >= 1, key, "must be at least 1");
  }
  require(get_size(tree_, "backbone.d_model") % get_size(tree_, "backbone.heads") == 0,
          "backbone.heads", "must divide backbone.d_model");
  require(get_size(tree_, "encoder.d_encoder") % get_size(tree_, "encoder.heads") == 0,
          "encoder.heads", "must divide encoder.d_encoder");
  const std::size_t L = get_size(tree_, "backbone.layers");
  for (const auto& l : tree_["fusion"]["layers"]) {
    require(l.is_number_integer() && l.get<long long>() >= 1 && l.get<std::size_t>() <= L,
            "fusion.layers", "entries must lie in 1.." + std::to_string(L));
  }
  require(get_double(tree_, "train.lambda") >= 0.0, "train.lambda", "must be non-negative");
  require(get_double(tree_, "train.lr") > 0.0, "train.lr", "must be positive");
  const double nf = get_double(tree_, "eval.noise_fraction");
  require(nf >= 0.0 && nf <= 1.0, "eval.noise_fraction", "must lie in [0, 1]");
  for (const auto& f : tree_["eval"]["noise_fractions"]) {
    require(f.get<double>() >= 0.0 && f.get<double>() <= 1.0, "eval.noise_fractions",
            "entries must lie in [0, 1]");
  }
  for (const auto& m : tree_["eval"]["methods"]) {
    const auto s = m.get<std::string>();
    require(s == evaluation::kNoRetrieval || s == evaluation::kSrag || s == evaluation::kReFilter,
            "eval.methods", "has unknown method '" + s + "'");
  }
  const auto exp = tree_["eval"]["experiment"].get<std::string>();
  require(exp == "clean" || exp == "decoupling" || exp == "noise" || exp == "shuffle",
          "eval.experiment", "must be one of clean, decoupling, noise, shuffle");
  for (const auto& b : tree_["bench"]["batch_sizes"]) {
    require(b.is_number_integer() && b.get<long long>() >= 1, "bench.batch_sizes",
            "entries must be positive integers");
  }
  for (const auto& k : tree_["eval"]["k_values"]) {
    require(k.is_number_integer() && k.get<long long>() >= 1, "eval.k_values",
            "entries must be positive integers");
  }
}

std::uint64_t RunConfig::seed() const { return tree_.at("seed").get<std::uint64_t>(); }
std::size_t RunConfig::chunk_len() const { return get_size(tree_, "data.chunk_len"); }
std::size_t RunConfig::k() const { return get_size(tree_, "fusion.k"); }

corpus::SynthConfig RunConfig::synth_config() const {
  corpus::SynthConfig c;
  c.seed = seed();
  c.num_entities = get_size(tree_, "synth.num_entities");
  c.facts_per_entity = get_size(tree_, "synth.facts_per_entity");
  c.mentions_per_entity = get_size(tree_, "synth.mentions_per_entity");
  c.synonym_prob = get_double(tree_, "synth.synonym_prob");
  c.num_test = get_size(tree_, "synth.num_test");
  c.num_noise_docs = get_size(tree_, "synth.num_noise_docs");
  c.noise_chunks_per_doc = get_size(tree_, "synth.noise_chunks_per_doc");
  c.chunk_len = chunk_len();
  return c;
}

backbone::BackboneConfig RunConfig::backbone_config(std::size_t vocab_size) const {
  backbone::BackboneConfig c;
  c.vocab_size = vocab_size;
  c.d_model = get_size(tree_, "backbone.d_model");
  c.n_layers = get_size(tree_, "backbone.layers");
  c.n_heads = get_size(tree_, "backbone.heads");
  c.d_ff = get_size(tree_, "backbone.d_ff");
  c.max_positions = get_size(tree_, "backbone.max_positions");
  return c;
}

training::PretrainConfig RunConfig::pretrain_config() const {
  training::PretrainConfig c;
  c.steps = get_size(tree_, "backbone.pretrain.steps");
  c.batch_size = get_size(tree_, "backbone.pretrain.batch_size");
  c.lr = get_double(tree_, "backbone.pretrain.lr");
  c.warmup_fraction = get_double(tree_, "backbone.pretrain.warmup_fraction");
  c.clip_norm = get_double(tree_, "backbone.pretrain.clip_norm");
  c.seed = tree_["backbone"]["pretrain"]["seed"].get<std::uint64_t>();
  return c;
}

context::EncoderConfig RunConfig::encoder_config(std::size_t vocab_size) const {
  context::EncoderConfig c;
  c.vocab_size = vocab_size;
  c.d_encoder = get_size(tree_, "encoder.d_encoder");
  c.n_layers = get_size(tree_, "encoder.layers");
  c.n_heads = get_size(tree_, "encoder.heads");
  c.d_ff = get_size(tree_, "encoder.d_ff");
  c.chunk_len = chunk_len();
  c.d_model = get_size(tree_, "backbone.d_model");
  return c;
}

fusion::FusionConfig RunConfig::fusion_config() const {
  fusion::FusionConfig c;
  c.layers = tree_["fusion"]["layers"].get<std::vector<std::size_t>>();
  if (c.layers.empty()) c.layers = {get_size(tree_, "backbone.layers")};
  c.k = k();
  c.s = chunk_len();
  c.lambda = get_double(tree_, "train.lambda");
  c.dropout = get_double(tree_, "fusion.dropout");
  c.alpha_init = get_double(tree_, "fusion.alpha_init");
  c.recompute_per_step = tree_["fusion"]["recompute_per_step"].get<bool>();
  return c;
}

training::TrainConfig RunConfig::train_config() const {
  training::TrainConfig c;
  c.epochs = get_size(tree_, "train.epochs");
  c.batch_size = get_size(tree_, "train.batch_size");
  c.lr = get_double(tree_, "train.lr");
  c.warmup_fraction = get_double(tree_, "train.warmup_fraction");
  c.weight_decay = get_double(tree_, "train.weight_decay");
  c.clip_norm = get_double(tree_, "train.clip_norm");
  c.lambda = get_double(tree_, "train.lambda");
  c.seed = seed();
  c.dev_fraction = get_double(tree_, "train.dev_fraction");
  c.train_encoder = tree_["train"]["train_encoder"].get<bool>();
  c.dev_max_new = get_size(tree_, "eval.max_new");
  return c;
}

evaluation::EvalOptions RunConfig::eval_options() const {
  evaluation::EvalOptions o;
  o.max_new = get_size(tree_, "eval.max_new");
  o.batch_size = get_size(tree_, "eval.batch_size");
  return o;
}

evaluation::LatencyOptions RunConfig::latency_options() const {
  evaluation::LatencyOptions o;
  o.batch_sizes = tree_["bench"]["batch_sizes"].get<std::vector<std::size_t>>();
  o.trials = get_size(tree_, "bench.trials");
  o.warmup = get_size(tree_, "bench.warmup");
  o.gen_tokens = get_size(tree_, "bench.gen_tokens");
  return o;
}

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& key) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size() || item.front() == '-') {
      throw ConfigError(key + ": '" + item + "' is not a non-negative integer");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::vector<double> parse_double_list(const std::string& text, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError(key + ": '" + item + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

}  // namespace refilter::cli
