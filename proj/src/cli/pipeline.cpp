#include "refilter/cli/pipeline.hpp"

#include <chrono>
#include <fstream>

#include "refilter/errors.hpp"
#include "refilter/evaluation/prompt.hpp"

namespace refilter::cli {
namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

json header(const std::filesystem::path& path, const std::string& kind) {
  if (!std::filesystem::exists(path)) throw FileError("checkpoint not found: " + path.string());
  json h;
  try {
    h = json::parse(training::checkpoint_config(path.string()));
  } catch (const json::exception& e) {
    throw IncompatibleError(path.string() + ": unreadable checkpoint header: " + e.what());
  }
  if (!h.is_object() || h.value("kind", "") != kind) {
    throw IncompatibleError(path.string() + " is not a " + kind + " checkpoint");
  }
  return h;
}

RunConfig stored_config(const json& h) {
  RunConfig c;
  c.merge(h.at("config"));
  return c;
}

}  // namespace

DataFiles::DataFiles(const std::filesystem::path& dir)
    : corpus(dir / "corpus.jsonl"),
      noise(dir / "noise.jsonl"),
      qa(dir / "qa.jsonl"),
      vocab(dir / "vocab.txt") {}

void write_synth(const std::filesystem::path& dir, const corpus::SynthData& data,
                 const corpus::Vocabulary& vocab) {
  const DataFiles f(dir);
  corpus::save_corpus(f.corpus, data.corpus);
  corpus::save_corpus(f.noise, data.noise);
  corpus::save_dataset(f.qa, data.qa);
  vocab.save(f.vocab);
}

evaluation::Task load_task(const std::filesystem::path& dir, std::size_t chunk_len) {
  const DataFiles f(dir);
  for (const auto& p : {f.corpus, f.noise, f.qa, f.vocab}) {
    if (!std::filesystem::exists(p)) throw FileError("missing data file " + p.string());
  }
  return evaluation::make_task(corpus::Vocabulary::load(f.vocab), corpus::load_corpus(f.corpus),
                               corpus::load_corpus(f.noise), corpus::load_dataset(f.qa), chunk_len);
}

evaluation::Task synth_task(const corpus::SynthConfig& config) {
  const corpus::SynthData d = corpus::generate_synthetic(config);
  return evaluation::make_task(corpus::synth_vocabulary(), d.corpus, d.noise, d.qa,
                               config.chunk_len);
}

std::shared_ptr<backbone::Backbone> pretrain(const RunConfig& config,
                                             const corpus::Vocabulary& vocab,
                                             const Progress& progress) {
  if (vocab.tokens() != corpus::synth_vocabulary().tokens()) {
    throw ConfigError(
        "backbone.checkpoint is required: pretraining needs the synthetic vocabulary");
  }
  corpus::SynthConfig sc = config.synth_config();
  sc.seed = config.at("backbone.pretrain.corpus_seed").get<std::uint64_t>();
  sc.num_entities = config.at("backbone.pretrain.num_entities").get<std::size_t>();
  sc.all_train = true;
  const evaluation::Task world = synth_task(sc);
  const std::size_t k_max = config.at("backbone.pretrain.k_max").get<std::size_t>();

  const backbone::BackboneConfig bc = config.backbone_config(vocab.size());
  const std::size_t reserve = config.eval_options().max_new;
  auto sample = [&](std::mt19937_64& rng) {
    const corpus::QAExample& q = world.train[rng() % world.train.size()];
    const std::size_t k = rng() % (k_max + 1);
    std::vector<corpus::Chunk> chunks;
    if (k > 0) {
      const auto r = retriever::search(world.index, q.question, k, {.pad_to_k = true});
      for (const auto& h : r.hits) chunks.push_back(world.store.at(h.ordinal));
    }
    return training::LmExample{
        evaluation::srag_prompt(world.vocab, chunks, q.question, bc.max_positions, reserve).tokens,
        evaluation::answer_targets(world.vocab, q.answers.front())};
  };

  auto model = std::make_shared<backbone::Backbone>(
      bc, config.at("backbone.init_seed").get<std::uint64_t>());
  const training::PretrainConfig pc = config.pretrain_config();
  training::pretrain_backbone(*model, sample, pc, [&](std::size_t step, double loss) {
    if (progress && (step % 100 == 0 || step == pc.steps)) {
      progress("pretrain step " + std::to_string(step) + "/" + std::to_string(pc.steps) +
               " loss " + std::to_string(loss));
    }
  });
  model->params().set_trainable_all(false);
  return model;
}

void save_backbone(const std::filesystem::path& path, const backbone::Backbone& model,
                   const RunConfig& config, double seconds) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const json h = {{"kind", "backbone"},
                  {"config", config.tree()},
                  {"vocab_size", model.config().vocab_size},
                  {"seconds", seconds}};
  training::save_checkpoint(path.string(), model.params(), h.dump(), nullptr);
}

LoadedBackbone load_backbone(const std::filesystem::path& path) {
  const json h = header(path, "backbone");
  const RunConfig stored = stored_config(h);
  LoadedBackbone out;
  // the vocabulary size is not part of the config tree
  backbone::BackboneConfig bc = stored.backbone_config(h.value("vocab_size", std::size_t{0}));
  if (bc.vocab_size == 0) throw IncompatibleError(path.string() + ": header lacks vocab_size");
  out.model = std::make_shared<backbone::Backbone>(bc, 0);
  training::load_checkpoint(path.string(), out.model->params(), true);
  out.model->params().set_trainable_all(false);
  out.seconds = h.value("seconds", 0.0);
  return out;
}

LoadedBackbone obtain_backbone(RunConfig& config, const corpus::Vocabulary& vocab,
                               const std::filesystem::path& save_to, const Progress& progress) {
  const std::string ckpt = config.at("backbone.checkpoint").get<std::string>();
  if (!ckpt.empty()) {
    LoadedBackbone b = load_backbone(ckpt);
    const RunConfig stored = stored_config(header(ckpt, "backbone"));
    for (const char* key : {"layers", "d_model", "heads", "d_ff", "max_positions"}) {
      const std::string dotted = std::string("backbone.") + key;
      config.set(dotted, stored.at(dotted));
    }
    if (b.model->config().vocab_size != vocab.size()) {
      throw IncompatibleError("backbone vocabulary size " +
                              std::to_string(b.model->config().vocab_size) +
                              " does not match the data's " + std::to_string(vocab.size()));
    }
    return b;
  }
  const auto t0 = Clock::now();
  LoadedBackbone b;
  b.model = pretrain(config, vocab, progress);
  b.seconds = seconds_since(t0);
  if (!save_to.empty()) save_backbone(save_to, *b.model, config, b.seconds);
  return b;
}

void warm_start(fusion::ReFilter& dst, const fusion::ReFilter& src) {
  for (auto& p : dst.params().items()) {
    if (!p.trainable) continue;
    if (!src.params().contains(p.name)) {
      throw IncompatibleError("warm start: source lacks parameter " + p.name);
    }
    const auto from = src.params().get(p.name).tensor.values();
    auto to = p.tensor.mutable_values();
    const bool is_mask = p.name.size() >= 3 && p.name.compare(p.name.size() - 3, 3, ".mu") == 0;
    if (from.size() != to.size() && !is_mask) {
      throw DimensionError("warm start: shape mismatch for " + p.name);
    }
    std::copy_n(from.begin(), std::min(from.size(), to.size()), to.begin());
  }
}

TrainedReFilter train_refilter(const RunConfig& config, const evaluation::Task& task,
                               std::shared_ptr<backbone::Backbone> backbone,
                               const std::function<void(const training::MetricRecord&)>& on_record,
                               const fusion::ReFilter* init_from) {
  const auto t0 = Clock::now();
  training::TrainConfig tc = config.train_config();
  if (init_from) tc.epochs = config.at("train.warm_start_epochs").get<std::size_t>();
  tc.validate();
  const fusion::FusionConfig fc = config.fusion_config();
  const auto examples =
      training::build_examples(task.train, task.vocab, task.index, task.store, fc.k);
  std::vector<training::Example> fit, dev;
  training::split_dev(examples, tc.dev_fraction, tc.seed, fit, dev);
  if (fit.empty()) throw DataError("no training examples");

  TrainedReFilter out;
  out.model = std::make_unique<fusion::ReFilter>(std::move(backbone),
                                                 config.encoder_config(task.vocab.size()), fc,
                                                 config.seed());
  if (init_from) warm_start(*out.model, *init_from);
  out.state = training::initial_state(*out.model, tc, fit.size());
  training::train(*out.model, fit, dev, tc, out.state, {std::nullopt, on_record});
  out.seconds = seconds_since(t0);
  return out;
}

void save_refilter(const std::filesystem::path& path, const fusion::ReFilter& model,
                   const RunConfig& config, const training::TrainState* state) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const json h = {{"kind", "refilter"},
                  {"config", config.tree()},
                  {"vocab_size", model.backbone().config().vocab_size}};
  training::save_checkpoint(path.string(), model.params(), h.dump(), state);
}

LoadedReFilter load_refilter(const std::filesystem::path& path) {
  const json h = header(path, "refilter");
  LoadedReFilter out{nullptr, stored_config(h)};
  const std::size_t vocab_size = h.value("vocab_size", std::size_t{0});
  if (vocab_size == 0) throw IncompatibleError(path.string() + ": header lacks vocab_size");
  auto bb = std::make_shared<backbone::Backbone>(out.config.backbone_config(vocab_size), 0);
  out.model = std::make_unique<fusion::ReFilter>(bb, out.config.encoder_config(vocab_size),
                                                 out.config.fusion_config(), out.config.seed());
  training::load_checkpoint(path.string(), out.model->params(), true);
  bb->params().set_trainable_all(false);
  return out;
}

void write_resolved_config(const std::filesystem::path& dir, const RunConfig& config,
                           const std::string& command) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.json");
  if (!out) throw FileError("cannot write " + (dir / "config.json").string());
  out << json{{"command", command}, {"config", config.tree()}}.dump(2) << '\n';
}

}  // namespace refilter::cli
