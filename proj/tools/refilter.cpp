// refilter: synth -> index -> cache -> train -> eval -> bench -> visualize.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "refilter/cli/config.hpp"
#include "refilter/cli/pipeline.hpp"
#include "refilter/errors.hpp"
#include "refilter/evaluation/report.hpp"

namespace fs = std::filesystem;
using namespace refilter;
using nlohmann::json;

namespace {

struct Flags {
  std::string config, out, data, backbone, experiment, query_id, cache, init_from;
  std::vector<std::string> checkpoints;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k, chunk_len, epochs;
  std::optional<std::string> fusion_layers, batch_sizes;
  std::optional<double> lambda, noise_fraction;
  bool shuffle = false;
};

// defaults <- base (a checkpoint's stored config) <- --config <- flags
cli::RunConfig resolve(const Flags& f, const cli::RunConfig* base) {
  cli::RunConfig c = base ? *base : cli::RunConfig();
  if (!f.config.empty()) c.merge_file(f.config);
  if (f.seed) c.set("seed", *f.seed);
  if (f.k) c.set("fusion.k", *f.k);
  if (f.chunk_len) c.set("data.chunk_len", *f.chunk_len);
  if (f.epochs) c.set("train.epochs", *f.epochs);
  if (f.fusion_layers) c.set("fusion.layers", cli::parse_size_list(*f.fusion_layers, "--fusion-layers"));
  if (f.lambda) c.set("train.lambda", *f.lambda);
  if (f.noise_fraction) c.set("eval.noise_fraction", *f.noise_fraction);
  if (f.shuffle) c.set("eval.shuffle", true);
  if (f.batch_sizes) c.set("bench.batch_sizes", cli::parse_size_list(*f.batch_sizes, "--batch-sizes"));
  if (!f.backbone.empty()) c.set("backbone.checkpoint", f.backbone);
  if (!f.experiment.empty()) c.set("eval.experiment", f.experiment);
  if (!f.query_id.empty()) c.set("eval.query_id", f.query_id);
  c.validate();
  return c;
}

// Model-shaping keys must agree with the checkpoint being used.
void check_against(const cli::RunConfig& c, const cli::RunConfig& stored) {
  if (c.fusion_config().layers != stored.fusion_config().layers) {
    throw ConfigError("fusion.layers differ from the checkpoint's");
  }
  for (const char* key : {"fusion.k", "data.chunk_len", "backbone.layers",
                          "backbone.d_model", "encoder.d_encoder", "encoder.layers"}) {
    if (c.at(key) != stored.at(key)) {
      throw ConfigError(std::string(key) + " is " + c.at(key).dump() + " but the checkpoint has " +
                        stored.at(key).dump());
    }
  }
}

cli::RunConfig resolve_for(const Flags& f, const cli::LoadedReFilter& loaded) {
  cli::RunConfig c = resolve(f, &loaded.config);
  check_against(c, loaded.config);
  return c;
}

fs::path out_dir(const Flags& f, const std::string& command) {
  if (!f.out.empty()) return f.out;
  if (const char* root = std::getenv("REFILTER_OUT"); root && *root) return fs::path(root) / command;
  return fs::path("runs") / command;
}

void need(const std::string& value, const std::string& flag) {
  if (value.empty()) throw ConfigError(flag + " is required");
}

void log(const std::string& line) { std::cerr << line << std::endl; }

const std::string& first_checkpoint(const Flags& f) {
  if (f.checkpoints.empty()) throw ConfigError("--checkpoint is required");
  return f.checkpoints.front();
}

evaluation::Task task_for(const Flags& f, const cli::RunConfig& c) {
  need(f.data, "--data");
  return cli::load_task(f.data, c.chunk_len());
}

int cmd_synth(const Flags& f) {
  const cli::RunConfig c = resolve(f, nullptr);
  const fs::path out = out_dir(f, "synth");
  const corpus::SynthData d = corpus::generate_synthetic(c.synth_config());
  cli::write_synth(out, d, corpus::synth_vocabulary());
  cli::write_resolved_config(out, c, "synth");
  log("wrote " + std::to_string(d.corpus.size()) + " documents, " + std::to_string(d.qa.size()) +
      " questions to " + out.string());
  return 0;
}

int cmd_index(const Flags& f) {
  const cli::RunConfig c = resolve(f, nullptr);
  const fs::path out = out_dir(f, "index");
  const evaluation::Task task = task_for(f, c);
  fs::create_directories(out);
  task.index.save(out / "index.bin");
  const auto k_values = c.at("eval.k_values").get<std::vector<std::size_t>>();
  std::ofstream csv(out / "recall.csv");
  csv << "k,recall,examples\n";
  for (const auto& row : retriever::recall_vs_k_sweep(task.index, task.test, k_values)) {
    csv << row.k << ',' << row.recall << ',' << row.examples << '\n';
  }
  cli::write_resolved_config(out, c, "index");
  log("indexed " + std::to_string(task.index.num_chunks()) + " chunks into " + out.string());
  return 0;
}

int cmd_pretrain(const Flags& f) {
  cli::RunConfig c = resolve(f, nullptr);
  c.set("backbone.checkpoint", std::string());
  const fs::path out = out_dir(f, "pretrain");
  const corpus::Vocabulary vocab =
      f.data.empty() ? corpus::synth_vocabulary() : corpus::Vocabulary::load(cli::DataFiles(f.data).vocab);
  cli::write_resolved_config(out, c, "pretrain");
  const auto b = cli::obtain_backbone(c, vocab, out / "backbone.ckpt", log);
  log("pretrained backbone in " + std::to_string(b.seconds) + " s");
  return 0;
}

int cmd_train(const Flags& f) {
  cli::RunConfig c = resolve(f, nullptr);
  const fs::path out = out_dir(f, "train");
  const evaluation::Task task = task_for(f, c);
  fs::create_directories(out);
  auto bb = cli::obtain_backbone(c, task.vocab, out / "backbone.ckpt", log);
  if (c.at("backbone.checkpoint").get<std::string>().empty()) {
    c.set("backbone.checkpoint", (out / "backbone.ckpt").string());
  }
  cli::write_resolved_config(out, c, "train");
  std::optional<cli::LoadedReFilter> init;
  if (!f.init_from.empty()) {
    init = cli::load_refilter(f.init_from);
    if (f.epochs) c.set("train.warm_start_epochs", *f.epochs);
  }
  std::ofstream metrics(out / "metrics.jsonl");
  auto run = cli::train_refilter(c, task, bb.model, [&](const training::MetricRecord& r) {
    metrics << training::metric_json(r) << '\n';
    if (r.dev_metric) {
      log("epoch " + std::to_string(r.epoch) + " nll " + std::to_string(r.nll) + " dev_em " +
          std::to_string(*r.dev_metric));
    }
  }, init ? init->model.get() : nullptr);
  cli::save_refilter(out / "refilter.ckpt", *run.model, c, &run.state);
  std::ofstream(out / "train_summary.json")
      << json{{"best_epoch", run.state.best_epoch},
              {"best_dev_metric", run.state.best_dev},
              {"seconds", run.seconds},
              {"pretrain_seconds", bb.seconds},
              {"init_from", f.init_from}}
             .dump(2)
      << '\n';
  log("best dev exact match " + std::to_string(run.state.best_dev) + " at epoch " +
      std::to_string(run.state.best_epoch) + "; checkpoint " + (out / "refilter.ckpt").string());
  return 0;
}

int cmd_cache(const Flags& f) {
  auto loaded = cli::load_refilter(first_checkpoint(f));
  const cli::RunConfig c = resolve_for(f, loaded);
  const fs::path out = out_dir(f, "cache");
  const evaluation::Task task = task_for(f, c);
  const auto cache = context::build_cache(loaded.model->encoder(), task.store);
  fs::create_directories(out);
  cache.save((out / "features.cache").string());
  cli::write_resolved_config(out, c, "cache");
  log("cached " + std::to_string(cache.filled()) + " chunk features");
  return 0;
}

int cmd_eval(const Flags& f) {
  auto loaded = cli::load_refilter(first_checkpoint(f));
  const cli::RunConfig c = resolve_for(f, loaded);
  const fs::path out = out_dir(f, "eval");
  const evaluation::Task task = task_for(f, c);
  cli::write_resolved_config(out, c, "eval");

  std::optional<context::FeatureCache> cache;
  if (!f.cache.empty()) cache = context::FeatureCache::load(f.cache);
  const evaluation::Models models{&loaded.model->backbone(), loaded.model.get(),
                                  cache ? &*cache : nullptr};
  const auto opts = c.eval_options();
  const auto methods = c.at("eval.methods").get<std::vector<std::string>>();
  const std::string experiment = c.at("eval.experiment").get<std::string>();
  const std::size_t k = loaded.model->config().k;
  std::vector<evaluation::EvalReport> reports;

  if (experiment == "clean") {
    for (const auto& m : methods) {
      evaluation::Condition cond{"clean", m, m == evaluation::kNoRetrieval ? 0 : k,
                                 c.at("eval.noise_fraction").get<double>(),
                                 c.at("eval.shuffle").get<bool>(), c.seed()};
      reports.push_back(evaluation::evaluate(task, task.test, cond, models, opts));
    }
  } else if (experiment == "decoupling") {
    std::vector<cli::LoadedReFilter> extra;
    std::map<std::size_t, const fusion::ReFilter*> by_k{{k, loaded.model.get()}};
    for (std::size_t i = 1; i < f.checkpoints.size(); ++i) {
      extra.push_back(cli::load_refilter(f.checkpoints[i]));
      by_k[extra.back().model->config().k] = extra.back().model.get();
    }
    const auto result = evaluation::run_decoupling(
        task, task.test, c.at("eval.k_values").get<std::vector<std::size_t>>(),
        loaded.model->backbone(), by_k, c.seed(), opts);
    reports = result.reports;
    std::ofstream csv(out / "decoupling.csv");
    csv << "k,recall," << evaluation::kSrag << ',' << evaluation::kReFilter << '\n';
    for (const auto& row : result.rows) {
      csv << row.k << ',' << row.recall << ',';
      if (row.downstream.count(evaluation::kSrag)) csv << row.downstream.at(evaluation::kSrag);
      csv << ',';
      if (row.downstream.count(evaluation::kReFilter)) csv << row.downstream.at(evaluation::kReFilter);
      csv << '\n';
    }
  } else if (experiment == "noise") {
    std::vector<double> fractions = c.at("eval.noise_fractions").get<std::vector<double>>();
    if (f.noise_fraction) fractions = {0.0, *f.noise_fraction};
    reports = evaluation::run_noise(task, task.test, fractions, methods, models, k, c.seed(), opts);
  } else {
    const auto result = evaluation::run_shuffle(task, task.test, methods, models, k, c.seed(), opts);
    reports = result.in_order;
    reports.insert(reports.end(), result.shuffled.begin(), result.shuffled.end());
    std::ofstream(out / "shuffle_delta.json") << json(result.mean_abs_delta).dump(2) << '\n';
  }
  for (const auto& r : reports) {
    evaluation::write_report(out, r);
    log(r.condition.tag() + ": exact_match " + std::to_string(r.mean_metric) + " f1 " +
        std::to_string(r.mean_f1));
  }
  evaluation::write_summary_csv(out / "summary.csv", reports);
  return 0;
}

int cmd_bench(const Flags& f) {
  auto loaded = cli::load_refilter(first_checkpoint(f));
  const cli::RunConfig c = resolve_for(f, loaded);
  const fs::path out = out_dir(f, "bench");
  const evaluation::Task task = task_for(f, c);
  cli::write_resolved_config(out, c, "bench");
  const evaluation::Models models{&loaded.model->backbone(), loaded.model.get(), nullptr};
  const auto reports =
      evaluation::run_latency(task, task.test, {evaluation::kSrag, evaluation::kReFilter}, models,
                              loaded.model->config().k, c.latency_options());
  evaluation::write_latency_csv(out / "latency.csv", reports);
  std::ofstream jsonl(out / "latency.jsonl");
  for (const auto& r : reports) {
    jsonl << evaluation::latency_json(r) << '\n';
    log(r.method + " batch " + std::to_string(r.batch_size) + ": " + std::to_string(r.mean_ms) +
        " ms/query");
  }
  return 0;
}

int cmd_visualize(const Flags& f) {
  auto loaded = cli::load_refilter(first_checkpoint(f));
  const cli::RunConfig c = resolve_for(f, loaded);
  const fs::path out = out_dir(f, "visualize");
  const evaluation::Task task = task_for(f, c);
  if (task.test.empty()) throw DataError("no test questions");
  const std::string id = c.at("eval.query_id").get<std::string>();
  const corpus::QAExample* query = &task.test.front();
  if (!id.empty()) {
    query = nullptr;
    for (const auto& q : task.test) {
      if (q.id == id) query = &q;
    }
    for (const auto& q : task.train) {
      if (!query && q.id == id) query = &q;
    }
    if (!query) throw DataError("unknown query id '" + id + "'");
  }
  cli::write_resolved_config(out, c, "visualize");
  const auto chunks = evaluation::deliver(task, {*query}, loaded.model->config().k,
                                          c.at("eval.noise_fraction").get<double>(),
                                          c.at("eval.shuffle").get<bool>(), c.seed());
  const auto records = evaluation::export_weights(*loaded.model, task, *query, chunks.front(),
                                                  c.eval_options().max_new);
  std::ofstream dump(out / "weights.jsonl");
  for (const auto& r : records) {
    gate::write_weight_record(dump, r);
    const auto s = evaluation::summarize_weights(r);
    log("layer " + std::to_string(r.layer) + ": prediction '" + r.prediction + "', mean W_t gold " +
        std::to_string(s.mean_gold) + " vs all " + std::to_string(s.mean_all));
  }
  return 0;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kFile:
      return 1;
    case ErrorKind::kNumeric:
    case ErrorKind::kTraining:
      return 3;
    default:
      return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ReFilter: token-level gated fusion of retrieved chunks, at desk scale"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "JSON config file merged over the defaults");
  app.add_option("--seed", f.seed, "Run seed");
  app.add_option("--k", f.k, "Retrieved chunks per query");
  app.add_option("--chunk-len", f.chunk_len, "Tokens per chunk");
  app.add_option("--fusion-layers", f.fusion_layers, "Comma-separated fusion layers, 1-based");
  app.add_option("--lambda", f.lambda, "Gate sparsity weight");
  app.add_option("--noise-fraction", f.noise_fraction, "Fraction of retrieved chunks replaced by noise");
  app.add_flag("--shuffle", f.shuffle, "Shuffle retrieved chunks");
  app.add_option("--batch-sizes", f.batch_sizes, "Comma-separated latency batch sizes");
  app.add_option("--out", f.out, "Output directory");
  app.add_option("--data", f.data, "Data directory written by synth");
  app.add_option("--checkpoint", f.checkpoints, "ReFilter checkpoint (repeat for decoupling)");
  app.add_option("--backbone", f.backbone, "Pretrained backbone checkpoint");
  app.add_option("--cache", f.cache, "Feature cache written by cache");
  app.add_option("--experiment", f.experiment, "clean, decoupling, noise or shuffle");
  app.add_option("--query-id", f.query_id, "Query to visualize");
  app.add_option("--epochs", f.epochs, "Training epochs");
  app.add_option("--init-from", f.init_from, "Warm-start train from this ReFilter checkpoint");

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Flags&);
  };
  const Command commands[] = {
      {"synth", "Write a synthetic planted-fact corpus, QA set and noise pool", cmd_synth},
      {"index", "Build the BM25 index and a recall-vs-k table", cmd_index},
      {"pretrain", "Pretrain the toy backbone", cmd_pretrain},
      {"cache", "Precompute encoder features for every chunk", cmd_cache},
      {"train", "Train ReFilter on a frozen backbone", cmd_train},
      {"eval", "Run an evaluation experiment", cmd_eval},
      {"bench", "Measure per-query latency by batch size", cmd_bench},
      {"visualize", "Dump token weights for one query", cmd_visualize},
  };
  for (const auto& cmd : commands) app.add_subcommand(cmd.name, cmd.help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    for (const auto& cmd : commands) {
      if (app.got_subcommand(cmd.name)) return cmd.run(f);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
