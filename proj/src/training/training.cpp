#include "refilter/training/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "refilter/backbone/decode.hpp"
#include "refilter/binary_io.hpp"
#include "refilter/errors.hpp"
#include "refilter/evaluation/prompt.hpp"
#include "refilter/gated_filter/gate.hpp"

namespace refilter::training {
namespace {

using namespace refilter::nn;

constexpr char kMagic[8] = {'R', 'F', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t step_seed(std::uint64_t seed, std::uint64_t step) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (step + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<int> strip_eos(std::vector<int> t) {
  auto it = std::find(t.begin(), t.end(), corpus::kEosId);
  t.erase(it, t.end());
  return t;
}

void check_finite(double v, const std::string& what, const std::vector<const Example*>& batch) {
  if (std::isfinite(v)) return;
  std::string ids;
  for (const Example* e : batch) ids += (ids.empty() ? "" : ",") + e->id;
  throw NumericError("non-finite " + what + " on batch [" + ids + "]");
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(dev_fraction >= 0.0 && dev_fraction < 1.0)) throw ConfigError("dev_fraction must lie in [0, 1)");
}

std::vector<Example> build_examples(const std::vector<corpus::QAExample>& qa,
                                    const corpus::Vocabulary& vocab,
                                    const retriever::InvertedIndex& index,
                                    const corpus::ChunkStore& store, std::size_t k) {
  std::vector<Example> out;
  out.reserve(qa.size());
  for (const auto& q : qa) {
    Example e;
    e.id = q.id;
    e.prompt = evaluation::question_prompt(vocab, q.question);
    e.answers = q.answers;
    if (!q.answers.empty()) e.targets = evaluation::answer_targets(vocab, q.answers.front());
    if (k > 0) {
      const auto r = retriever::search(index, q.question, k, {.pad_to_k = true}, q.id);
      e.chunks = context::pool_chunks(r, store);
    }
    out.push_back(std::move(e));
  }
  return out;
}

void split_dev(const std::vector<Example>& train, double fraction, std::uint64_t seed,
               std::vector<Example>& fit, std::vector<Example>& dev) {
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ 0xde5ULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t n_dev = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(train.size())));
  if (fraction > 0.0 && train.size() > 1) n_dev = std::max<std::size_t>(n_dev, 1);
  n_dev = std::min(n_dev, train.size() > 0 ? train.size() - 1 : 0);
  std::vector<bool> is_dev(train.size(), false);
  for (std::size_t i = 0; i < n_dev; ++i) is_dev[idx[i]] = true;
  fit.clear();
  dev.clear();
  for (std::size_t i = 0; i < train.size(); ++i) (is_dev[i] ? dev : fit).push_back(train[i]);
}

std::vector<context::ContextEmbeddings> batch_pools(const fusion::ReFilter& model,
                                                    const std::vector<const Example*>& batch,
                                                    bool fresh,
                                                    const context::FeatureCache* cache) {
  std::vector<context::ContextEmbeddings> pools(batch.size());
  context::PoolOptions opts;
  opts.cache = cache;
  opts.fresh_features = fresh;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch[i]->chunks.empty()) pools[i] = context::build_pool(batch[i]->chunks, model.encoder(), opts);
  }
  return pools;
}

LossBreakdown compute_loss(const fusion::ReFilter& model, const std::vector<const Example*>& batch,
                           double lambda, bool training, std::uint64_t seed) {
  std::vector<const Example*> used;
  for (const Example* e : batch) {
    if (e->targets.empty() || e->targets.size() == 1) {
      std::cerr << "warning: skipping example '" << e->id << "' with an empty answer\n";
      continue;
    }
    used.push_back(e);
  }
  LossBreakdown out;
  out.examples = used.size();
  if (used.empty()) {
    out.total_tensor = Tensor::scalar(0.0);
    return out;
  }
  const bool fresh = training && model.params().get("encoder.tok_emb").trainable;
  std::vector<context::ContextEmbeddings> pools = batch_pools(model, used, fresh);
  std::vector<const context::ContextEmbeddings*> pool_ptrs(used.size(), nullptr);
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<std::size_t>> positions;
  std::vector<int> targets;
  for (std::size_t i = 0; i < used.size(); ++i) {
    const Example& e = *used[i];
    if (!e.chunks.empty()) pool_ptrs[i] = &pools[i];
    std::vector<int> seq = e.prompt;
    seq.insert(seq.end(), e.targets.begin(), e.targets.end() - 1);
    std::vector<std::size_t> pos;
    for (std::size_t t = 0; t < e.targets.size(); ++t) pos.push_back(e.prompt.size() - 1 + t);
    targets.insert(targets.end(), e.targets.begin(), e.targets.end());
    tokens.push_back(std::move(seq));
    positions.push_back(std::move(pos));
  }
  fusion::HookState state;
  Tensor logits = fusion::teacher_forced_logits(model, tokens, positions, pool_ptrs, state, training, seed);
  Tensor nll = cross_entropy(logits, targets, -1);
  Tensor gate = gate::gate_sparsity_loss(state.gammas);
  Tensor total = lambda == 0.0 ? nll : add(nll, mul_scalar(gate, lambda));
  out.nll = nll.item();
  out.gate = gate.item();
  out.mean_gate = out.gate;
  out.total = total.item();
  out.total_tensor = total;
  return out;
}

std::string metric_json(const MetricRecord& r) {
  nlohmann::json j = {{"step", r.step}, {"epoch", r.epoch},  {"nll", r.nll},
                      {"gate", r.gate}, {"total", r.total}, {"mean_gate", r.mean_gate}};
  j["dev_metric"] = r.dev_metric ? nlohmann::json(*r.dev_metric) : nlohmann::json(nullptr);
  return j.dump();
}

double dev_exact_match(const fusion::ReFilter& model, const std::vector<Example>& dev,
                       std::size_t max_new) {
  if (dev.empty()) return 0.0;
  constexpr std::size_t kBatch = 32;
  backbone::DecodeOptions opts;
  opts.max_new = max_new;
  std::size_t hits = 0;
  for (std::size_t b = 0; b < dev.size(); b += kBatch) {
    std::vector<const Example*> batch;
    for (std::size_t i = b; i < std::min(dev.size(), b + kBatch); ++i) batch.push_back(&dev[i]);
    std::vector<context::ContextEmbeddings> pools = batch_pools(model, batch, false);
    std::vector<const context::ContextEmbeddings*> ptrs;
    std::vector<std::vector<int>> prompts;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ptrs.push_back(batch[i]->chunks.empty() ? nullptr : &pools[i]);
      prompts.push_back(batch[i]->prompt);
    }
    fusion::HookState st;
    const auto gen = fusion::fused_generate(model, prompts, ptrs, st, opts);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      hits += strip_eos(gen[i]) == strip_eos(batch[i]->targets);
    }
  }
  return static_cast<double>(hits) / static_cast<double>(dev.size());
}

TrainState initial_state(const fusion::ReFilter& model, const TrainConfig& config,
                         std::size_t num_fit) {
  config.validate();
  TrainState st;
  const std::size_t per_epoch = (num_fit + config.batch_size - 1) / config.batch_size;
  st.optimizer.config.lr = config.lr;
  st.optimizer.config.warmup_fraction = config.warmup_fraction;
  st.optimizer.config.weight_decay = config.weight_decay;
  st.optimizer.config.total_steps = std::max<std::size_t>(1, per_epoch * config.epochs);
  st.rng.seed(config.seed);
  (void)model;
  return st;
}

void train(fusion::ReFilter& model, const std::vector<Example>& fit,
           const std::vector<Example>& dev, const TrainConfig& config, TrainState& state,
           const TrainOptions& options) {
  config.validate();
  if (fit.empty()) throw DataError("no training examples");
  nn::ParameterSet& params = model.params();
  params.set_trainable_prefix("backbone.", false);
  params.set_trainable_prefix("encoder.", config.train_encoder);
  const std::size_t per_epoch = (fit.size() + config.batch_size - 1) / config.batch_size;
  std::size_t steps_this_call = 0;

  while (state.epoch < config.epochs) {
    if (state.position == 0 && state.order.empty()) {
      state.order.resize(fit.size());
      std::iota(state.order.begin(), state.order.end(), 0);
      std::shuffle(state.order.begin(), state.order.end(), state.rng);
    }
    while (state.position < per_epoch) {
      if (options.stop_after_steps && steps_this_call >= *options.stop_after_steps) return;
      std::vector<const Example*> batch;
      const std::size_t b0 = state.position * config.batch_size;
      for (std::size_t i = b0; i < std::min(fit.size(), b0 + config.batch_size); ++i) {
        batch.push_back(&fit[state.order[i]]);
      }
      const std::uint64_t step = state.optimizer.step;
      LossBreakdown loss = compute_loss(model, batch, config.lambda, true, step_seed(config.seed, step));
      check_finite(loss.total, "loss", batch);
      params.zero_grad();
      loss.total_tensor.backward();
      for (nn::Parameter& p : params.items()) {
        if (p.trainable && !p.tensor.has_grad()) p.tensor.mutable_grad();  // zero gradient
      }
      const double norm = nn::clip_grad_norm(params, config.clip_norm);
      check_finite(norm, "gradient norm", batch);
      nn::adamw_step(params, state.optimizer);
      params.zero_grad();
      ++state.position;
      ++steps_this_call;

      MetricRecord rec;
      rec.step = state.optimizer.step;
      rec.epoch = state.epoch + 1;
      rec.nll = loss.nll;
      rec.gate = loss.gate;
      rec.total = loss.total;
      rec.mean_gate = loss.mean_gate;
      if (state.position == per_epoch) {
        const double metric = dev_exact_match(model, dev, config.dev_max_new);
        rec.dev_metric = metric;
        if (metric > state.best_dev) {
          state.best_dev = metric;
          state.best_epoch = state.epoch + 1;
          state.best_params.clear();
          for (const nn::Parameter& p : params.items()) {
            if (p.trainable) {
              state.best_params.emplace_back(p.name, std::vector<double>(p.tensor.values().begin(),
                                                                         p.tensor.values().end()));
            }
          }
        }
      }
      state.log.push_back(rec);
      if (options.on_record) options.on_record(rec);
    }
    ++state.epoch;
    state.position = 0;
    state.order.clear();
  }
  for (const auto& [name, values] : state.best_params) {
    auto dst = params.get(name).tensor.mutable_values();
    std::copy(values.begin(), values.end(), dst.begin());
  }
}

// ---- checkpoints -------------------------------------------------------------

namespace {

void put_doubles(io::Writer& w, const std::vector<double>& v) {
  w.put<std::uint64_t>(v.size());
  w.put_doubles(v.data(), v.size());
}

template <typename R>
std::vector<double> get_doubles(R& r) {
  const auto n = r.template get<std::uint64_t>();
  std::vector<double> v(n);
  r.get_doubles(v.data(), n);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const nn::ParameterSet& params,
                     const std::string& config_json, const TrainState* state) {
  io::Writer w;
  w.put_raw(std::string(kMagic, sizeof(kMagic)));
  w.put<std::uint32_t>(kVersion);
  w.put_string(config_json);
  w.put<std::uint64_t>(params.size());
  for (const nn::Parameter& p : params.items()) {
    w.put_string(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) w.put<std::uint64_t>(d);
    w.put_doubles(p.tensor.values().data(), p.tensor.numel());
  }
  w.put<std::uint8_t>(state != nullptr);
  if (state != nullptr) {
    const auto& o = state->optimizer;
    w.put<std::uint64_t>(o.step);
    w.put<double>(o.config.lr);
    w.put<double>(o.config.warmup_fraction);
    w.put<std::uint64_t>(o.config.total_steps);
    w.put<double>(o.config.weight_decay);
    w.put<double>(o.config.beta1);
    w.put<double>(o.config.beta2);
    w.put<double>(o.config.epsilon);
    w.put<std::uint64_t>(o.first_moment.size());
    for (const auto& [name, m] : o.first_moment) {
      w.put_string(name);
      put_doubles(w, m);
      put_doubles(w, o.second_moment.at(name));
    }
    std::ostringstream rng;
    rng << state->rng;
    w.put_string(rng.str());
    w.put<std::uint64_t>(state->epoch);
    w.put<std::uint64_t>(state->position);
    w.put<std::uint64_t>(state->order.size());
    for (std::size_t i : state->order) w.put<std::uint64_t>(i);
    w.put<double>(state->best_dev);
    w.put<std::uint64_t>(state->best_epoch);
    w.put<std::uint64_t>(state->best_params.size());
    for (const auto& [name, v] : state->best_params) {
      w.put_string(name);
      put_doubles(w, v);
    }
    w.put<std::uint64_t>(state->log.size());
    for (const MetricRecord& r : state->log) {
      w.put<std::uint64_t>(r.step);
      w.put<std::uint64_t>(r.epoch);
      w.put<double>(r.nll);
      w.put<double>(r.gate);
      w.put<double>(r.total);
      w.put<double>(r.mean_gate);
      w.put<std::uint8_t>(r.dev_metric.has_value());
      w.put<double>(r.dev_metric.value_or(0.0));
    }
  }
  io::write_file_atomic(path, w.bytes());
}

namespace {

std::string read_header(io::Reader<DataError>& r, const std::string& path) {
  char magic[sizeof(kMagic)];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw DataError("checkpoint " + path + ": bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw IncompatibleError("checkpoint " + path + " has format version " + std::to_string(version) +
                            ", this build reads version " + std::to_string(kVersion));
  }
  return r.get_string();
}

}  // namespace

std::string checkpoint_config(const std::string& path) {
  const std::string bytes = io::read_file(path);
  io::Reader<DataError> r(bytes, "checkpoint " + path);
  return read_header(r, path);
}

LoadedCheckpoint load_checkpoint(const std::string& path, nn::ParameterSet& params, bool strict) {
  const std::string bytes = io::read_file(path);
  io::Reader<DataError> r(bytes, "checkpoint " + path);
  LoadedCheckpoint out;
  out.config_json = read_header(r, path);
  const auto n = r.get<std::uint64_t>();
  std::vector<std::pair<nn::Parameter*, std::vector<double>>> staged;
  std::size_t matched = 0;
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    nn::Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    std::vector<double> values(nn::shape_numel(shape));
    r.get_doubles(values.data(), values.size());
    if (!params.contains(name)) {
      if (strict) throw DataError("checkpoint " + path + " has unknown parameter " + name);
      continue;
    }
    nn::Parameter& p = params.get(name);
    if (p.tensor.shape() != shape) {
      throw DimensionError("parameter " + name + ": checkpoint shape " + nn::shape_str(shape) +
                           " vs model shape " + nn::shape_str(p.tensor.shape()));
    }
    staged.emplace_back(&p, std::move(values));
    ++matched;
  }
  if (strict && matched != params.size()) {
    throw DataError("checkpoint " + path + " covers " + std::to_string(matched) + " of " +
                    std::to_string(params.size()) + " parameters");
  }
  const bool has_state = r.get<std::uint8_t>() != 0;
  if (has_state) {
    TrainState st;
    auto& o = st.optimizer;
    o.step = r.get<std::uint64_t>();
    o.config.lr = r.get<double>();
    o.config.warmup_fraction = r.get<double>();
    o.config.total_steps = r.get<std::uint64_t>();
    o.config.weight_decay = r.get<double>();
    o.config.beta1 = r.get<double>();
    o.config.beta2 = r.get<double>();
    o.config.epsilon = r.get<double>();
    const auto nm = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < nm; ++i) {
      const std::string name = r.get_string();
      o.first_moment[name] = get_doubles(r);
      o.second_moment[name] = get_doubles(r);
    }
    std::istringstream rng(r.get_string());
    rng >> st.rng;
    if (!rng) throw DataError("checkpoint " + path + ": bad RNG state");
    st.epoch = r.get<std::uint64_t>();
    st.position = r.get<std::uint64_t>();
    st.order.resize(r.get<std::uint64_t>());
    for (auto& i : st.order) i = r.get<std::uint64_t>();
    st.best_dev = r.get<double>();
    st.best_epoch = r.get<std::uint64_t>();
    const auto nb = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < nb; ++i) {
      std::string name = r.get_string();
      st.best_params.emplace_back(std::move(name), get_doubles(r));
    }
    st.log.resize(r.get<std::uint64_t>());
    for (MetricRecord& rec : st.log) {
      rec.step = r.get<std::uint64_t>();
      rec.epoch = r.get<std::uint64_t>();
      rec.nll = r.get<double>();
      rec.gate = r.get<double>();
      rec.total = r.get<double>();
      rec.mean_gate = r.get<double>();
      const bool has_dev = r.get<std::uint8_t>() != 0;
      const double dev = r.get<double>();
      if (has_dev) rec.dev_metric = dev;
    }
    out.state = std::move(st);
  }
  if (!r.at_end()) throw DataError("checkpoint " + path + ": trailing bytes");
  for (auto& [p, values] : staged) {
    auto dst = p->tensor.mutable_values();
    std::copy(values.begin(), values.end(), dst.begin());
  }
  return out;
}

// ---- backbone pretraining ----------------------------------------------------

std::vector<double> pretrain_backbone(backbone::Backbone& model,
                                      const std::function<LmExample(std::mt19937_64&)>& sample,
                                      const PretrainConfig& config,
                                      const std::function<void(std::size_t, double)>& progress) {
  if (config.steps == 0 || config.batch_size == 0) throw ConfigError("pretraining needs steps and batch size");
  nn::ParameterSet& params = model.params();
  params.set_trainable_all(true);
  nn::OptimizerState opt;
  opt.config.lr = config.lr;
  opt.config.warmup_fraction = config.warmup_fraction;
  opt.config.total_steps = config.steps;
  std::mt19937_64 rng(config.seed);
  std::vector<double> losses;
  losses.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    // Packed rows for the whole batch; only answer rows reach the output head.
    std::vector<int> ids, targets;
    std::vector<std::size_t> pos, target_rows;
    std::vector<backbone::RowGroup> groups;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      LmExample e = sample(rng);
      if (e.targets.empty() || e.prompt.empty()) continue;
      std::vector<int> seq = e.prompt;
      seq.insert(seq.end(), e.targets.begin(), e.targets.end() - 1);
      if (seq.size() > model.config().max_positions) {
        throw IndexError("pretraining sequence of " + std::to_string(seq.size()) +
                         " tokens exceeds max_positions");
      }
      for (std::size_t t = 0; t < seq.size(); ++t) {
        if (t + 1 >= e.prompt.size()) {
          target_rows.push_back(ids.size());
          targets.push_back(e.targets[t + 1 - e.prompt.size()]);
        }
        ids.push_back(seq[t]);
        pos.push_back(t);
      }
      groups.push_back({seq.size(), nullptr, 0});
    }
    if (groups.empty()) throw DataError("pretraining sampler produced no usable examples");
    backbone::ForwardOptions fo;
    fo.training = true;
    fo.seed = step_seed(config.seed, step);
    const Tensor h = model.run_blocks(model.embed(ids, pos), 1, model.config().n_layers, groups,
                                      {}, nullptr, fo);
    Tensor loss = cross_entropy(model.logits(gather_rows(h, target_rows)), targets, -1);
    const double v = loss.item();
    if (!std::isfinite(v)) throw NumericError("non-finite pretraining loss at step " + std::to_string(step));
    params.zero_grad();
    loss.backward();
    nn::clip_grad_norm(params, config.clip_norm);
    nn::adamw_step(params, opt);
    params.zero_grad();
    losses.push_back(v);
    if (progress) progress(step, v);
  }
  params.set_trainable_all(false);
  return losses;
}

}  // namespace refilter::training
