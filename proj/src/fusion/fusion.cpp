#include "refilter/fusion/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "refilter/errors.hpp"
#include "refilter/gated_filter/gate.hpp"

namespace refilter::fusion {
namespace {

using namespace refilter::nn;

std::uint64_t mix_seed(std::uint64_t seed, std::size_t b, std::size_t layer, std::size_t call) {
  std::uint64_t z = seed;
  for (std::uint64_t v : {static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(layer),
                          static_cast<std::uint64_t>(call)}) {
    z += 0x9e3779b97f4a7c15ULL * (v + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
  }
  return z;
}

std::vector<double> to_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

bool any_pool(const std::vector<const context::ContextEmbeddings*>& pools) {
  return std::any_of(pools.begin(), pools.end(), [](const auto* p) { return p != nullptr; });
}

}  // namespace

std::vector<std::size_t> FusionConfig::resolved_layers(std::size_t n_layers) const {
  std::vector<std::size_t> out = layers.empty() ? std::vector<std::size_t>{n_layers} : layers;
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) {
    throw ConfigError("fusion layers contain a duplicate");
  }
  for (std::size_t l : out) {
    if (l < 1 || l > n_layers) {
      throw ConfigError("fusion layer " + std::to_string(l) + " outside 1.." + std::to_string(n_layers));
    }
  }
  if (k < 1 || s < 1) throw ConfigError("fusion k and s must be at least 1");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("fusion dropout must lie in [0, 1)");
  return out;
}

Tensor aggregate(const Tensor& c_hat, const Tensor& gain, const Tensor& bias, double p,
                 bool training, std::uint64_t seed) {
  if (c_hat.rank() != 2) {
    throw DimensionError("aggregate expects [N x d], got " + shape_str(c_hat.shape()));
  }
  Tensor summed = sum_rows(dropout(c_hat, p, training && p > 0.0, seed));
  return layer_norm(summed, gain, bias);
}

Tensor inject(const Tensor& h, const Tensor& r, const Tensor& alpha) {
  if (h.numel() != r.numel()) {
    throw DimensionError("inject: hidden " + shape_str(h.shape()) + " vs summary " +
                         shape_str(r.shape()));
  }
  return add(h, scale(reshape(r, h.shape()), alpha));
}

ReFilter::ReFilter(std::shared_ptr<backbone::Backbone> backbone,
                   const context::EncoderConfig& encoder, const FusionConfig& fusion,
                   std::uint64_t seed)
    : backbone_(std::move(backbone)), encoder_(encoder, seed), config_(fusion) {
  if (!backbone_) throw ConfigError("ReFilter needs a backbone");
  const auto& bc = backbone_->config();
  if (encoder.d_model != bc.d_model) {
    throw ConfigError("encoder projects to " + std::to_string(encoder.d_model) +
                      " but backbone width is " + std::to_string(bc.d_model));
  }
  if (encoder.chunk_len != config_.s) {
    throw ConfigError("encoder chunk_len " + std::to_string(encoder.chunk_len) +
                      " differs from fusion s " + std::to_string(config_.s));
  }
  layers_ = config_.resolved_layers(bc.n_layers);
  const std::size_t d = bc.d_model;
  const std::size_t n = config_.pool_size();
  std::mt19937_64 rng(seed ^ 0xf17e5ULL);
  std::normal_distribution<double> dist(0.0, 0.02);

  params_.append(backbone_->params());
  params_.set_trainable_prefix("backbone.", false);
  params_.append(encoder_.params());
  for (std::size_t l : layers_) {
    const std::string g = "filter.layer" + std::to_string(l) + ".";
    const std::string f = "fusion.layer" + std::to_string(l) + ".";
    std::vector<double> wg(2 * d);
    for (double& x : wg) x = dist(rng);
    LayerParams lp;
    lp.layer = l;
    lp.w_g = params_.add(g + "w_g", Tensor::vector(std::move(wg)));
    lp.a_g = params_.add(g + "a_g", Tensor::vector({0.0}));
    lp.mu = params_.add(g + "mu", Tensor::full({n}, 1.0));
    lp.alpha = params_.add(f + "alpha", Tensor::vector({config_.alpha_init}));
    lp.ln_gain = params_.add(f + "ln.gain", Tensor::full({d}, 1.0));
    lp.ln_bias = params_.add(f + "ln.bias", Tensor::zeros({d}));
    layer_params_.push_back(lp);
  }
}

const LayerParams& ReFilter::params_for_layer(std::size_t layer) const {
  for (const LayerParams& lp : layer_params_) {
    if (lp.layer == layer) return lp;
  }
  throw IndexError("layer " + std::to_string(layer) + " is not a fusion layer");
}

Tensor ReFilter::fuse(const LayerParams& lp, const Tensor& h,
                      const context::ContextEmbeddings& pool, bool training, std::uint64_t seed,
                      HookState* state, std::size_t b) const {
  if (pool.C.dim(0) != config_.pool_size() || pool.C.dim(1) != backbone_->config().d_model) {
    throw DimensionError("pool " + shape_str(pool.C.shape()) + " does not match configured N=" +
                         std::to_string(config_.pool_size()));
  }
  const auto key = std::make_pair(b, lp.layer);
  std::size_t call = 0;
  if (state != nullptr) call = state->calls[key]++;
  if (state != nullptr && !config_.recompute_per_step) {
    auto it = state->frozen.find(key);
    if (it != state->frozen.end()) return inject(h, it->second, lp.alpha);
  }
  Tensor gamma = gate::dynamic_gate(pool.C, h, lp.w_g, lp.a_g);
  Tensor w_t = gate::apply_mask(gamma, lp.mu);
  Tensor c_hat = gate::weight_features(pool.C, w_t);
  Tensor r = aggregate(c_hat, lp.ln_gain, lp.ln_bias, config_.dropout, training,
                       mix_seed(seed, b, lp.layer, call));
  if (state != nullptr) {
    state->gammas.push_back(gamma);
    if (!config_.recompute_per_step) state->frozen[key] = r;
    if (state->keep_records) {
      HookRecord rec;
      rec.b = b;
      rec.layer = lp.layer;
      rec.call = call;
      rec.gamma = to_vector(gamma);
      rec.mu = to_vector(lp.mu);
      rec.w_t = to_vector(w_t);
      double sq = 0.0;
      for (double v : r.values()) sq += v * v;
      rec.r_norm = std::sqrt(sq);
      rec.alpha = lp.alpha.item();
      state->records.push_back(std::move(rec));
    }
  }
  return inject(h, r, lp.alpha);
}

backbone::LastPositionHook ReFilter::make_hook(
    const std::vector<const context::ContextEmbeddings*>& pools, HookState& state, bool training,
    std::uint64_t seed) const {
  backbone::LastPositionHook hook;
  hook.layers = layers_;
  hook.fn = [this, pools, &state, training, seed](std::size_t layer, std::size_t b,
                                                  const Tensor& h) -> Tensor {
    if (b >= pools.size()) {
      throw IndexError("no pool slot for batch element " + std::to_string(b));
    }
    if (pools[b] == nullptr) return h;
    return fuse(params_for_layer(layer), h, *pools[b], training, seed, &state, b);
  };
  return hook;
}

backbone::ForwardResult fused_forward(const ReFilter& model,
                                      const std::vector<std::vector<int>>& tokens,
                                      const std::vector<std::size_t>& positions,
                                      const std::vector<const context::ContextEmbeddings*>& pools,
                                      HookState& state, bool training, std::uint64_t seed,
                                      const std::set<std::size_t>& record_layers) {
  if (pools.size() != tokens.size() || positions.size() != tokens.size()) {
    throw DimensionError("fused_forward: tokens, positions and pools must have equal length");
  }
  std::vector<backbone::InjectionHook> hooks;
  if (any_pool(pools)) {
    backbone::LastPositionHook h = model.make_hook(pools, state, training, seed);
    hooks.push_back({h.layers, positions, h.fn});
  }
  return model.backbone().forward(tokens, hooks, record_layers);
}

Tensor teacher_forced_logits(const ReFilter& model, const std::vector<std::vector<int>>& tokens,
                             const std::vector<std::vector<std::size_t>>& target_positions,
                             const std::vector<const context::ContextEmbeddings*>& pools,
                             HookState& state, bool training, std::uint64_t seed) {
  const backbone::Backbone& bb = model.backbone();
  const auto& cfg = bb.config();
  const std::size_t B = tokens.size();
  if (target_positions.size() != B || pools.size() != B) {
    throw DimensionError("teacher_forced_logits: tokens, targets and pools must have equal length");
  }
  const std::size_t first = model.layers().front();

  std::vector<int> ids;
  std::vector<std::size_t> pos;
  std::vector<backbone::RowGroup> groups;
  std::vector<backbone::KVCache> caches(B, backbone::KVCache(cfg.n_layers, cfg.d_model));
  std::vector<backbone::KVCache*> append;
  std::vector<std::size_t> rows;
  std::vector<const backbone::KVCache*> row_cache;
  std::vector<std::size_t> row_past;
  std::vector<std::size_t> row_batch;
  for (std::size_t b = 0; b < B; ++b) {
    if (tokens[b].empty()) throw DimensionError("teacher_forced_logits: empty sequence");
    if (tokens[b].size() > cfg.max_positions) {
      throw IndexError("sequence length " + std::to_string(tokens[b].size()) +
                       " exceeds max_positions " + std::to_string(cfg.max_positions));
    }
    for (std::size_t t : target_positions[b]) {
      if (t >= tokens[b].size()) throw IndexError("target position " + std::to_string(t) + " out of range");
      rows.push_back(ids.size() + t);
      row_cache.push_back(&caches[b]);
      row_past.push_back(t);
      row_batch.push_back(b);
    }
    for (std::size_t t = 0; t < tokens[b].size(); ++t) {
      ids.push_back(tokens[b][t]);
      pos.push_back(t);
    }
    groups.push_back({tokens[b].size(), nullptr, 0});
    append.push_back(&caches[b]);
  }
  Tensor at_first;
  auto record = [&](std::size_t layer, const Tensor& x) {
    if (layer == first) at_first = gather_rows(x, rows);
    return x;
  };
  // Un-injected pass: keys/values for every position plus the fusion-layer
  // inputs of the target rows.
  bb.run_blocks(bb.embed(ids, pos), 1, cfg.n_layers, groups, record, &append);
  if (rows.empty()) return Tensor::zeros({0, cfg.vocab_size});
  backbone::LastPositionHook hook;
  if (any_pool(pools)) {
    hook = model.make_hook(pools, state, training, seed);
  } else {
    hook.layers = model.layers();
    hook.fn = [](std::size_t, std::size_t, const Tensor& h) { return h; };
  }
  Tensor final_h = backbone::continue_rows(bb, at_first, first, row_cache, row_past, row_batch, hook);
  return bb.logits(final_h);
}

std::vector<std::vector<int>> fused_generate(const ReFilter& model,
                                             const std::vector<std::vector<int>>& prompts,
                                             const std::vector<const context::ContextEmbeddings*>& pools,
                                             HookState& state,
                                             const backbone::DecodeOptions& options,
                                             backbone::DecodeTiming* timing) {
  if (pools.size() != prompts.size()) {
    throw DimensionError("fused_generate: one pool slot per prompt required");
  }
  if (!any_pool(pools)) return backbone::generate(model.backbone(), prompts, nullptr, options, timing);
  backbone::LastPositionHook hook = model.make_hook(pools, state, false, 0);
  return backbone::generate(model.backbone(), prompts, &hook, options, timing);
}

}  // namespace refilter::fusion
