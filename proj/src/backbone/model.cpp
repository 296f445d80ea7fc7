#include "refilter/backbone/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "refilter/errors.hpp"

namespace refilter::backbone {
namespace {

using namespace refilter::nn;

constexpr double kInitStd = 0.02;

Tensor normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

std::uint64_t dropout_seed(std::uint64_t base, std::size_t layer, std::size_t site) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (layer * 4 + site + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  return z ^ (z >> 27);
}

}  // namespace

void BackboneConfig::validate() const {
  if (n_layers < 1) throw ConfigError("backbone n_layers must be at least 1");
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw ConfigError("backbone d_model " + std::to_string(d_model) +
                      " must be divisible by n_heads " + std::to_string(n_heads));
  }
  if (vocab_size < 4) throw ConfigError("backbone vocab_size must be at least 4");
  if (max_positions < 1) throw ConfigError("backbone max_positions must be at least 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("backbone dropout must lie in [0, 1)");
}

const Tensor& HiddenStates::layer(std::size_t layer_index) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] == layer_index) return states[i];
  }
  throw IndexError("layer " + std::to_string(layer_index) + " was not recorded");
}

std::vector<double> decision_state(const HiddenStates& h, std::size_t b, std::size_t layer,
                                   std::size_t pos) {
  if (b >= h.lengths.size()) {
    throw IndexError("batch index " + std::to_string(b) + " out of range " +
                     std::to_string(h.lengths.size()));
  }
  if (pos >= h.lengths[b]) {
    throw IndexError("position " + std::to_string(pos) + " out of range " +
                     std::to_string(h.lengths[b]));
  }
  const Tensor& t = h.layer(layer);
  const std::size_t d = t.dim(1);
  const auto vals = t.values();
  const std::size_t r = h.offsets[b] + pos;
  return std::vector<double>(vals.begin() + static_cast<std::ptrdiff_t>(r * d),
                             vals.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
}

Backbone::Backbone(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model, f = config_.d_ff;
  const double out_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config_.n_layers));

  tok_emb_ = params_.add("backbone.tok_emb", normal_init({config_.vocab_size, d}, kInitStd, rng));
  pos_emb_ = params_.add("backbone.pos_emb", normal_init({config_.max_positions, d}, kInitStd, rng));
  for (std::size_t l = 1; l <= config_.n_layers; ++l) {
    const std::string p = "backbone.layer" + std::to_string(l) + ".";
    LayerParams lp;
    lp.ln1_g = params_.add(p + "ln1.gain", Tensor::full({d}, 1.0));
    lp.ln1_b = params_.add(p + "ln1.bias", Tensor::zeros({d}));
    lp.wq = params_.add(p + "attn.wq", normal_init({d, d}, kInitStd, rng));
    lp.bq = params_.add(p + "attn.bq", Tensor::zeros({d}));
    lp.wk = params_.add(p + "attn.wk", normal_init({d, d}, kInitStd, rng));
    lp.bk = params_.add(p + "attn.bk", Tensor::zeros({d}));
    lp.wv = params_.add(p + "attn.wv", normal_init({d, d}, kInitStd, rng));
    lp.bv = params_.add(p + "attn.bv", Tensor::zeros({d}));
    lp.wo = params_.add(p + "attn.wo", normal_init({d, d}, out_std, rng));
    lp.bo = params_.add(p + "attn.bo", Tensor::zeros({d}));
    lp.ln2_g = params_.add(p + "ln2.gain", Tensor::full({d}, 1.0));
    lp.ln2_b = params_.add(p + "ln2.bias", Tensor::zeros({d}));
    lp.w1 = params_.add(p + "ff.w1", normal_init({d, f}, kInitStd, rng));
    lp.b1 = params_.add(p + "ff.b1", Tensor::zeros({f}));
    lp.w2 = params_.add(p + "ff.w2", normal_init({f, d}, out_std, rng));
    lp.b2 = params_.add(p + "ff.b2", Tensor::zeros({d}));
    layers_.push_back(lp);
  }
  lnf_g_ = params_.add("backbone.lnf.gain", Tensor::full({d}, 1.0));
  lnf_b_ = params_.add("backbone.lnf.bias", Tensor::zeros({d}));
  head_w_ = params_.add("backbone.head.w", normal_init({d, config_.vocab_size}, kInitStd, rng));
  head_b_ = params_.add("backbone.head.b", Tensor::zeros({config_.vocab_size}));
}

Tensor Backbone::embed(std::span<const int> ids, std::span<const std::size_t> positions) const {
  if (ids.size() != positions.size()) {
    throw DimensionError("embed: " + std::to_string(ids.size()) + " ids but " +
                         std::to_string(positions.size()) + " positions");
  }
  std::vector<int> pos_ids(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= config_.max_positions) {
      throw IndexError("position " + std::to_string(positions[i]) + " exceeds max_positions " +
                       std::to_string(config_.max_positions));
    }
    pos_ids[i] = static_cast<int>(positions[i]);
  }
  return add(embedding(tok_emb_, ids), embedding(pos_emb_, pos_ids));
}

Tensor Backbone::block(std::size_t layer, const Tensor& x, std::span<const RowGroup> groups,
                       const std::vector<KVCache*>* append, const ForwardOptions& options) const {
  const LayerParams& lp = layers_[layer - 1];
  const std::size_t d = config_.d_model;
  const double p = options.training ? config_.dropout : 0.0;

  Tensor h = layer_norm(x, lp.ln1_g, lp.ln1_b);
  Tensor q = linear(h, lp.wq, lp.bq);
  Tensor k = linear(h, lp.wk, lp.bk);
  Tensor v = linear(h, lp.wv, lp.bv);

  std::vector<AttnSegment> segs;
  segs.reserve(groups.size());
  std::size_t row = 0;
  for (const RowGroup& g : groups) {
    AttnSegment s;
    s.q_begin = s.k_begin = row;
    s.q_len = s.k_len = g.rows;
    if (g.past != nullptr && g.past_len > 0) {
      if (g.past->rows(layer) < g.past_len) {
        throw IndexError("kv cache holds " + std::to_string(g.past->rows(layer)) +
                         " rows at layer " + std::to_string(layer) + ", need " +
                         std::to_string(g.past_len));
      }
      s.past = KVPrefix{g.past->k[layer].data(), g.past->v[layer].data(), g.past_len, d};
    }
    segs.push_back(s);
    row += g.rows;
  }
  Tensor a = attention(q, k, v, segs, config_.n_heads, /*causal=*/true);

  if (append != nullptr) {
    const auto kv = k.values();
    const auto vv = v.values();
    row = 0;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      KVCache* c = (*append)[gi];
      const auto b = static_cast<std::ptrdiff_t>(row * d);
      const auto e = static_cast<std::ptrdiff_t>((row + groups[gi].rows) * d);
      if (c != nullptr) {
        c->k[layer].insert(c->k[layer].end(), kv.begin() + b, kv.begin() + e);
        c->v[layer].insert(c->v[layer].end(), vv.begin() + b, vv.begin() + e);
      }
      row += groups[gi].rows;
    }
  }

  Tensor attn_out = dropout(linear(a, lp.wo, lp.bo), p, p > 0.0, dropout_seed(options.seed, layer, 0));
  Tensor x1 = add(x, attn_out);
  Tensor h2 = layer_norm(x1, lp.ln2_g, lp.ln2_b);
  Tensor ff = linear(gelu(linear(h2, lp.w1, lp.b1)), lp.w2, lp.b2);
  ff = dropout(ff, p, p > 0.0, dropout_seed(options.seed, layer, 1));
  return add(x1, ff);
}

Tensor Backbone::run_blocks(Tensor x, std::size_t first, std::size_t last,
                            std::span<const RowGroup> groups, const LayerFn& after_layer,
                            const std::vector<KVCache*>* append,
                            const ForwardOptions& options) const {
  if (first < 1 || last > config_.n_layers) {
    throw IndexError("block range [" + std::to_string(first) + ", " + std::to_string(last) +
                     "] outside 1.." + std::to_string(config_.n_layers));
  }
  std::size_t total = 0;
  for (const RowGroup& g : groups) total += g.rows;
  if (x.rank() != 2 || x.dim(0) != total || x.dim(1) != config_.d_model) {
    throw DimensionError("run_blocks: input " + shape_str(x.shape()) + " does not match " +
                         std::to_string(total) + " rows of width " +
                         std::to_string(config_.d_model));
  }
  if (append != nullptr && append->size() != groups.size()) {
    throw DimensionError("run_blocks: one cache per row group required");
  }
  for (std::size_t l = first; l <= last; ++l) {
    x = block(l, x, groups, append, options);
    if (after_layer) x = after_layer(l, x);
  }
  return x;
}

Tensor Backbone::logits(const Tensor& h) const {
  return linear(layer_norm(h, lnf_g_, lnf_b_), head_w_, head_b_);
}

ForwardResult Backbone::forward(const std::vector<std::vector<int>>& tokens,
                                const std::vector<InjectionHook>& hooks,
                                const std::set<std::size_t>& record_layers,
                                const ForwardOptions& options) const {
  const std::size_t L = config_.n_layers;
  for (std::size_t l : record_layers) {
    if (l > L) throw IndexError("record layer " + std::to_string(l) + " exceeds L=" + std::to_string(L));
  }
  for (const InjectionHook& hk : hooks) {
    for (std::size_t l : hk.layers) {
      if (l < 1 || l > L) throw IndexError("hook layer " + std::to_string(l) + " outside 1.." + std::to_string(L));
    }
    if (hk.positions.size() != tokens.size()) {
      throw DimensionError("hook has " + std::to_string(hk.positions.size()) +
                           " positions for a batch of " + std::to_string(tokens.size()));
    }
    for (std::size_t b = 0; b < tokens.size(); ++b) {
      if (hk.positions[b] >= tokens[b].size()) {
        throw IndexError("hook position " + std::to_string(hk.positions[b]) +
                         " outside sequence of length " + std::to_string(tokens[b].size()));
      }
    }
  }

  ForwardResult out;
  HiddenStates& hs = out.hidden;
  std::vector<int> ids;
  std::vector<std::size_t> pos;
  std::vector<RowGroup> groups;
  for (const auto& seq : tokens) {
    if (seq.empty()) throw DimensionError("forward: empty sequence");
    if (seq.size() > config_.max_positions) {
      throw IndexError("sequence length " + std::to_string(seq.size()) + " exceeds max_positions " +
                       std::to_string(config_.max_positions));
    }
    hs.offsets.push_back(ids.size());
    hs.lengths.push_back(seq.size());
    for (std::size_t t = 0; t < seq.size(); ++t) {
      ids.push_back(seq[t]);
      pos.push_back(t);
    }
    groups.push_back({seq.size(), nullptr, 0});
  }
  Tensor x = embed(ids, pos);
  if (record_layers.count(0)) {
    hs.layers.push_back(0);
    hs.states.push_back(x);
  }
  auto after = [&](std::size_t layer, const Tensor& in) {
    Tensor y = in;
    for (const InjectionHook& hk : hooks) {
      if (std::find(hk.layers.begin(), hk.layers.end(), layer) == hk.layers.end()) continue;
      for (std::size_t b = 0; b < tokens.size(); ++b) {
        const std::size_t r = hs.offsets[b] + hk.positions[b];
        Tensor updated = hk.fn(layer, b, row(y, r));
        if (updated.numel() != config_.d_model) {
          throw DimensionError("hook changed the hidden width to " + std::to_string(updated.numel()));
        }
        y = replace_row(y, r, updated);
      }
    }
    if (record_layers.count(layer)) {
      hs.layers.push_back(layer);
      hs.states.push_back(y);
    }
    return y;
  };
  x = run_blocks(x, 1, L, groups, after, nullptr, options);
  out.logits = logits(x);
  return out;
}

}  // namespace refilter::backbone
