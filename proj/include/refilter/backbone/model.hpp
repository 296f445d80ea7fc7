#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <vector>

#include "refilter/numerics/ops.hpp"
#include "refilter/numerics/optim.hpp"

namespace refilter::backbone {

using nn::Tensor;

struct BackboneConfig {
  std::size_t vocab_size = 2048;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_positions = 128;
  double dropout = 0.0;

  void validate() const;
};

// Per-sequence key/value rows for every layer (index 1..L; slot 0 unused).
struct KVCache {
  std::size_t d_model = 0;
  std::vector<std::vector<double>> k, v;

  KVCache() = default;
  KVCache(std::size_t n_layers, std::size_t d) : d_model(d), k(n_layers + 1), v(n_layers + 1) {}
  std::size_t rows(std::size_t layer) const { return k.at(layer).size() / d_model; }
};

// A run of consecutive packed rows belonging to one sequence. The rows see
// the first past_len cached rows of `past` at each layer, then themselves
// causally.
struct RowGroup {
  std::size_t rows = 0;
  const KVCache* past = nullptr;
  std::size_t past_len = 0;
};

// Rewrites the hidden vector of one (sequence, position) at a layer.
// Arguments: layer (1-based), batch index, current vector [d_model].
using HookFn = std::function<Tensor(std::size_t layer, std::size_t b, const Tensor& h)>;

struct InjectionHook {
  std::vector<std::size_t> layers;     // subset of 1..L
  std::vector<std::size_t> positions;  // p_b per batch element
  HookFn fn;
};

// Hidden states of selected layers. Rows are packed: sequence b occupies
// rows [offsets[b], offsets[b] + lengths[b]).
struct HiddenStates {
  std::vector<std::size_t> layers;  // strictly increasing, each in 0..L (0 = embeddings)
  std::vector<Tensor> states;       // one [rows x d_model] tensor per recorded layer
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> lengths;

  const Tensor& layer(std::size_t layer_index) const;
};

// H[b, pos, layer, :] by value.
std::vector<double> decision_state(const HiddenStates& h, std::size_t b, std::size_t layer,
                                   std::size_t pos);

struct ForwardOptions {
  bool training = false;  // enables dropout
  std::uint64_t seed = 0;
};

struct ForwardResult {
  Tensor logits;  // [rows x V], packed like HiddenStates
  HiddenStates hidden;
};

// Called after each block in run_blocks with the layer index and the packed
// block output; may return a rewritten tensor.
using LayerFn = std::function<Tensor(std::size_t layer, const Tensor& x)>;

// Pre-LayerNorm decoder-only transformer with learned absolute positions and
// an untied output head.
class Backbone {
 public:
  Backbone(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  // Token plus position embeddings for ids at the given absolute positions.
  Tensor embed(std::span<const int> ids, std::span<const std::size_t> positions) const;

  // Runs blocks first..last over packed rows partitioned by groups. When
  // append is non-null, each group's new key/value rows at those layers are
  // appended to (*append)[g] after the layer's attention.
  Tensor run_blocks(Tensor x, std::size_t first, std::size_t last,
                    std::span<const RowGroup> groups, const LayerFn& after_layer,
                    const std::vector<KVCache*>* append = nullptr,
                    const ForwardOptions& options = {}) const;

  // Final LayerNorm and output head.
  Tensor logits(const Tensor& h) const;

  // Full recompute over a ragged batch. Hooks fire after their layers at
  // (b, positions[b]); recorded layers are captured after hooks.
  ForwardResult forward(const std::vector<std::vector<int>>& tokens,
                        const std::vector<InjectionHook>& hooks = {},
                        const std::set<std::size_t>& record_layers = {},
                        const ForwardOptions& options = {}) const;

 private:
  Tensor block(std::size_t layer, const Tensor& x, std::span<const RowGroup> groups,
               const std::vector<KVCache*>* append, const ForwardOptions& options) const;

  BackboneConfig config_;
  nn::ParameterSet params_;
  struct LayerParams {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  Tensor tok_emb_, pos_emb_, lnf_g_, lnf_b_, head_w_, head_b_;
  std::vector<LayerParams> layers_;  // index 0 holds layer 1
};

}  // namespace refilter::backbone
