#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include "refilter/backbone/decode.hpp"
#include "refilter/backbone/model.hpp"
#include "refilter/context_encoder/encoder.hpp"
#include "refilter/numerics/optim.hpp"

namespace refilter::fusion {

using nn::Tensor;

struct FusionConfig {
  std::vector<std::size_t> layers;  // fusion layers, subset of 1..L; empty means {L}
  std::size_t k = 3;
  std::size_t s = 16;
  double lambda = 0.01;       // weight of the gate sparsity term
  double dropout = 0.1;       // per-token dropout inside aggregation
  double alpha_init = 0.1;
  bool recompute_per_step = true;  // false: reuse the prefill-time summary while decoding

  std::size_t pool_size() const { return k * s; }
  // Resolves an empty layer list to {n_layers} and validates the rest.
  std::vector<std::size_t> resolved_layers(std::size_t n_layers) const;
};

// Dropout on each token row, sum over rows, LayerNorm with affine (gain, bias).
// C_hat [N x d] -> r [d].
Tensor aggregate(const Tensor& c_hat, const Tensor& gain, const Tensor& bias, double p,
                 bool training, std::uint64_t seed);

// h + alpha * r.
Tensor inject(const Tensor& h, const Tensor& r, const Tensor& alpha);

// Parameters of one fusion layer.
struct LayerParams {
  std::size_t layer = 0;
  Tensor w_g, a_g, mu;          // gated filter
  Tensor alpha, ln_gain, ln_bias;  // fusion
};

// Values captured each time a fusion hook fires.
struct HookRecord {
  std::size_t b = 0;
  std::size_t layer = 0;
  std::size_t call = 0;  // 0 for the first firing of (b, layer), then 1, 2, ...
  std::vector<double> gamma, mu, w_t;
  double r_norm = 0.0;
  double alpha = 0.0;
};

// Per-forward scratch shared by the hook: gates for the loss plus optional
// diagnostic copies.
struct HookState {
  std::vector<Tensor> gammas;       // every gate vector computed, in firing order
  bool keep_records = false;
  std::vector<HookRecord> records;
  std::map<std::pair<std::size_t, std::size_t>, Tensor> frozen;  // (b, layer) -> r
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> calls;
};

// Backbone plus context encoder plus per-layer gate and fusion parameters.
// The backbone is shared and always frozen; params() lists every parameter
// with only the adapter side trainable.
class ReFilter {
 public:
  ReFilter(std::shared_ptr<backbone::Backbone> backbone, const context::EncoderConfig& encoder,
           const FusionConfig& fusion, std::uint64_t seed);

  const backbone::Backbone& backbone() const { return *backbone_; }
  std::shared_ptr<backbone::Backbone> backbone_ptr() const { return backbone_; }
  const context::ContextEncoder& encoder() const { return encoder_; }
  context::ContextEncoder& encoder() { return encoder_; }
  const FusionConfig& config() const { return config_; }
  const std::vector<std::size_t>& layers() const { return layers_; }
  const std::vector<LayerParams>& layer_params() const { return layer_params_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  // Hook over the given pools (nullptr entries bypass: the hidden state is
  // returned untouched and no gate is computed). `seed` drives aggregation
  // dropout when training.
  backbone::LastPositionHook make_hook(const std::vector<const context::ContextEmbeddings*>& pools,
                                       HookState& state, bool training, std::uint64_t seed) const;

  // One fused hidden-state update (the four steps composed) for a single
  // decision state; exposed for tests and diagnostics.
  Tensor fuse(const LayerParams& lp, const Tensor& h, const context::ContextEmbeddings& pool,
              bool training, std::uint64_t seed, HookState* state, std::size_t b) const;

  const LayerParams& params_for_layer(std::size_t layer) const;

 private:
  std::shared_ptr<backbone::Backbone> backbone_;
  context::ContextEncoder encoder_;
  FusionConfig config_;
  std::vector<std::size_t> layers_;
  std::vector<LayerParams> layer_params_;
  nn::ParameterSet params_;
};

// Reference path: full backbone forward over each sequence with the hook
// fired once at positions[b].
backbone::ForwardResult fused_forward(const ReFilter& model,
                                      const std::vector<std::vector<int>>& tokens,
                                      const std::vector<std::size_t>& positions,
                                      const std::vector<const context::ContextEmbeddings*>& pools,
                                      HookState& state, bool training = false,
                                      std::uint64_t seed = 0,
                                      const std::set<std::size_t>& record_layers = {});

// Teacher-forced logits at selected positions. For each sequence b and each
// position t in target_positions[b], the hook fires at t exactly as it would
// when t is the last position during decoding (earlier positions keep their
// un-injected states). Returns [sum_b |target_positions[b]| x V] logits in
// (b, position) order.
Tensor teacher_forced_logits(const ReFilter& model, const std::vector<std::vector<int>>& tokens,
                             const std::vector<std::vector<std::size_t>>& target_positions,
                             const std::vector<const context::ContextEmbeddings*>& pools,
                             HookState& state, bool training, std::uint64_t seed);

// Greedy fused decoding of question-only prompts.
std::vector<std::vector<int>> fused_generate(const ReFilter& model,
                                             const std::vector<std::vector<int>>& prompts,
                                             const std::vector<const context::ContextEmbeddings*>& pools,
                                             HookState& state,
                                             const backbone::DecodeOptions& options,
                                             backbone::DecodeTiming* timing = nullptr);

}  // namespace refilter::fusion
