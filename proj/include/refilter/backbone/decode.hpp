#pragma once

#include <cstdint>
#include <vector>

#include "refilter/backbone/model.hpp"

namespace refilter::backbone {

// Hook that fires at the current last position of every sequence. During
// decoding the position advances with each generated token; earlier
// positions are never rewritten, so cached keys/values stay un-injected.
struct LastPositionHook {
  std::vector<std::size_t> layers;  // subset of 1..L
  HookFn fn;

  std::size_t first_layer() const;
};

// Single-position continuation. x holds the un-injected block-`first`
// outputs of n rows; row i belongs to batch element batch_of[i] and sits
// right after past_len[i] cached rows of caches[i]. Applies the hook at every
// hooked layer >= first and runs the remaining blocks. Returns the final
// hidden rows [n x d] (before the output LayerNorm).
Tensor continue_rows(const Backbone& model, const Tensor& x, std::size_t first,
                     const std::vector<const KVCache*>& caches,
                     const std::vector<std::size_t>& past_len,
                     const std::vector<std::size_t>& batch_of, const LastPositionHook& hook);

struct DecodeOptions {
  std::size_t max_new = 32;
  int eos_id = 2;
  bool stop_at_eos = true;  // false forces exactly max_new tokens (latency runs)
  std::size_t prefill_rows = 512;  // prompt rows per prefill pass, 0 for one pass
};

struct DecodeTiming {
  double first_token_seconds = 0.0;  // prefill plus first argmax
  double total_seconds = 0.0;
  std::size_t generated_tokens = 0;  // summed over the batch
};

// Greedy batched decoding with a key/value cache. Equivalent to recomputing
// the full prefix at every step with the hook firing at the last position.
// Generation also stops when a sequence reaches max_positions.
std::vector<std::vector<int>> generate(const Backbone& model,
                                       const std::vector<std::vector<int>>& prompts,
                                       const LastPositionHook* hook, const DecodeOptions& options,
                                       DecodeTiming* timing = nullptr);

// Reference decoder: full forward over the whole prefix at every step.
std::vector<int> generate_recompute(const Backbone& model, const std::vector<int>& prompt,
                                    const LastPositionHook* hook, const DecodeOptions& options);

// Index of the largest entry; ties resolve to the smallest index.
int argmax_row(const Tensor& logits, std::size_t row);

}  // namespace refilter::backbone
