#include "refilter/backbone/decode.hpp"

#include <algorithm>
#include <chrono>

#include "refilter/errors.hpp"

namespace refilter::backbone {
namespace {

using namespace refilter::nn;
using Clock = std::chrono::steady_clock;

bool hooked(const LastPositionHook& hook, std::size_t layer) {
  return std::find(hook.layers.begin(), hook.layers.end(), layer) != hook.layers.end();
}

Tensor apply_hook_rows(const LastPositionHook& hook, std::size_t layer, const Tensor& x,
                       const std::vector<std::size_t>& batch_of, std::size_t d) {
  Tensor y = x;
  for (std::size_t i = 0; i < batch_of.size(); ++i) {
    Tensor updated = hook.fn(layer, batch_of[i], row(y, i));
    if (updated.numel() != d) {
      throw DimensionError("hook changed the hidden width to " + std::to_string(updated.numel()));
    }
    y = replace_row(y, i, updated);
  }
  return y;
}

}  // namespace

std::size_t LastPositionHook::first_layer() const {
  if (layers.empty()) throw ConfigError("hook has no layers");
  return *std::min_element(layers.begin(), layers.end());
}

Tensor continue_rows(const Backbone& model, const Tensor& x, std::size_t first,
                     const std::vector<const KVCache*>& caches,
                     const std::vector<std::size_t>& past_len,
                     const std::vector<std::size_t>& batch_of, const LastPositionHook& hook) {
  const std::size_t n = batch_of.size();
  const std::size_t L = model.config().n_layers;
  if (caches.size() != n || past_len.size() != n || x.dim(0) != n) {
    throw DimensionError("continue_rows: mismatched row bookkeeping");
  }
  const std::size_t d = model.config().d_model;
  Tensor h = hooked(hook, first) ? apply_hook_rows(hook, first, x, batch_of, d) : x;
  if (first == L) return h;
  std::vector<RowGroup> groups(n);
  for (std::size_t i = 0; i < n; ++i) groups[i] = {1, caches[i], past_len[i]};
  auto after = [&](std::size_t layer, const Tensor& in) {
    return hooked(hook, layer) ? apply_hook_rows(hook, layer, in, batch_of, d) : in;
  };
  return model.run_blocks(h, first + 1, L, groups, after);
}

int argmax_row(const Tensor& logits, std::size_t r) {
  const std::size_t v = logits.dim(1);
  const auto vals = logits.values().subspan(r * v, v);
  return static_cast<int>(std::max_element(vals.begin(), vals.end()) - vals.begin());
}

std::vector<std::vector<int>> generate(const Backbone& model,
                                       const std::vector<std::vector<int>>& prompts,
                                       const LastPositionHook* hook, const DecodeOptions& options,
                                       DecodeTiming* timing) {
  const auto t0 = Clock::now();
  const auto& cfg = model.config();
  const std::size_t B = prompts.size();
  const std::size_t L = cfg.n_layers;
  const std::size_t d = cfg.d_model;
  std::vector<std::vector<int>> out(B);
  if (timing) *timing = DecodeTiming{};
  if (B == 0) return out;
  for (const auto& p : prompts) {
    if (p.empty()) throw DimensionError("generate: empty prompt");
    if (p.size() > cfg.max_positions) {
      throw IndexError("prompt length " + std::to_string(p.size()) + " exceeds max_positions " +
                       std::to_string(cfg.max_positions));
    }
  }
  if (options.max_new == 0) return out;
  const bool use_hook = hook != nullptr && !hook->layers.empty();
  const std::size_t first = use_hook ? hook->first_layer() : L;

  std::vector<KVCache> caches(B, KVCache(L, d));
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t rows = std::min(prompts[b].size() + options.max_new, cfg.max_positions);
    for (std::size_t l = 1; l <= L; ++l) {
      caches[b].k[l].reserve(rows * d);
      caches[b].v[l].reserve(rows * d);
    }
  }
  std::vector<std::size_t> lengths(B, 0);  // tokens consumed so far
  std::vector<std::size_t> active(B);
  for (std::size_t b = 0; b < B; ++b) active[b] = b;
  std::vector<int> next(B, 0);

  // Feeds `tokens[i]` to sequence which[i] and sets next[] from the last row
  // of each run.
  auto step = [&](const std::vector<std::size_t>& which, const std::vector<std::vector<int>>& tokens) {
    std::vector<int> ids;
    std::vector<std::size_t> pos;
    std::vector<RowGroup> groups;
    std::vector<KVCache*> append;
    std::vector<std::size_t> last_rows;
    for (std::size_t i = 0; i < which.size(); ++i) {
      const std::size_t b = which[i];
      for (std::size_t t = 0; t < tokens[i].size(); ++t) {
        ids.push_back(tokens[i][t]);
        pos.push_back(lengths[b] + t);
      }
      groups.push_back({tokens[i].size(), &caches[b], lengths[b]});
      append.push_back(&caches[b]);
      last_rows.push_back(ids.size() - 1);
    }
    Tensor at_first;
    auto record = [&](std::size_t layer, const Tensor& x) {
      if (use_hook && layer == first) at_first = gather_rows(x, last_rows);
      return x;
    };
    Tensor final_h = model.run_blocks(model.embed(ids, pos), 1, L, groups, record, &append);
    Tensor last_h;
    if (use_hook) {
      std::vector<const KVCache*> cs;
      std::vector<std::size_t> plen;
      for (std::size_t i = 0; i < which.size(); ++i) {
        const std::size_t b = which[i];
        cs.push_back(&caches[b]);
        plen.push_back(lengths[b] + tokens[i].size() - 1);
      }
      last_h = continue_rows(model, at_first, first, cs, plen, which, *hook);
    } else {
      last_h = gather_rows(final_h, last_rows);
    }
    Tensor lg = model.logits(last_h);
    for (std::size_t i = 0; i < which.size(); ++i) {
      const std::size_t b = which[i];
      lengths[b] += tokens[i].size();
      next[b] = argmax_row(lg, i);
    }
  };

  // Prompts are prefilled in groups of at most prefill_rows rows so the
  // activations of a large batch stay cache-sized.
  for (std::size_t b = 0; b < B;) {
    std::vector<std::size_t> which;
    std::vector<std::vector<int>> group;
    std::size_t rows = 0;
    while (b < B && (which.empty() || options.prefill_rows == 0 ||
                     rows + prompts[b].size() <= options.prefill_rows)) {
      rows += prompts[b].size();
      which.push_back(b);
      group.push_back(prompts[b]);
      ++b;
    }
    step(which, group);
  }
  if (timing) {
    timing->first_token_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  }
  for (std::size_t gen = 1;; ++gen) {
    std::vector<std::size_t> still;
    std::vector<std::vector<int>> feed;
    for (std::size_t b : active) {
      out[b].push_back(next[b]);
      if (timing) ++timing->generated_tokens;
      const bool done = (options.stop_at_eos && next[b] == options.eos_id) ||
                        gen >= options.max_new || lengths[b] >= cfg.max_positions;
      if (!done) {
        still.push_back(b);
        feed.push_back({next[b]});
      }
    }
    active = std::move(still);
    if (active.empty()) break;
    step(active, feed);
  }
  if (timing) timing->total_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return out;
}

std::vector<int> generate_recompute(const Backbone& model, const std::vector<int>& prompt,
                                    const LastPositionHook* hook, const DecodeOptions& options) {
  std::vector<int> seq = prompt;
  std::vector<int> out;
  const bool use_hook = hook != nullptr && !hook->layers.empty();
  while (out.size() < options.max_new) {
    std::vector<InjectionHook> hooks;
    if (use_hook) hooks.push_back({hook->layers, {seq.size() - 1}, hook->fn});
    ForwardResult r = model.forward({seq}, hooks);
    const int tok = argmax_row(r.logits, seq.size() - 1);
    out.push_back(tok);
    if (options.stop_at_eos && tok == options.eos_id) break;
    if (seq.size() >= model.config().max_positions) break;
    seq.push_back(tok);
  }
  return out;
}

}  // namespace refilter::backbone
