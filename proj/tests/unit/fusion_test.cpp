#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <random>

#include "refilter/errors.hpp"
#include "refilter/fusion/fusion.hpp"
#include "refilter/gated_filter/gate.hpp"
#include "refilter/numerics/gradcheck.hpp"

using namespace refilter;
using namespace refilter::fusion;
using namespace refilter::nn;

namespace {

constexpr std::size_t kS = 4;
constexpr std::size_t kK = 3;

backbone::BackboneConfig tiny_backbone() {
  backbone::BackboneConfig c;
  c.vocab_size = 30;
  c.d_model = 8;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_positions = 24;
  return c;
}

context::EncoderConfig tiny_encoder() {
  context::EncoderConfig c;
  c.vocab_size = 30;
  c.d_encoder = 6;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 12;
  c.chunk_len = kS;
  c.d_model = 8;
  return c;
}

FusionConfig fusion_config(std::vector<std::size_t> layers = {}) {
  FusionConfig f;
  f.layers = std::move(layers);
  f.k = kK;
  f.s = kS;
  return f;
}

corpus::ChunkStore random_store(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<corpus::Chunk> chunks;
  for (std::size_t i = 0; i < n; ++i) {
    corpus::Chunk c;
    c.chunk_id = "c" + std::to_string(i);
    c.doc_id = "d";
    c.length = kS;
    for (std::size_t t = 0; t < kS; ++t) c.token_ids.push_back(static_cast<int>(4 + rng() % 26));
    chunks.push_back(std::move(c));
  }
  return corpus::ChunkStore(std::move(chunks));
}

std::vector<context::PoolChunk> pick(const corpus::ChunkStore& store, std::vector<std::size_t> ords) {
  std::vector<context::PoolChunk> out;
  for (std::size_t o : ords) out.push_back({&store.at(o), o, false});
  return out;
}

std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t n) {
  std::vector<int> t(n);
  for (int& x : t) x = static_cast<int>(4 + rng() % 26);
  return t;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Randomizes the adapter parameters so nothing sits at its initial value.
void perturb(ReFilter& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  for (const LayerParams& lp : m.layer_params()) {
    for (Tensor t : {lp.w_g, lp.a_g, lp.mu, lp.ln_gain, lp.ln_bias}) {
      for (double& x : t.mutable_values()) x += 0.3 * n01(rng);
    }
    lp.alpha.node()->value[0] = 0.7;
  }
}

struct Fixture {
  std::shared_ptr<backbone::Backbone> bb = std::make_shared<backbone::Backbone>(tiny_backbone(), 11);
  corpus::ChunkStore store = random_store(8, 12);
};

}  // namespace

TEST(FusionConfig, LayerResolution) {
  FusionConfig f = fusion_config();
  EXPECT_EQ(f.resolved_layers(3), (std::vector<std::size_t>{3}));
  f.layers = {3, 1};
  EXPECT_EQ(f.resolved_layers(3), (std::vector<std::size_t>{1, 3}));
  f.layers = {4};
  EXPECT_THROW(f.resolved_layers(3), ConfigError);
  f.layers = {2, 2};
  EXPECT_THROW(f.resolved_layers(3), ConfigError);
  f.layers = {};
  f.lambda = -1.0;
  EXPECT_THROW(f.resolved_layers(3), ConfigError);
}

TEST(Aggregate, EvaluationModeCases) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  std::vector<double> gain(5), bias(5), rows(4 * 5);
  for (double& x : gain) x = n01(rng);
  for (double& x : bias) x = n01(rng);
  for (double& x : rows) x = n01(rng);
  const Tensor g = Tensor::vector(gain), b = Tensor::vector(bias);

  const Tensor r0 = aggregate(Tensor::zeros({4, 5}), g, b, 0.1, false, 0);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(r0.at(i), bias[i]);

  const Tensor one = Tensor::matrix(1, 5, {rows.begin(), rows.begin() + 5});
  const Tensor r1 = aggregate(one, g, b, 0.1, false, 0);
  const Tensor direct = layer_norm(reshape(one, {5}), g, b);
  EXPECT_TRUE(bitwise_equal(r1.values(), direct.values()));

  const Tensor all = Tensor::matrix(4, 5, rows);
  std::vector<double> permuted;
  for (std::size_t r : {2u, 0u, 3u, 1u}) permuted.insert(permuted.end(), rows.begin() + r * 5, rows.begin() + r * 5 + 5);
  const Tensor ra = aggregate(all, g, b, 0.1, false, 0);
  const Tensor rb = aggregate(Tensor::matrix(4, 5, permuted), g, b, 0.1, false, 0);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(ra.at(i), rb.at(i), 1e-12);

  // Training mode drops rows deterministically per seed.
  const Tensor t1 = aggregate(all, g, b, 0.5, true, 3);
  const Tensor t2 = aggregate(all, g, b, 0.5, true, 3);
  EXPECT_TRUE(bitwise_equal(t1.values(), t2.values()));
}

TEST(Inject, ZeroAndAdditiveCases) {
  const Tensor h = Tensor::vector({1.0, -2.0, 0.5});
  const Tensor v = Tensor::vector({0.25, 4.0, -1.0});
  const Tensor same = inject(h, v, Tensor::vector({0.0}));
  EXPECT_TRUE(bitwise_equal(same.values(), h.values()));
  const Tensor zr = inject(h, Tensor::zeros({3}), Tensor::vector({0.9}));
  EXPECT_TRUE(bitwise_equal(zr.values(), h.values()));
  const Tensor shifted = inject(h, v, Tensor::vector({1.0}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(shifted.at(i) - h.at(i), v.at(i));
  EXPECT_THROW(inject(h, Tensor::zeros({2}), Tensor::vector({1.0})), DimensionError);
}

TEST(ReFilter, ParameterInventoryAndFreezing) {
  Fixture f;
  ReFilter m(f.bb, tiny_encoder(), fusion_config({2, 3}), 5);
  const auto& ps = m.params();
  for (const auto& p : ps.items()) {
    const bool backbone = p.name.rfind("backbone.", 0) == 0;
    EXPECT_EQ(p.trainable, !backbone) << p.name;
  }
  EXPECT_TRUE(ps.contains("filter.layer2.w_g"));
  EXPECT_TRUE(ps.contains("filter.layer3.mu"));
  EXPECT_TRUE(ps.contains("fusion.layer2.alpha"));
  EXPECT_TRUE(ps.contains("fusion.layer3.ln.gain"));
  EXPECT_TRUE(ps.contains("proj.w"));
  EXPECT_EQ(ps.get("filter.layer3.mu").tensor.numel(), kK * kS);
  for (double x : ps.get("filter.layer3.mu").tensor.values()) EXPECT_EQ(x, 1.0);
  EXPECT_EQ(ps.get("fusion.layer3.alpha").tensor.item(), 0.1);
}

TEST(ReFilter, MismatchedWidthsAreConfigErrors) {
  Fixture f;
  context::EncoderConfig e = tiny_encoder();
  e.d_model = 7;
  EXPECT_THROW(ReFilter(f.bb, e, fusion_config(), 1), ConfigError);
  e = tiny_encoder();
  e.chunk_len = 5;
  EXPECT_THROW(ReFilter(f.bb, e, fusion_config(), 1), ConfigError);
}

TEST(FusedForward, BypassWithoutRetrievalOrWithZeroAlpha) {
  Fixture f;
  ReFilter m(f.bb, tiny_encoder(), fusion_config({1, 3}), 5);
  perturb(m, 2);
  std::mt19937_64 rng(3);
  std::vector<std::vector<int>> toks = {random_tokens(rng, 7), random_tokens(rng, 5)};
  const auto plain = f.bb->forward(toks);
  HookState st;
  const auto none = fused_forward(m, toks, {6, 4}, {nullptr, nullptr}, st);
  EXPECT_TRUE(bitwise_equal(none.logits.values(), plain.logits.values()));
  EXPECT_TRUE(st.gammas.empty());

  for (const LayerParams& lp : m.layer_params()) lp.alpha.node()->value[0] = 0.0;
  const auto pool = context::build_pool(pick(f.store, {0, 1, 2}), m.encoder());
  const auto zero = fused_forward(m, toks, {6, 4}, {&pool, &pool}, st);
  EXPECT_TRUE(bitwise_equal(zero.logits.values(), plain.logits.values()));
}

TEST(FusedForward, MatchesManualComposition) {
  Fixture f;
  ReFilter m(f.bb, tiny_encoder(), fusion_config(), 5);
  perturb(m, 4);
  std::mt19937_64 rng(5);
  const std::vector<int> toks = random_tokens(rng, 6);
  const auto pool = context::build_pool(pick(f.store, {3, 1, 4}), m.encoder());
  HookState st;
  const auto fused = fused_forward(m, {toks}, {5}, {&pool}, st);

  const auto plain = f.bb->forward({toks}, {}, {3});
  const Tensor h = row(plain.hidden.layer(3), 5);
  const LayerParams& lp = m.params_for_layer(3);
  const Tensor gamma = gate::dynamic_gate(pool.C, h, lp.w_g, lp.a_g);
  const Tensor c_hat = gate::weight_features(pool.C, gate::apply_mask(gamma, lp.mu));
  const Tensor r = aggregate(c_hat, lp.ln_gain, lp.ln_bias, 0.1, false, 0);
  const Tensor logits = f.bb->logits(reshape(inject(h, r, lp.alpha), {1, 8}));
  const std::size_t V = 30;
  for (std::size_t v = 0; v < V; ++v) {
    EXPECT_NEAR(fused.logits.at(5 * V + v), logits.at(v), 1e-12);
  }
  // Rows before the decision position are untouched.
  for (std::size_t i = 0; i < 5 * V; ++i) EXPECT_EQ(fused.logits.at(i), plain.logits.at(i));
}

TEST(FusedForward, InjectionIsLocal) {
  Fixture f;
  ReFilter m(f.bb, tiny_encoder(), fusion_config({2}), 5);
  perturb(m, 6);
  std::mt19937_64 rng(7);
  std::vector<std::vector<int>> toks = {random_tokens(rng, 6), random_tokens(rng, 6)};
  const auto pool = context::build_pool(pick(f.store, {0, 5, 6}), m.encoder());
  HookState st;
  const auto fused = fused_forward(m, toks, {2, 5}, {&pool, nullptr}, st, false, 0, {1, 2});
  const auto plain = f.bb->forward(toks, {}, {1, 2});
  EXPECT_TRUE(bitwise_equal(fused.hidden.layer(1).values(), plain.hidden.layer(1).values()));
  const Tensor& a = fused.hidden.layer(2);
  const Tensor& b = plain.hidden.layer(2);
  for (std::size_t r = 0; r < 12; ++r) {
    const bool touched = r == 2;
    const bool same = bitwise_equal(a.values().subspan(r * 8, 8), b.values().subspan(r * 8, 8));
    EXPECT_EQ(same, !touched) << "row " << r;
  }
}

TEST(FusedForward, PoolShapeMismatchIsDimensionError) {
  Fixture f;
  ReFilter m(f.bb, tiny_encoder(), fusion_config(), 5);
  const auto small = context::build_pool(pick(f.store, {0, 1}), m.encoder());
  HookState st;
  std::mt19937_64 rng(8);
  EXPECT_THROW(fused_forward(m, {random_tokens(rng, 4)}, {3}, {&small}, st), DimensionError);
}

TEST(FusedForward, PermutationInvariantWithUniformMask) {
  Fixture f;
  ReFilter m(f.bb, tiny_encoder(), fusion_config(), 5);
  std::mt19937_64 rng(9);
  const std::vector<int> toks = random_tokens(rng, 5);
  std::vector<std::size_t> ords = {1, 4, 6};
  std::vector<double> ref;
  do {
    const auto pool = context::build_pool(pick(f.store, ords), m.encoder());
    HookState st;
    const auto out = fused_forward(m, {toks}, {4}, {&pool}, st);
    std::vector<double> last(out.logits.values().begin() + 4 * 30, out.logits.values().end());
    if (ref.empty()) {
      ref = last;
    } else {
      for (std::size_t v = 0; v < 30; ++v) EXPECT_NEAR(last[v], ref[v], 1e-12);
    }
  } while (std::next_permutation(ords.begin(), ords.end()));
}

TEST(TeacherForcing, MatchesPerPositionReference) {
  Fixture f;
  for (const std::vector<std::size_t>& layers : {std::vector<std::size_t>{3}, {2, 3}, {1, 2, 3}}) {
    ReFilter m(f.bb, tiny_encoder(), fusion_config(layers), 5);
    perturb(m, 10);
    std::mt19937_64 rng(11);
    std::vector<std::vector<int>> toks = {random_tokens(rng, 7), random_tokens(rng, 5)};
    const std::vector<std::vector<std::size_t>> targets = {{4, 5, 6}, {2, 4}};
    const auto p0 = context::build_pool(pick(f.store, {0, 2, 7}), m.encoder());
    const auto p1 = context::build_pool(pick(f.store, {5, 3, 1}), m.encoder());
    HookState st;
    const Tensor tf = teacher_forced_logits(m, toks, targets, {&p0, &p1}, st, false, 0);
    ASSERT_EQ(tf.dim(0), 5u);
    std::size_t row_i = 0;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t t : targets[b]) {
        const std::vector<int> prefix(toks[b].begin(), toks[b].begin() + static_cast<std::ptrdiff_t>(t + 1));
        HookState ref_state;
        const auto ref = fused_forward(m, {prefix}, {t}, {b == 0 ? &p0 : &p1}, ref_state);
        for (std::size_t v = 0; v < 30; ++v) {
          EXPECT_NEAR(tf.at(row_i * 30 + v), ref.logits.at(t * 30 + v), 1e-12);
        }
        ++row_i;
      }
    }
    EXPECT_EQ(st.gammas.size(), 5 * layers.size());
  }
}

TEST(FusedGenerate, MatchesRecomputeReference) {
  Fixture f;
  ReFilter m(f.bb, tiny_encoder(), fusion_config({2, 3}), 5);
  perturb(m, 12);
  std::mt19937_64 rng(13);
  std::vector<std::vector<int>> prompts = {random_tokens(rng, 4), random_tokens(rng, 6), random_tokens(rng, 3)};
  const auto p0 = context::build_pool(pick(f.store, {0, 1, 2}), m.encoder());
  const auto p2 = context::build_pool(pick(f.store, {6, 4, 2}), m.encoder());
  std::vector<const context::ContextEmbeddings*> pools = {&p0, nullptr, &p2};
  backbone::DecodeOptions opts;
  opts.max_new = 6;
  opts.stop_at_eos = false;
  HookState st;
  const auto gen = fused_generate(m, prompts, pools, st, opts);
  for (std::size_t b = 0; b < 3; ++b) {
    HookState ref_state;
    std::vector<const context::ContextEmbeddings*> one = {pools[b]};
    const backbone::LastPositionHook hook = m.make_hook(one, ref_state, false, 0);
    const auto ref = backbone::generate_recompute(*f.bb, prompts[b], &hook, opts);
    EXPECT_EQ(gen[b], ref) << "sequence " << b;
  }
  HookState none_state;
  const auto plain = fused_generate(m, prompts, {nullptr, nullptr, nullptr}, none_state, opts);
  EXPECT_EQ(plain, backbone::generate(*f.bb, prompts, nullptr, opts));
}

TEST(FusedGenerate, FrozenAfterPrefillReusesSummary) {
  Fixture f;
  FusionConfig fc = fusion_config();
  fc.recompute_per_step = false;
  ReFilter m(f.bb, tiny_encoder(), fc, 5);
  perturb(m, 14);
  std::mt19937_64 rng(15);
  const auto pool = context::build_pool(pick(f.store, {0, 1, 2}), m.encoder());
  backbone::DecodeOptions opts;
  opts.max_new = 5;
  opts.stop_at_eos = false;
  HookState st;
  st.keep_records = true;
  fused_generate(m, {random_tokens(rng, 4)}, {&pool}, st, opts);
  EXPECT_EQ(st.gammas.size(), 1u);
  EXPECT_EQ(st.records.size(), 1u);
  EXPECT_EQ(st.calls.at({0, 3}), 5u);
}

TEST(FusedGenerate, DiagnosticsAreConsistent) {
  Fixture f;
  ReFilter m(f.bb, tiny_encoder(), fusion_config(), 5);
  perturb(m, 16);
  std::mt19937_64 rng(17);
  const auto pool = context::build_pool(pick(f.store, {0, 1, 2}), m.encoder());
  backbone::DecodeOptions opts;
  opts.max_new = 3;
  opts.stop_at_eos = false;
  HookState st;
  st.keep_records = true;
  fused_generate(m, {random_tokens(rng, 4)}, {&pool}, st, opts);
  ASSERT_EQ(st.records.size(), 3u);
  for (std::size_t c = 0; c < 3; ++c) {
    const HookRecord& r = st.records[c];
    EXPECT_EQ(r.call, c);
    ASSERT_EQ(r.gamma.size(), kK * kS);
    for (std::size_t j = 0; j < r.gamma.size(); ++j) {
      EXPECT_GT(r.gamma[j], 0.0);
      EXPECT_LT(r.gamma[j], 1.0);
      EXPECT_EQ(r.w_t[j], r.mu[j] * r.gamma[j]);
    }
    EXPECT_GT(r.r_norm, 0.0);
    EXPECT_EQ(r.alpha, 0.7);
  }
}
