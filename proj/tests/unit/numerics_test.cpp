#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "refilter/errors.hpp"
#include "refilter/numerics/gradcheck.hpp"
#include "refilter/numerics/ops.hpp"
#include "refilter/numerics/optim.hpp"

namespace refilter::nn {
namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

// ---- matmul ---------------------------------------------------------------

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor out = matmul(eye, m);
  EXPECT_EQ(out.shape(), (Shape{2, 3}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out.at(i), m.at(i));
}

TEST(Matmul, HandMultiplication) {
  Tensor out = matmul(Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 1, {1, 1}));
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  EXPECT_EQ(out.at(0), 3.0);
  EXPECT_EQ(out.at(1), 7.0);
}

TEST(Matmul, ZeroAnnihilates) {
  std::mt19937_64 rng(0);
  Tensor out = matmul(Tensor::zeros({3, 4}), random_tensor({4, 5}, rng));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

// ---- sigmoid --------------------------------------------------------------

TEST(Sigmoid, SymmetryAndSaturation) {
  Tensor x = Tensor::vector({0.0, 50.0, -50.0, 5.0, 1e300, -1e300});
  Tensor y = sigmoid(x);
  EXPECT_EQ(y.at(0), 0.5);
  EXPECT_GT(y.at(1), 0.99);
  EXPECT_LT(y.at(1), 1.0);
  EXPECT_GT(y.at(2), 0.0);
  EXPECT_LT(y.at(4), 1.0);
  EXPECT_GT(y.at(5), 0.0);
  Tensor yn = sigmoid(mul_scalar(x, -1.0));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.at(i) + yn.at(i), 1.0, 1e-15);
}

TEST(Sigmoid, StrictlyInteriorOnRandomInputs) {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({100000}, rng, -1e4, 1e4);
  Tensor y = sigmoid(x);
  for (double v : y.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

// ---- layer norm -----------------------------------------------------------

TEST(LayerNorm, ConstantRowMapsToBias) {
  Tensor x = Tensor::vector({3.0, 3.0, 3.0, 3.0});
  Tensor y = layer_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, PlusMinusOneIsNearlyFixed) {
  Tensor y = layer_norm(Tensor::vector({1.0, -1.0}), Tensor::full({2}, 1.0), Tensor::zeros({2}));
  const double expect = 1.0 / std::sqrt(1.0 + kLayerNormEps);
  EXPECT_NEAR(y.at(0), expect, 1e-15);
  EXPECT_NEAR(y.at(1), -expect, 1e-15);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
  std::mt19937_64 rng(8);
  const std::size_t r = 20, c = 16;
  Tensor y = layer_norm(random_tensor({r, c}, rng, -5, 5), Tensor::full({c}, 1.0),
                        Tensor::zeros({c}));
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += y.at(i * c + j);
    mean /= c;
    for (std::size_t j = 0; j < c; ++j) var += std::pow(y.at(i * c + j) - mean, 2);
    var /= c;
    EXPECT_LT(std::abs(mean), 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

// ---- dropout --------------------------------------------------------------

TEST(Dropout, EvaluationModeIsIdentity) {
  std::mt19937_64 rng(9);
  Tensor x = random_tensor({50}, rng);
  Tensor y = dropout(x, 0.5, false, 1);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(y.at(i), x.at(i));
  Tensor z = dropout(x, 0.0, true, 1);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(z.at(i), x.at(i));
}

TEST(Dropout, SeededMaskIsReproducibleAndRescales) {
  Tensor x = Tensor::full({4000}, 1.0);
  Tensor a = dropout(x, 0.5, true, 42);
  Tensor b = dropout(x, 0.5, true, 42);
  Tensor c = dropout(x, 0.5, true, 43);
  std::size_t zeros = 0, differs = 0;
  for (std::size_t i = 0; i < 4000; ++i) {
    EXPECT_EQ(a.at(i), b.at(i));
    EXPECT_TRUE(a.at(i) == 0.0 || a.at(i) == 2.0);
    zeros += a.at(i) == 0.0;
    differs += a.at(i) != c.at(i);
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 4000.0, 0.5, 0.05);
  EXPECT_GT(differs, 0u);
}

TEST(Dropout, RejectsProbabilityOne) {
  EXPECT_THROW(dropout(Tensor::zeros({3}), 1.0, true, 0), ConfigError);
}

// ---- cross entropy --------------------------------------------------------

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  const int targets[] = {0, 3, 4};
  Tensor loss = cross_entropy(Tensor::zeros({3, 5}), targets, -100);
  EXPECT_NEAR(loss.item(), std::log(5.0), 1e-14);
}

TEST(CrossEntropy, DominantTargetGivesNearZero) {
  Tensor logits = Tensor::matrix(1, 3, {0.0, 40.0, 0.0});
  const int targets[] = {1};
  EXPECT_LT(cross_entropy(logits, targets, -100).item(), 1e-15);
}

TEST(CrossEntropy, AllIgnoredIsZeroWithZeroGradient) {
  Tensor logits = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
  const int targets[] = {-100, -100};
  Tensor loss = cross_entropy(logits, targets, -100);
  EXPECT_EQ(loss.item(), 0.0);
  loss.backward();
  for (double g : logits.grad()) EXPECT_EQ(g, 0.0);
}

TEST(CrossEntropy, OutOfRangeTargetThrows) {
  const int targets[] = {7};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), targets, -100), IndexError);
}

// ---- gradient checking ----------------------------------------------------

TEST(GradCheck, QuadraticMatchesClosedForm) {
  ParameterSet params;
  Tensor& x = params.add("x", Tensor::vector({1.0, 2.0}));
  auto loss_fn = [&] { return dot(x, x); };
  GradCheckOptions opt;
  opt.tol = 1e-6;
  GradCheckReport r = finite_diff_check(loss_fn, params, opt);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
  EXPECT_NEAR(x.grad()[0], 2.0, 1e-12);
  EXPECT_NEAR(x.grad()[1], 4.0, 1e-12);
}

TEST(GradCheck, ConstantLossHasZeroGradient) {
  ParameterSet params;
  Tensor& x = params.add("x", Tensor::vector({1.0, 2.0}));
  auto loss_fn = [&] { return add_scalar(mul_scalar(sum_all(x), 0.0), Tensor::scalar(3.0)); };
  GradCheckReport r = finite_diff_check(loss_fn, params);
  EXPECT_TRUE(r.passed);
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(GradCheck, NonFiniteLossIsANumericError) {
  ParameterSet params;
  params.add("x", Tensor::vector({1.0}));
  auto loss_fn = [&] { return Tensor::scalar(std::nan("")); };
  EXPECT_THROW(finite_diff_check(loss_fn, params), NumericError);
}

// Property: every differentiable op passes central differences at 1e-4.
class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, AnalyticMatchesFiniteDifferences) {
  std::mt19937_64 rng(100 + GetParam());
  ParameterSet params;
  Tensor& a = params.add("a", random_tensor({4, 6}, rng));
  Tensor& b = params.add("b", random_tensor({6, 3}, rng));
  Tensor& c = params.add("c", random_tensor({4, 6}, rng));
  Tensor& v = params.add("v", random_tensor({6}, rng));
  Tensor& w = params.add("w", random_tensor({4}, rng));
  Tensor& s = params.add("s", random_tensor({1}, rng));
  Tensor& gain = params.add("gain", random_tensor({6}, rng, 0.5, 1.5));
  Tensor& table = params.add("table", random_tensor({5, 6}, rng));
  const int ids[] = {0, 3, 3, 1};
  const int targets[] = {2, -1, 0, 1};
  const std::size_t rows[] = {3, 0, 3};

  std::vector<std::function<Tensor()>> cases = {
      [&] { return sum_all(mul(matmul(a, b), matmul(c, b))); },
      [&] { return sum_all(mul(linear(a, b, slice(v, 0, 3)), linear(c, b))); },
      [&] { return sum_all(mul(matvec(a, v), w)); },
      [&] { return mul(dot(v, v), s); },
      [&] { return sum_all(mul(sub(add(a, c), mul(a, c)), c)); },
      [&] { return sum_all(mul(add_row_vector(a, v), c)); },
      [&] { return sum_all(mul(mul_rows(a, w), c)); },
      [&] { return sum_all(mul(scale(add_scalar(a, s), s), c)); },
      [&] { return sum_all(mul(sigmoid(a), c)); },
      [&] { return sum_all(mul(gelu(mul_scalar(a, 3.0)), c)); },
      [&] { return sum_all(mul(layer_norm(a, gain, v), c)); },
      [&] { return sum_all(mul(dropout(a, 0.3, true, 11), c)); },
      [&] { return mean_all(mul(sum_rows(a), v)); },
      [&] { return sum_all(mul(embedding(table, ids), c)); },
      [&] { return dot(row(a, 2), v); },
      [&] { return sum_all(mul(gather_rows(a, rows), gather_rows(c, rows))); },
      [&] { return sum_all(mul(replace_row(a, 1, v), c)); },
      [&] { return sum_all(mul(concat_rows({a, c}), concat_rows({c, a}))); },
      [&] { return dot(concat({v, w}), concat({w, v})); },
      [&] { return sum_all(mul(reshape(a, {6, 4}), reshape(c, {6, 4}))); },
      [&] { return cross_entropy(linear(a, b), targets, -1); },
  };
  const int which = GetParam();
  ASSERT_LT(static_cast<std::size_t>(which), cases.size());
  GradCheckReport r = finite_diff_check(cases[which], params);
  EXPECT_TRUE(r.passed) << "case " << which << " worst " << r.worst_param << "[" << r.worst_index
                        << "] rel " << r.max_rel_error;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradients, ::testing::Range(0, 21));

TEST(AttentionOp, GradientsIncludingPrefixAndCausalMask) {
  std::mt19937_64 rng(5);
  const std::size_t d = 8, heads = 2;
  ParameterSet params;
  Tensor& q = params.add("q", random_tensor({7, d}, rng));
  Tensor& k = params.add("k", random_tensor({7, d}, rng));
  Tensor& v = params.add("v", random_tensor({7, d}, rng));
  Tensor& c = params.add("c", random_tensor({7, d}, rng));
  const Tensor past_k = random_tensor({3, d}, rng);
  const Tensor past_v = random_tensor({3, d}, rng);
  for (bool causal : {true, false}) {
    std::vector<AttnSegment> segs(2);
    segs[0] = {0, 4, 0, 4, {}};
    segs[1] = {4, 3, 4, 3, {past_k.values().data(), past_v.values().data(), 3, d}};
    auto loss_fn = [&] { return sum_all(mul(attention(q, k, v, segs, heads, causal), c)); };
    GradCheckReport r = finite_diff_check(loss_fn, params);
    EXPECT_TRUE(r.passed) << "causal=" << causal << " " << r.worst_param << " " << r.max_rel_error;
  }
}

TEST(AttentionOp, CausalRowsIgnoreFutureKeys) {
  std::mt19937_64 rng(6);
  const std::size_t d = 4;
  Tensor q = random_tensor({3, d}, rng), k = random_tensor({3, d}, rng);
  Tensor v = random_tensor({3, d}, rng);
  AttnSegment seg{0, 3, 0, 3, {}};
  Tensor out1 = attention(q, k, v, {&seg, 1}, 1, true);
  auto kv2 = k.detach();
  kv2.mutable_values()[2 * d] += 5.0;  // perturb the last key
  Tensor out2 = attention(q, kv2, v, {&seg, 1}, 1, true);
  for (std::size_t j = 0; j < 2 * d; ++j) EXPECT_EQ(out1.at(j), out2.at(j));
  // first query only sees the first value row
  for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(out1.at(j), v.at(j), 1e-15);
}

TEST(AttentionOp, BackwardDoesNotReadCallerPrefixMemory) {
  std::mt19937_64 rng(7);
  const std::size_t d = 4;
  Tensor q = random_tensor({2, d}, rng);
  q.set_requires_grad(true);
  const Tensor k = random_tensor({2, d}, rng), v = random_tensor({2, d}, rng);
  const Tensor c = random_tensor({2, d}, rng);
  std::vector<double> pk(3 * d), pv(3 * d);
  for (double& x : pk) x = std::normal_distribution<double>()(rng);
  for (double& x : pv) x = std::normal_distribution<double>()(rng);
  AttnSegment seg{0, 2, 0, 2, {pk.data(), pv.data(), 3, d}};

  Tensor ref = sum_all(mul(attention(q, k, v, {&seg, 1}, 2, true), c));
  ref.backward();
  const std::vector<double> want(q.grad().begin(), q.grad().end());
  q.zero_grad();

  Tensor loss = sum_all(mul(attention(q, k, v, {&seg, 1}, 2, true), c));
  std::fill(pk.begin(), pk.end(), std::nan(""));
  std::fill(pv.begin(), pv.end(), std::nan(""));
  loss.backward();
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(q.grad()[i], want[i]);
}

// ---- AdamW ----------------------------------------------------------------

TEST(AdamW, ZeroGradientOnlyAppliesWeightDecay) {
  ParameterSet params;
  Tensor& x = params.add("x", Tensor::vector({1.0, -2.0}));
  x.zero_grad();
  OptimizerState st;
  st.config.lr = 0.1;
  st.config.warmup_fraction = 0.0;
  st.config.weight_decay = 0.5;
  adamw_step(params, st);
  EXPECT_DOUBLE_EQ(x.at(0), 1.0 - 0.1 * 0.5 * 1.0);
  EXPECT_DOUBLE_EQ(x.at(1), -2.0 - 0.1 * 0.5 * -2.0);
}

TEST(AdamW, FrozenParameterIsBitwiseUnchanged) {
  ParameterSet params;
  Tensor& x = params.add("x", Tensor::vector({0.3, 0.7}));
  Tensor& y = params.add("y", Tensor::vector({0.1234567, -9.87}), false);
  auto loss = add(dot(x, x), dot(y, y));
  loss.backward();
  OptimizerState st;
  st.config.lr = 1.0;
  adamw_step(params, st);
  EXPECT_EQ(y.at(0), 0.1234567);
  EXPECT_EQ(y.at(1), -9.87);
  EXPECT_NE(x.at(0), 0.3);
}

TEST(AdamW, WarmupScheduleClosedForm) {
  AdamWConfig c;
  c.lr = 1e-3;
  c.total_steps = 1000;
  c.warmup_fraction = 0.05;
  EXPECT_DOUBLE_EQ(warmup_lr(c, 1), 1e-3 / 50.0);
  EXPECT_DOUBLE_EQ(warmup_lr(c, 25), 1e-3 * 0.5);
  EXPECT_DOUBLE_EQ(warmup_lr(c, 50), 1e-3);
  EXPECT_DOUBLE_EQ(warmup_lr(c, 900), 1e-3);
}

TEST(AdamW, FirstStepMovesByLearningRateTimesSign) {
  ParameterSet params;
  Tensor& x = params.add("x", Tensor::vector({1.0, 1.0}));
  x.mutable_grad()[0] = 3.0;
  x.mutable_grad()[1] = -0.01;
  OptimizerState st;
  st.config.lr = 0.01;
  st.config.warmup_fraction = 0.0;
  st.config.weight_decay = 0.0;
  adamw_step(params, st);
  EXPECT_NEAR(x.at(0), 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(x.at(1), 1.0 + 0.01, 1e-6);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, MissingGradientIsATrainingError) {
  ParameterSet params;
  params.add("x", Tensor::vector({1.0}));
  OptimizerState st;
  EXPECT_THROW(adamw_step(params, st), TrainingError);
}

TEST(ParameterSetTest, NamesAreUnique) {
  ParameterSet params;
  params.add("a", Tensor::vector({1.0}));
  EXPECT_THROW(params.add("a", Tensor::vector({1.0})), ConfigError);
}

TEST(ParameterSetTest, ZeroGradLeavesNoAccumulator) {
  ParameterSet params;
  Tensor& x = params.add("x", Tensor::vector({1.0, 2.0}));
  dot(x, x).backward();
  EXPECT_TRUE(x.has_grad());
  x.zero_grad();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  ParameterSet params;
  Tensor& x = params.add("x", Tensor::vector({0.0, 0.0}));
  x.mutable_grad()[0] = 3.0;
  x.mutable_grad()[1] = 4.0;
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(x.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(x.grad()[1], 0.8, 1e-15);
}

}  // namespace
}  // namespace refilter::nn
