#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "refilter/numerics/tensor.hpp"

namespace refilter::nn {

// Pre-activations are clamped to [-kSigmoidClamp, kSigmoidClamp] so sigmoid
// never returns exactly 0 or 1. The clamped region has zero derivative.
inline constexpr double kSigmoidClamp = 30.0;
inline constexpr double kLayerNormEps = 1e-5;

// ---- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);  // [m x k] . [k x n]
// x [r x in] . w [in x out] (+ bias [out] when defined)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());
Tensor matvec(const Tensor& x, const Tensor& w);  // [r x c] . [c] -> [r]
Tensor dot(const Tensor& a, const Tensor& b);     // same-size -> [1]

// ---- element-wise ---------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row_vector(const Tensor& x, const Tensor& v);  // [r x c] + [c]
Tensor mul_rows(const Tensor& x, const Tensor& w);        // [r x c] * [r] per row
Tensor scale(const Tensor& x, const Tensor& s);           // s[1] * x
Tensor add_scalar(const Tensor& x, const Tensor& s);      // x + s[1]
Tensor mul_scalar(const Tensor& x, double s);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation

// ---- normalization / regularization ----------------------------------------
// Normalizes over the last axis, then gain * xhat + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);
// Inverted dropout. The mask is a pure function of (seed, element index).
Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed);

// ---- reductions -----------------------------------------------------------
Tensor sum_rows(const Tensor& x);  // [r x c] -> [c]
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- indexing / layout ----------------------------------------------------
Tensor embedding(const Tensor& table, std::span<const int> ids);  // -> [n x d]
Tensor row(const Tensor& x, std::size_t i);                       // -> [c]
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor replace_row(const Tensor& x, std::size_t i, const Tensor& v);
Tensor concat_rows(const std::vector<Tensor>& parts);  // along axis 0
Tensor concat(const std::vector<Tensor>& parts);       // flat 1-D concatenation
Tensor slice(const Tensor& x, std::size_t begin, std::size_t len);  // flat range
Tensor reshape(const Tensor& x, Shape shape);

// ---- attention ------------------------------------------------------------
// Constant keys/values that precede a segment's own keys (e.g. a KV cache).
struct KVPrefix {
  const double* k = nullptr;
  const double* v = nullptr;
  std::size_t len = 0;
  std::size_t stride = 0;  // row stride in doubles
};

// Query rows [q_begin, q_begin+q_len) attend to `past` followed by key rows
// [k_begin, k_begin+k_len). Under causal masking, query i sees every past row
// and new keys j <= k_len - q_len + i.
struct AttnSegment {
  std::size_t q_begin = 0;
  std::size_t q_len = 0;
  std::size_t k_begin = 0;
  std::size_t k_len = 0;
  KVPrefix past{};
};

// Multi-head scaled dot-product attention over packed rows. q [rq x d],
// k/v [rk x d]; gradients flow to q, k and v but not to prefixes.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const AttnSegment> segments, std::size_t heads, bool causal);

// ---- losses ---------------------------------------------------------------
// Mean negative log-likelihood over targets != ignore_index. When every
// position is ignored the loss is 0 with zero gradient.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index);

}  // namespace refilter::nn
