#include "refilter/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "refilter/errors.hpp"
#include "refilter/numerics/kernels.hpp"

namespace refilter::nn {
namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

inline bool wants(const Node& self, std::size_t i) {
  return self.parents.size() > i && self.parents[i]->requires_grad;
}

inline std::vector<double>& pgrad(Node& self, std::size_t i) {
  return self.parents[i]->grad_buffer();
}

inline const std::vector<double>& pval(const Node& self, std::size_t i) {
  return self.parents[i]->value;
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  kernels::gemm(false, false, m, n, k, a.values().data(), b.values().data(), out.data(), false);
  return make_result({m, n}, std::move(out), {a, b}, [m, n, k](Node& self) {
    const double* g = self.grad.data();
    if (wants(self, 0)) {
      kernels::gemm(false, true, m, k, n, g, pval(self, 1).data(), pgrad(self, 0).data(), true);
    }
    if (wants(self, 1)) {
      kernels::gemm(true, false, k, n, m, pval(self, 0).data(), g, pgrad(self, 1).data(), true);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const std::size_t r = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  if (w.dim(0) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.numel() != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                         shape_str(w.shape()));
  }
  std::vector<double> out(r * out_dim);
  if (has_bias) {
    const double* bv = bias.values().data();
    for (std::size_t i = 0; i < r; ++i) std::copy(bv, bv + out_dim, out.data() + i * out_dim);
  }
  kernels::gemm(false, false, r, out_dim, in, x.values().data(), w.values().data(), out.data(),
                has_bias);
  std::vector<Tensor> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return make_result({r, out_dim}, std::move(out), parents, [r, in, out_dim](Node& self) {
    const double* g = self.grad.data();
    if (wants(self, 0)) {
      kernels::gemm(false, true, r, in, out_dim, g, pval(self, 1).data(), pgrad(self, 0).data(),
                    true);
    }
    if (wants(self, 1)) {
      kernels::gemm(true, false, in, out_dim, r, pval(self, 0).data(), g, pgrad(self, 1).data(),
                    true);
    }
    if (wants(self, 2)) {
      auto& gb = pgrad(self, 2);
      for (std::size_t i = 0; i < r; ++i) kernels::axpy(1.0, g + i * out_dim, gb.data(), out_dim);
    }
  });
}

Tensor matvec(const Tensor& x, const Tensor& w) {
  require_rank(x, 2, "matvec");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (w.numel() != c) {
    throw DimensionError("matvec: " + shape_str(x.shape()) + " . " + shape_str(w.shape()));
  }
  std::vector<double> out(r);
  const double* xv = x.values().data();
  const double* wv = w.values().data();
  for (std::size_t i = 0; i < r; ++i) out[i] = kernels::dot(xv + i * c, wv, c);
  return make_result({r}, std::move(out), {x, w}, [r, c](Node& self) {
    const double* g = self.grad.data();
    if (wants(self, 0)) {
      auto& gx = pgrad(self, 0);
      const double* wv = pval(self, 1).data();
      for (std::size_t i = 0; i < r; ++i) kernels::axpy(g[i], wv, gx.data() + i * c, c);
    }
    if (wants(self, 1)) {
      auto& gw = pgrad(self, 1);
      const double* xv = pval(self, 0).data();
      for (std::size_t i = 0; i < r; ++i) kernels::axpy(g[i], xv + i * c, gw.data(), c);
    }
  });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("dot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  const double v = kernels::dot(a.values().data(), b.values().data(), n);
  return make_result({1}, {v}, {a, b}, [n](Node& self) {
    const double g = self.grad[0];
    if (wants(self, 0)) kernels::axpy(g, pval(self, 1).data(), pgrad(self, 0).data(), n);
    if (wants(self, 1)) kernels::axpy(g, pval(self, 0).data(), pgrad(self, 1).data(), n);
  });
}

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const std::size_t n = self.grad.size();
    for (std::size_t p = 0; p < 2; ++p) {
      if (wants(self, p)) kernels::axpy(1.0, self.grad.data(), pgrad(self, p).data(), n);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const std::size_t n = self.grad.size();
    if (wants(self, 0)) kernels::axpy(1.0, self.grad.data(), pgrad(self, 0).data(), n);
    if (wants(self, 1)) kernels::axpy(-1.0, self.grad.data(), pgrad(self, 1).data(), n);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const std::size_t n = self.grad.size();
    if (wants(self, 0)) {
      auto& ga = pgrad(self, 0);
      const auto& bv = pval(self, 1);
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * bv[i];
    }
    if (wants(self, 1)) {
      auto& gb = pgrad(self, 1);
      const auto& av = pval(self, 0);
      for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * av[i];
    }
  });
}

Tensor add_row_vector(const Tensor& x, const Tensor& v) {
  require_rank(x, 2, "add_row_vector");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (v.numel() != c) {
    throw DimensionError("add_row_vector: " + shape_str(x.shape()) + " + " +
                         shape_str(v.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  const double* vv = v.values().data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += vv[j];
  }
  return make_result(x.shape(), std::move(out), {x, v}, [r, c](Node& self) {
    if (wants(self, 0)) kernels::axpy(1.0, self.grad.data(), pgrad(self, 0).data(), r * c);
    if (wants(self, 1)) {
      auto& gv = pgrad(self, 1);
      for (std::size_t i = 0; i < r; ++i) kernels::axpy(1.0, self.grad.data() + i * c, gv.data(), c);
    }
  });
}

Tensor mul_rows(const Tensor& x, const Tensor& w) {
  require_rank(x, 2, "mul_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (w.numel() != r) {
    throw DimensionError("mul_rows: " + shape_str(x.shape()) + " * " + shape_str(w.shape()));
  }
  const auto xv = x.values();
  const auto wv = w.values();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = wv[i] * xv[i * c + j];
  }
  return make_result(x.shape(), std::move(out), {x, w}, [r, c](Node& self) {
    const double* g = self.grad.data();
    if (wants(self, 0)) {
      auto& gx = pgrad(self, 0);
      const auto& wv = pval(self, 1);
      for (std::size_t i = 0; i < r; ++i) kernels::axpy(wv[i], g + i * c, gx.data() + i * c, c);
    }
    if (wants(self, 1)) {
      auto& gw = pgrad(self, 1);
      const auto& xv = pval(self, 0);
      for (std::size_t i = 0; i < r; ++i) gw[i] += kernels::dot(g + i * c, xv.data() + i * c, c);
    }
  });
}

Tensor scale(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("scale: scalar expected, got " + shape_str(s.shape()));
  const double sv = s.item();
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= sv;
  return make_result(x.shape(), std::move(out), {x, s}, [](Node& self) {
    const std::size_t n = self.grad.size();
    if (wants(self, 0)) kernels::axpy(pval(self, 1)[0], self.grad.data(), pgrad(self, 0).data(), n);
    if (wants(self, 1)) {
      pgrad(self, 1)[0] += kernels::dot(self.grad.data(), pval(self, 0).data(), n);
    }
  });
}

Tensor add_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw DimensionError("add_scalar: scalar expected, got " + shape_str(s.shape()));
  }
  const double sv = s.item();
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v += sv;
  return make_result(x.shape(), std::move(out), {x, s}, [](Node& self) {
    const std::size_t n = self.grad.size();
    if (wants(self, 0)) kernels::axpy(1.0, self.grad.data(), pgrad(self, 0).data(), n);
    if (wants(self, 1)) {
      pgrad(self, 1)[0] += std::accumulate(self.grad.begin(), self.grad.end(), 0.0);
    }
  });
}

Tensor mul_scalar(const Tensor& x, double s) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= s;
  return make_result(x.shape(), std::move(out), {x}, [s](Node& self) {
    kernels::axpy(s, self.grad.data(), pgrad(self, 0).data(), self.grad.size());
  });
}

Tensor sigmoid(const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double z = std::clamp(xv[i], -kSigmoidClamp, kSigmoidClamp);
    out[i] = 1.0 / (1.0 + std::exp(-z));
  }
  return make_result(x.shape(), out, {x}, [](Node& self) {
    auto& gx = pgrad(self, 0);
    const auto& xv = pval(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xv[i] < -kSigmoidClamp || xv[i] > kSigmoidClamp) continue;
      const double y = self.value[i];
      gx[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    auto& gx = pgrad(self, 0);
    const auto& xv = pval(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xv[i];
      const double u = kGeluC * (v + kGeluA * v * v * v);
      const double t = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      gx[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t c = x.shape().back();
  const std::size_t r = x.numel() / c;
  if (gain.numel() != c || bias.numel() != c) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " vs gain " +
                         shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
  }
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> out(r * c);
  auto xhat = std::make_shared<std::vector<double>>(r * c);
  auto inv_std = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row_in = xv.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row_in[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = row_in[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row_in[j] - mean) * is;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = gv[j] * h + bv[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [r, c, xhat, inv_std](Node& self) {
    const double* g = self.grad.data();
    const auto& gv = pval(self, 1);
    if (wants(self, 0)) {
      auto& gx = pgrad(self, 0);
      std::vector<double> gh(c);
      for (std::size_t i = 0; i < r; ++i) {
        double mean_gh = 0.0, mean_ghx = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          gh[j] = g[i * c + j] * gv[j];
          mean_gh += gh[j];
          mean_ghx += gh[j] * (*xhat)[i * c + j];
        }
        mean_gh /= static_cast<double>(c);
        mean_ghx /= static_cast<double>(c);
        const double is = (*inv_std)[i];
        for (std::size_t j = 0; j < c; ++j) {
          gx[i * c + j] += is * (gh[j] - mean_gh - (*xhat)[i * c + j] * mean_ghx);
        }
      }
    }
    if (wants(self, 1)) {
      auto& gg = pgrad(self, 1);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * (*xhat)[i * c + j];
      }
    }
    if (wants(self, 2)) {
      auto& gb = pgrad(self, 2);
      for (std::size_t i = 0; i < r; ++i) kernels::axpy(1.0, g + i * c, gb.data(), c);
    }
  });
}

namespace {
// SplitMix64 keyed on (seed, index): mask bits are independent of call order.
inline std::uint64_t splitmix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

Tensor dropout(const Tensor& x, double p, bool training, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const std::size_t n = x.numel();
  auto mask = std::make_shared<std::vector<double>>(n);
  const double keep_scale = 1.0 / (1.0 - p);
  const std::uint64_t base = splitmix(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(splitmix(base ^ (i * 0xd1b54a32d192ed03ULL)) >> 11) *
                     0x1.0p-53;
    (*mask)[i] = u < p ? 0.0 : keep_scale;
  }
  const auto xv = x.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] * (*mask)[i];
  return make_result(x.shape(), std::move(out), {x}, [mask](Node& self) {
    auto& gx = pgrad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------------------

Tensor sum_rows(const Tensor& x) {
  require_rank(x, 2, "sum_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(c, 0.0);
  const double* xv = x.values().data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j] += xv[i * c + j];
  }
  return make_result({c}, std::move(out), {x}, [r, c](Node& self) {
    auto& gx = pgrad(self, 0);
    for (std::size_t i = 0; i < r; ++i) kernels::axpy(1.0, self.grad.data(), gx.data() + i * c, c);
  });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result({1}, {s}, {x}, [](Node& self) {
    auto& gx = pgrad(self, 0);
    const double g = self.grad[0];
    for (double& v : gx) v += g;
  });
}

Tensor mean_all(const Tensor& x) {
  const std::size_t n = x.numel();
  if (n == 0) throw DimensionError("mean_all of an empty tensor");
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / static_cast<double>(n);
  return make_result({1}, {s * inv}, {x}, [inv](Node& self) {
    auto& gx = pgrad(self, 0);
    const double g = self.grad[0] * inv;
    for (double& v : gx) v += g;
  });
}

// ---------------------------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  const std::size_t n = ids.size();
  std::vector<double> out(n * d);
  const double* tv = table.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    std::copy(tv + ids[i] * d, tv + (ids[i] + 1) * d, out.data() + i * d);
  }
  auto idv = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return make_result({n, d}, std::move(out), {table}, [idv, d](Node& self) {
    auto& gt = pgrad(self, 0);
    for (std::size_t i = 0; i < idv->size(); ++i) {
      kernels::axpy(1.0, self.grad.data() + i * d, gt.data() + (*idv)[i] * d, d);
    }
  });
}

Tensor row(const Tensor& x, std::size_t i) {
  require_rank(x, 2, "row");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (i >= r) {
    throw IndexError("row " + std::to_string(i) + " of " + shape_str(x.shape()));
  }
  const double* xv = x.values().data() + i * c;
  return make_result({c}, std::vector<double>(xv, xv + c), {x}, [i, c](Node& self) {
    kernels::axpy(1.0, self.grad.data(), pgrad(self, 0).data() + i * c, c);
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_rank(x, 2, "gather_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(rows.size() * c);
  const double* xv = x.values().data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r) {
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " of " +
                       shape_str(x.shape()));
    }
    std::copy(xv + rows[i] * c, xv + (rows[i] + 1) * c, out.data() + i * c);
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  return make_result({rows.size(), c}, std::move(out), {x}, [idx, c](Node& self) {
    auto& gx = pgrad(self, 0);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      kernels::axpy(1.0, self.grad.data() + i * c, gx.data() + (*idx)[i] * c, c);
    }
  });
}

Tensor replace_row(const Tensor& x, std::size_t i, const Tensor& v) {
  require_rank(x, 2, "replace_row");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (i >= r) throw IndexError("replace_row " + std::to_string(i) + " of " + shape_str(x.shape()));
  if (v.numel() != c) {
    throw DimensionError("replace_row: row of " + shape_str(x.shape()) + " vs " +
                         shape_str(v.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  std::copy(v.values().begin(), v.values().end(), out.begin() + i * c);
  return make_result(x.shape(), std::move(out), {x, v}, [i, r, c](Node& self) {
    if (wants(self, 0)) {
      auto& gx = pgrad(self, 0);
      for (std::size_t k = 0; k < r * c; ++k) {
        if (k / c != i) gx[k] += self.grad[k];
      }
    }
    if (wants(self, 1)) kernels::axpy(1.0, self.grad.data() + i * c, pgrad(self, 1).data(), c);
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t c = parts.front().shape().back();
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    if (p.shape().back() != c || p.rank() > 2) {
      throw DimensionError("concat_rows: " + shape_str(p.shape()) + " vs width " +
                           std::to_string(c));
    }
    rows += p.numel() / c;
  }
  std::vector<double> out;
  out.reserve(rows * c);
  auto offsets = std::make_shared<std::vector<std::size_t>>();
  for (const Tensor& p : parts) {
    offsets->push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return make_result({rows, c}, std::move(out), parts, [offsets](Node& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      if (!wants(self, p)) continue;
      auto& gp = pgrad(self, p);
      kernels::axpy(1.0, self.grad.data() + (*offsets)[p], gp.data(), gp.size());
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts) {
  std::vector<double> out;
  auto offsets = std::make_shared<std::vector<std::size_t>>();
  for (const Tensor& p : parts) {
    offsets->push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  const std::size_t n = out.size();
  return make_result({n}, std::move(out), parts, [offsets](Node& self) {
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      if (!wants(self, p)) continue;
      auto& gp = pgrad(self, p);
      kernels::axpy(1.0, self.grad.data() + (*offsets)[p], gp.data(), gp.size());
    }
  });
}

Tensor slice(const Tensor& x, std::size_t begin, std::size_t len) {
  if (begin + len > x.numel()) {
    throw IndexError("slice [" + std::to_string(begin) + ", " + std::to_string(begin + len) +
                     ") of " + shape_str(x.shape()));
  }
  const double* xv = x.values().data() + begin;
  return make_result({len}, std::vector<double>(xv, xv + len), {x}, [begin, len](Node& self) {
    kernels::axpy(1.0, self.grad.data(), pgrad(self, 0).data() + begin, len);
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_result(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()),
                     {x}, [](Node& self) {
    kernels::axpy(1.0, self.grad.data(), pgrad(self, 0).data(), self.grad.size());
  });
}

// ---------------------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const AttnSegment> segments, std::size_t heads, bool causal) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_same(k, v, "attention");
  const std::size_t d = q.dim(1);
  if (k.dim(1) != d) {
    throw DimensionError("attention: query " + shape_str(q.shape()) + " vs key " +
                         shape_str(k.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t rq = q.dim(0), rk = k.dim(0);
  for (const AttnSegment& s : segments) {
    if (s.q_begin + s.q_len > rq || s.k_begin + s.k_len > rk || (causal && s.q_len > s.k_len)) {
      throw DimensionError("attention: segment out of range");
    }
  }

  const double* qv = q.values().data();
  const double* kv = k.values().data();
  const double* vv = v.values().data();
  std::vector<double> out(rq * d, 0.0);

  // probs[seg][head][i] holds the softmax row for query i over (past, new keys).
  struct Saved {
    std::vector<AttnSegment> segs;
    std::vector<std::size_t> row_offsets;  // start of each (seg, head, query) row
    std::vector<double> probs;
    std::vector<std::vector<double>> past_k, past_v;  // owned prefix copies
  };
  auto saved = std::make_shared<Saved>();
  saved->segs.assign(segments.begin(), segments.end());
  // Prefixes are borrowed memory (e.g. a caller's KV cache) that may be gone
  // by the time backward runs, so the tape keeps its own copy.
  if (q.requires_grad() || k.requires_grad() || v.requires_grad()) {
    for (AttnSegment& s : saved->segs) {
      if (s.past.len == 0) continue;
      std::vector<double> pk(s.past.len * d), pv(s.past.len * d);
      for (std::size_t j = 0; j < s.past.len; ++j) {
        std::copy(s.past.k + j * s.past.stride, s.past.k + j * s.past.stride + d, pk.data() + j * d);
        std::copy(s.past.v + j * s.past.stride, s.past.v + j * s.past.stride + d, pv.data() + j * d);
      }
      saved->past_k.push_back(std::move(pk));
      saved->past_v.push_back(std::move(pv));
      s.past = KVPrefix{saved->past_k.back().data(), saved->past_v.back().data(), s.past.len, d};
    }
  }

  auto visible = [causal](const AttnSegment& s, std::size_t i) {
    return causal ? s.k_len - s.q_len + i + 1 : s.k_len;
  };

  std::vector<double> scores;
  for (const AttnSegment& s : segments) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < s.q_len; ++i) {
        const std::size_t nv = visible(s, i);
        const std::size_t total = s.past.len + nv;
        const double* qi = qv + (s.q_begin + i) * d + h * dh;
        scores.resize(total);
        double mx = -1e300;
        for (std::size_t j = 0; j < s.past.len; ++j) {
          scores[j] = kernels::dot(qi, s.past.k + j * s.past.stride + h * dh, dh) * scale_factor;
          mx = std::max(mx, scores[j]);
        }
        for (std::size_t j = 0; j < nv; ++j) {
          scores[s.past.len + j] = kernels::dot(qi, kv + (s.k_begin + j) * d + h * dh, dh) *
                                   scale_factor;
          mx = std::max(mx, scores[s.past.len + j]);
        }
        double z = 0.0;
        for (double& sc : scores) {
          sc = std::exp(sc - mx);
          z += sc;
        }
        const double invz = 1.0 / z;
        double* oi = out.data() + (s.q_begin + i) * d + h * dh;
        saved->row_offsets.push_back(saved->probs.size());
        for (std::size_t j = 0; j < total; ++j) {
          const double p = scores[j] * invz;
          saved->probs.push_back(p);
          const double* vj = j < s.past.len ? s.past.v + j * s.past.stride + h * dh
                                            : vv + (s.k_begin + j - s.past.len) * d + h * dh;
          kernels::axpy(p, vj, oi, dh);
        }
      }
    }
  }

  return make_result({rq, d}, std::move(out), {q, k, v},
                     [saved, heads, dh, d, scale_factor, visible](Node& self) {
    const double* g = self.grad.data();
    const auto& qv = pval(self, 0);
    const auto& kv = pval(self, 1);
    const auto& vv = pval(self, 2);
    const bool gq = wants(self, 0), gk = wants(self, 1), gv = wants(self, 2);
    double* dq = gq ? pgrad(self, 0).data() : nullptr;
    double* dk = gk ? pgrad(self, 1).data() : nullptr;
    double* dvv = gv ? pgrad(self, 2).data() : nullptr;
    std::vector<double> dp;
    std::size_t row_idx = 0;
    for (const AttnSegment& s : saved->segs) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < s.q_len; ++i) {
          const std::size_t nv = visible(s, i);
          const std::size_t total = s.past.len + nv;
          const double* p = saved->probs.data() + saved->row_offsets[row_idx++];
          const double* gi = g + (s.q_begin + i) * d + h * dh;
          dp.resize(total);
          double pdp = 0.0;
          for (std::size_t j = 0; j < total; ++j) {
            const double* vj = j < s.past.len
                                   ? s.past.v + j * s.past.stride + h * dh
                                   : vv.data() + (s.k_begin + j - s.past.len) * d + h * dh;
            dp[j] = kernels::dot(gi, vj, dh);
            pdp += p[j] * dp[j];
          }
          const double* qi = qv.data() + (s.q_begin + i) * d + h * dh;
          for (std::size_t j = 0; j < total; ++j) {
            const double ds = p[j] * (dp[j] - pdp) * scale_factor;
            const bool is_past = j < s.past.len;
            const double* kj = is_past ? s.past.k + j * s.past.stride + h * dh
                                       : kv.data() + (s.k_begin + j - s.past.len) * d + h * dh;
            if (gq) kernels::axpy(ds, kj, dq + (s.q_begin + i) * d + h * dh, dh);
            if (is_past) continue;
            const std::size_t krow = s.k_begin + j - s.past.len;
            if (gk) kernels::axpy(ds, qi, dk + krow * d + h * dh, dh);
            if (gv) kernels::axpy(p[j], gi, dvv + krow * d + h * dh, dh);
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    ++count;
  }
  const double* lv = logits.values().data();
  auto probs = std::make_shared<std::vector<double>>(n * vocab, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == ignore_index) continue;
    const double* li = lv + i * vocab;
    const double mx = *std::max_element(li, li + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(li[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - li[targets[i]];
    for (std::size_t j = 0; j < vocab; ++j) (*probs)[i * vocab + j] = std::exp(li[j] - lse);
  }
  const double inv = count ? 1.0 / static_cast<double>(count) : 0.0;
  auto tg = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  return make_result({1}, {loss * inv}, {logits},
                     [probs, tg, inv, vocab, ignore_index](Node& self) {
    if (inv == 0.0) return;
    auto& gl = pgrad(self, 0);
    const double g = self.grad[0] * inv;
    for (std::size_t i = 0; i < tg->size(); ++i) {
      if ((*tg)[i] == ignore_index) continue;
      double* gi = gl.data() + i * vocab;
      const double* pi = probs->data() + i * vocab;
      for (std::size_t j = 0; j < vocab; ++j) gi[j] += g * pi[j];
      gi[(*tg)[i]] -= g;
    }
  });
}

}  // namespace refilter::nn
