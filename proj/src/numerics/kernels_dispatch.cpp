#include <cstdlib>
#include <cstring>
#include <vector>

#include "refilter/numerics/kernels.hpp"

namespace refilter::nn::kernels {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

const KernelTable& select() {
  const char* force = std::getenv("REFILTER_FORCE_SCALAR");
  if (force != nullptr && std::strcmp(force, "0") != 0 && force[0] != '\0') {
    return scalar_table();
  }
  if (cpu_has_avx2() && avx2_table() != nullptr) return *avx2_table();
  return scalar_table();
}

void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
}

}  // namespace

const KernelTable& active() {
  static const KernelTable& table = select();
  return table;
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::memset(c, 0, sizeof(double) * m * n);
    return;
  }
  std::vector<double> at;
  std::vector<double> bt;
  const double* ap = a;
  const double* bp = b;
  if (trans_a) {  // stored as k x m
    at.resize(m * k);
    transpose(k, m, a, at.data());
    ap = at.data();
  }
  if (trans_b) {  // stored as n x k
    bt.resize(k * n);
    transpose(n, k, b, bt.data());
    bp = bt.data();
  }
  active().gemm_nn(m, n, k, ap, k, bp, n, c, n, accumulate);
}

}  // namespace refilter::nn::kernels
