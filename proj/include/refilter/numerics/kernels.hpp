#pragma once

// Double-precision inner-loop kernels. Every kernel has a scalar reference
// implementation and an AVX2/FMA variant; the active table is chosen once at
// startup from CPUID. Setting REFILTER_FORCE_SCALAR=1 pins the scalar table.

#include <cstddef>
#include <string_view>

namespace refilter::nn::kernels {

struct KernelTable {
  std::string_view name;
  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // C[m x n] (+)= A[m x k] * B[k x n], all row-major with leading dims.
  // accumulate=false overwrites C.
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                  std::size_t lda, const double* b, std::size_t ldb, double* c,
                  std::size_t ldc, bool accumulate);
};

const KernelTable& scalar_table();
// nullptr when the binary was built without AVX2 support.
const KernelTable* avx2_table();
bool cpu_has_avx2();

// Table selected for this process.
const KernelTable& active();

// Convenience wrappers over active().
inline double dot(const double* a, const double* b, std::size_t n) {
  return active().dot(a, b, n);
}
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}

// C = A * B with optional transposes, built on gemm_nn. Shapes are the
// logical (post-transpose) shapes: op(A) is m x k, op(B) is k x n.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

}  // namespace refilter::nn::kernels
