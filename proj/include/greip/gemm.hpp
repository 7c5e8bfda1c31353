#pragma once

#include <algorithm>
#include <cstddef>
#include <mutex>

#if defined(GREIP_HAVE_OPENBLAS)
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace greip::detail {

// Row-major C = alpha * op(A) * op(B) + beta * C, with op controlled by
// ta/tb. A is m x k after op, B is k x n after op, C is m x n. Leading
// dimensions are the row strides of the *stored* matrices.
inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
#if defined(GREIP_HAVE_OPENBLAS)
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
#else
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<std::size_t>(i) * ldc;
    if (beta == 0.0) {
      std::fill(crow, crow + n, 0.0);
    } else if (beta != 1.0) {
      for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
  }
  constexpr int kBlock = 64;
  for (int i0 = 0; i0 < m; i0 += kBlock) {
    const int i1 = std::min(m, i0 + kBlock);
    for (int p0 = 0; p0 < k; p0 += kBlock) {
      const int p1 = std::min(k, p0 + kBlock);
      for (int i = i0; i < i1; ++i) {
        double* crow = c + static_cast<std::size_t>(i) * ldc;
        for (int p = p0; p < p1; ++p) {
          const double av =
              ta ? a[static_cast<std::size_t>(p) * lda + i]
                 : a[static_cast<std::size_t>(i) * lda + p];
          const double s = alpha * av;
          if (s == 0.0) continue;
          if (!tb) {
            const double* brow = b + static_cast<std::size_t>(p) * ldb;
            for (int j = 0; j < n; ++j) crow[j] += s * brow[j];
          } else {
            for (int j = 0; j < n; ++j)
              crow[j] += s * b[static_cast<std::size_t>(j) * ldb + p];
          }
        }
      }
    }
  }
#endif
}

}  // namespace greip::detail
