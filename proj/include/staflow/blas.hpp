#pragma once

#include <cblas.h>

#include <mutex>

extern "C" void openblas_set_num_threads(int);

namespace staflow::detail {

// All BLAS calls run single-threaded; parallelism lives above (per-sample /
// per-seed workers), which keeps results independent of the thread budget.
inline void blas_init() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

/// Row-major C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha,
          const T* a, int lda, const T* b, int ldb, T beta, T* c, int ldc) {
  blas_init();
  if constexpr (sizeof(T) == sizeof(float)) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha,
                reinterpret_cast<const float*>(a), lda,
                reinterpret_cast<const float*>(b), ldb, beta,
                reinterpret_cast<float*>(c), ldc);
  } else {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha,
                reinterpret_cast<const double*>(a), lda,
                reinterpret_cast<const double*>(b), ldb, beta,
                reinterpret_cast<double*>(c), ldc);
  }
}

/// C[r,j] = sum_k A[r,k] * B[j,k] as independent sequential dot products.
/// Unlike a blocked BLAS kernel, each output element is computed the same way
/// no matter where its row sits, so batched results are stable under row
/// permutation. Used for the light affine maps; convolutions go through BLAS
/// per sample.
template <typename T>
void dot_gemm_nt(int rows, int jdim, int kdim, const T* a, const T* b, T* c) {
  for (int r = 0; r < rows; ++r) {
    const T* ar = a + static_cast<std::size_t>(r) * kdim;
    for (int j = 0; j < jdim; ++j) {
      const T* bj = b + static_cast<std::size_t>(j) * kdim;
      T acc = T(0);
      for (int k = 0; k < kdim; ++k) acc += ar[k] * bj[k];
      c[static_cast<std::size_t>(r) * jdim + j] = acc;
    }
  }
}

}  // namespace staflow::detail
