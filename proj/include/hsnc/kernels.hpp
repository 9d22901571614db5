#pragma once

#include <Eigen/Core>

namespace hsnc {

// Thin row-major GEMM wrappers over Eigen. All matrices are contiguous
// row-major float buffers.
namespace detail {
using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
} // namespace detail

// C[m,n] = A[m,k] * B[k,n], accumulating into C when acc is set.
inline void gemm_nn(const float* A, const float* B, float* C,
                    std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false) {
    detail::CMapRM a(A, m, k), b(B, k, n);
    detail::MapRM c(C, m, n);
    if (acc)
        c.noalias() += a * b;
    else
        c.noalias() = a * b;
}

// C[m,n] = A[m,k] * B^T where B is stored [n,k].
inline void gemm_nt(const float* A, const float* B, float* C,
                    std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false) {
    detail::CMapRM a(A, m, k), b(B, n, k);
    detail::MapRM c(C, m, n);
    if (acc)
        c.noalias() += a * b.transpose();
    else
        c.noalias() = a * b.transpose();
}

// C[m,n] = A^T * B where A is stored [k,m].
inline void gemm_tn(const float* A, const float* B, float* C,
                    std::int64_t m, std::int64_t k, std::int64_t n, bool acc = false) {
    detail::CMapRM a(A, k, m), b(B, k, n);
    detail::MapRM c(C, m, n);
    if (acc)
        c.noalias() += a.transpose() * b;
    else
        c.noalias() = a.transpose() * b;
}

} // namespace hsnc
