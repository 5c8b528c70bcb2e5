#pragma once

// Data-parallel inner loops. Every kernel has a serial reference version kept
// for testing and benchmarking; the unqualified entry points dispatch to the
// OpenMP version.

#include <cstddef>

namespace dpkfc::kernels {

// C[m x n] = A[m x k] * B[k x n]   (all row-major, C overwritten)
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
// C[m x n] = A[k x m]^T * B[k x n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
// C[m x n] = A[m x k] * B[n x k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
// C[k x k] = scale * X[n x k]^T X, symmetric; the dominant cost of factor estimation.
void gram(std::size_t n, std::size_t k, const double* x, double scale, double* c);

namespace serial {
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gram(std::size_t n, std::size_t k, const double* x, double scale, double* c);
}  // namespace serial

namespace parallel {
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
void gram(std::size_t n, std::size_t k, const double* x, double scale, double* c);
}  // namespace parallel

int max_threads();

}  // namespace dpkfc::kernels
