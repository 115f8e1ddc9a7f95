#pragma once

// Dense double-precision kernels behind every matrix product in the model.
//
// Two implementations exist: a scalar reference written as plain loops, and an
// AVX2/FMA variant. The active table is chosen once at startup from CPUID; set
// CWSAM_KERNELS=scalar to force the reference path. The variants agree to
// rounding, not bit-for-bit, so all bit-exact guarantees in this project hold
// per kernel table.

#include <cstddef>
#include <string_view>

namespace cwsam::kernels {

// Row-major GEMM. All leading dimensions are in elements.
//   nn: C[m,n] (+)= A[m,k]   * B[k,n]
//   nt: C[m,n] (+)= A[m,k]   * B[n,k]^T
//   tn: C[m,n] (+)= A[k,m]^T * B[k,n]
// When accumulate is false C is overwritten.
using GemmFn = void (*)(std::size_t m, std::size_t n, std::size_t k,
                        const double* a, std::size_t lda,
                        const double* b, std::size_t ldb,
                        double* c, std::size_t ldc, bool accumulate);

// y[i] += alpha * x[i]
using AxpyFn = void (*)(std::size_t n, double alpha, const double* x, double* y);

using DotFn = double (*)(std::size_t n, const double* x, const double* y);

struct KernelTable {
    std::string_view name;
    GemmFn gemm_nn;
    GemmFn gemm_nt;
    GemmFn gemm_tn;
    AxpyFn axpy;
    DotFn dot;
};

const KernelTable& scalar_table();

// nullptr when the CPU lacks AVX2 or FMA.
const KernelTable* avx2_table();

// Table used by the rest of the library.
const KernelTable& active();

}  // namespace cwsam::kernels
