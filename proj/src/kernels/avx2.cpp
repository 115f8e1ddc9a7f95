#include "cwsam/kernels.hpp"

#include <vector>

#if defined(__x86_64__) || defined(_M_X64)
#define CWSAM_X86 1
#include <immintrin.h>
#else
#define CWSAM_X86 0
#endif

namespace cwsam::kernels {

#if CWSAM_X86
namespace {

#define CWSAM_AVX2 __attribute__((target("avx2,fma")))

// Computes an R x (8*V) block of C from R rows of A and a panel of B.
template <int R, int V>
CWSAM_AVX2 inline void block_nn(std::size_t k, const double* a, std::size_t lda, const double* b,
                                std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    constexpr int L = 2 * V;  // 4-wide lanes per row
    __m256d acc[R][L];
    for (int r = 0; r < R; ++r)
        for (int l = 0; l < L; ++l)
            acc[r][l] = accumulate ? _mm256_loadu_pd(c + r * ldc + 4 * l) : _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
        __m256d bv[L];
        for (int l = 0; l < L; ++l) bv[l] = _mm256_loadu_pd(b + p * ldb + 4 * l);
        for (int r = 0; r < R; ++r) {
            const __m256d av = _mm256_broadcast_sd(a + r * lda + p);
            for (int l = 0; l < L; ++l) acc[r][l] = _mm256_fmadd_pd(av, bv[l], acc[r][l]);
        }
    }
    for (int r = 0; r < R; ++r)
        for (int l = 0; l < L; ++l) _mm256_storeu_pd(c + r * ldc + 4 * l, acc[r][l]);
}

template <int R>
CWSAM_AVX2 void rows_nn(std::size_t n, std::size_t k, const double* a, std::size_t lda,
                        const double* b, std::size_t ldb, double* c, std::size_t ldc,
                        bool accumulate) {
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) block_nn<R, 1>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
    if (j + 4 <= n) {
        // half block
        __m256d acc[R];
        for (int r = 0; r < R; ++r)
            acc[r] = accumulate ? _mm256_loadu_pd(c + r * ldc + j) : _mm256_setzero_pd();
        for (std::size_t p = 0; p < k; ++p) {
            const __m256d bv = _mm256_loadu_pd(b + p * ldb + j);
            for (int r = 0; r < R; ++r)
                acc[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(a + r * lda + p), bv, acc[r]);
        }
        for (int r = 0; r < R; ++r) _mm256_storeu_pd(c + r * ldc + j, acc[r]);
        j += 4;
    }
    for (; j < n; ++j) {
        for (int r = 0; r < R; ++r) {
            double s = accumulate ? c[r * ldc + j] : 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[r * lda + p] * b[p * ldb + j];
            c[r * ldc + j] = s;
        }
    }
}

CWSAM_AVX2 void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
                        std::size_t lda, const double* b, std::size_t ldb, double* c,
                        std::size_t ldc, bool accumulate) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) rows_nn<4>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
    switch (m - i) {
        case 3: rows_nn<3>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate); break;
        case 2: rows_nn<2>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate); break;
        case 1: rows_nn<1>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate); break;
        default: break;
    }
}

// Packs the transpose of a rows x cols strided block into a dense buffer.
void transpose_into(std::vector<double>& out, const double* src, std::size_t rows,
                    std::size_t cols, std::size_t ld) {
    out.resize(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t q = 0; q < cols; ++q) out[q * rows + r] = src[r * ld + q];
}

CWSAM_AVX2 void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
                        std::size_t lda, const double* b, std::size_t ldb, double* c,
                        std::size_t ldc, bool accumulate) {
    thread_local std::vector<double> packed;
    transpose_into(packed, b, n, k, ldb);  // B^T is k x n
    gemm_nn(m, n, k, a, lda, packed.data(), n, c, ldc, accumulate);
}

CWSAM_AVX2 void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
                        std::size_t lda, const double* b, std::size_t ldb, double* c,
                        std::size_t ldc, bool accumulate) {
    thread_local std::vector<double> packed;
    transpose_into(packed, a, k, m, lda);  // A^T is m x k
    gemm_nn(m, n, k, packed.data(), k, b, ldb, c, ldc, accumulate);
}

CWSAM_AVX2 void axpy(std::size_t n, double alpha, const double* x, double* y) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

CWSAM_AVX2 double dot(std::size_t n, const double* x, const double* y) {
    __m256d s0 = _mm256_setzero_pd();
    __m256d s1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
        s1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), s1);
    }
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, _mm256_add_pd(s0, s1));
    double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

#undef CWSAM_AVX2

}  // namespace

const KernelTable* avx2_table() {
    static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    static const KernelTable table{"avx2", gemm_nn, gemm_nt, gemm_tn, axpy, dot};
    return supported ? &table : nullptr;
}

#else

const KernelTable* avx2_table() { return nullptr; }

#endif

}  // namespace cwsam::kernels
