#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cstring>

#include "bmmae/kernels/kernels.hpp"

// AVX2+FMA variants. Compiled with -mavx2 -mfma; only reachable after the
// dispatcher has verified CPU support. GEMM keeps the same per-element k
// accumulation order as the scalar reference; dot/sum use 4 lanes combined in
// a fixed order, so results differ from scalar only by reassociation.
namespace bmmae::kernels::detail {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    __m128d s = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

void a_axpy(int64_t n, double a, const double* x, double* y) {
    __m256d va = _mm256_set1_pd(a);
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256d y0 = _mm256_loadu_pd(y + i);
        __m256d y1 = _mm256_loadu_pd(y + i + 4);
        y0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), y0);
        y1 = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i + 4), y1);
        _mm256_storeu_pd(y + i, y0);
        _mm256_storeu_pd(y + i + 4, y1);
    }
    for (; i + 4 <= n; i += 4) {
        __m256d y0 = _mm256_loadu_pd(y + i);
        y0 = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), y0);
        _mm256_storeu_pd(y + i, y0);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

double a_dot(int64_t n, const double* x, const double* y) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    }
    double total = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) total += x[i] * y[i];
    return total;
}

double a_sum(int64_t n, const double* x) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
        acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + 4));
    }
    for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    double total = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) total += x[i];
    return total;
}

void a_mean_var(int64_t n, const double* x, double* mean, double* var) {
    double m = n > 0 ? a_sum(n, x) / static_cast<double>(n) : 0.0;
    __m256d vm = _mm256_set1_pd(m);
    __m256d acc = _mm256_setzero_pd();
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d c = _mm256_sub_pd(_mm256_loadu_pd(x + i), vm);
        acc = _mm256_fmadd_pd(c, c, acc);
    }
    double total = hsum(acc);
    for (; i < n; ++i) {
        double c = x[i] - m;
        total += c * c;
    }
    *mean = m;
    *var = n > 0 ? total / static_cast<double>(n) : 0.0;
}

// C row held in registers across the k loop, 16 columns at a time.
void a_gemm_nn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
               bool accumulate) {
    for (int64_t i = 0; i < M; ++i) {
        const double* ai = A + i * K;
        double* ci = C + i * N;
        int64_t j = 0;
        for (; j + 16 <= N; j += 16) {
            __m256d c0, c1, c2, c3;
            if (accumulate) {
                c0 = _mm256_loadu_pd(ci + j);
                c1 = _mm256_loadu_pd(ci + j + 4);
                c2 = _mm256_loadu_pd(ci + j + 8);
                c3 = _mm256_loadu_pd(ci + j + 12);
            } else {
                c0 = c1 = c2 = c3 = _mm256_setzero_pd();
            }
            const double* bk = B + j;
            for (int64_t k = 0; k < K; ++k, bk += N) {
                __m256d a = _mm256_set1_pd(ai[k]);
                c0 = _mm256_fmadd_pd(a, _mm256_loadu_pd(bk), c0);
                c1 = _mm256_fmadd_pd(a, _mm256_loadu_pd(bk + 4), c1);
                c2 = _mm256_fmadd_pd(a, _mm256_loadu_pd(bk + 8), c2);
                c3 = _mm256_fmadd_pd(a, _mm256_loadu_pd(bk + 12), c3);
            }
            _mm256_storeu_pd(ci + j, c0);
            _mm256_storeu_pd(ci + j + 4, c1);
            _mm256_storeu_pd(ci + j + 8, c2);
            _mm256_storeu_pd(ci + j + 12, c3);
        }
        for (; j + 4 <= N; j += 4) {
            __m256d c0 = accumulate ? _mm256_loadu_pd(ci + j) : _mm256_setzero_pd();
            const double* bk = B + j;
            for (int64_t k = 0; k < K; ++k, bk += N)
                c0 = _mm256_fmadd_pd(_mm256_set1_pd(ai[k]), _mm256_loadu_pd(bk), c0);
            _mm256_storeu_pd(ci + j, c0);
        }
        for (; j < N; ++j) {
            double acc = accumulate ? ci[j] : 0.0;
            for (int64_t k = 0; k < K; ++k) acc += ai[k] * B[k * N + j];
            ci[j] = acc;
        }
    }
}

void a_gemm_nt(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
               bool accumulate) {
    for (int64_t i = 0; i < M; ++i) {
        const double* ai = A + i * K;
        double* ci = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
            double acc = a_dot(K, ai, B + j * K);
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

void a_gemm_tn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
               bool accumulate) {
    for (int64_t i = 0; i < M; ++i) {
        double* ci = C + i * N;
        int64_t j = 0;
        for (; j + 16 <= N; j += 16) {
            __m256d c0, c1, c2, c3;
            if (accumulate) {
                c0 = _mm256_loadu_pd(ci + j);
                c1 = _mm256_loadu_pd(ci + j + 4);
                c2 = _mm256_loadu_pd(ci + j + 8);
                c3 = _mm256_loadu_pd(ci + j + 12);
            } else {
                c0 = c1 = c2 = c3 = _mm256_setzero_pd();
            }
            const double* bk = B + j;
            for (int64_t k = 0; k < K; ++k, bk += N) {
                __m256d a = _mm256_set1_pd(A[k * M + i]);
                c0 = _mm256_fmadd_pd(a, _mm256_loadu_pd(bk), c0);
                c1 = _mm256_fmadd_pd(a, _mm256_loadu_pd(bk + 4), c1);
                c2 = _mm256_fmadd_pd(a, _mm256_loadu_pd(bk + 8), c2);
                c3 = _mm256_fmadd_pd(a, _mm256_loadu_pd(bk + 12), c3);
            }
            _mm256_storeu_pd(ci + j, c0);
            _mm256_storeu_pd(ci + j + 4, c1);
            _mm256_storeu_pd(ci + j + 8, c2);
            _mm256_storeu_pd(ci + j + 12, c3);
        }
        for (; j + 4 <= N; j += 4) {
            __m256d c0 = accumulate ? _mm256_loadu_pd(ci + j) : _mm256_setzero_pd();
            const double* bk = B + j;
            for (int64_t k = 0; k < K; ++k, bk += N)
                c0 = _mm256_fmadd_pd(_mm256_set1_pd(A[k * M + i]), _mm256_loadu_pd(bk), c0);
            _mm256_storeu_pd(ci + j, c0);
        }
        for (; j < N; ++j) {
            double acc = accumulate ? ci[j] : 0.0;
            for (int64_t k = 0; k < K; ++k) acc += A[k * M + i] * B[k * N + j];
            ci[j] = acc;
        }
    }
}

}  // namespace

const KernelTable& avx2_table() {
    static const KernelTable t = {a_axpy, a_dot, a_sum, a_mean_var, a_gemm_nn, a_gemm_nt, a_gemm_tn};
    return t;
}

}  // namespace bmmae::kernels::detail

#endif  // x86-64
