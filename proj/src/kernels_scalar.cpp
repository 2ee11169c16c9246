#include "bmmae/kernels/kernels.hpp"

#include <cstring>

// Reference kernels. Loop structure mirrors the SIMD variants: GEMM
// accumulates over k in ascending order for every C element, reductions run
// left to right. These define the semantics the SIMD paths approximate up to
// reassociation/FMA.
namespace bmmae::kernels::detail {
namespace {

void s_axpy(int64_t n, double a, const double* x, double* y) {
    for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

double s_dot(int64_t n, const double* x, const double* y) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

double s_sum(int64_t n, const double* x) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

void s_mean_var(int64_t n, const double* x, double* mean, double* var) {
    double m = n > 0 ? s_sum(n, x) / static_cast<double>(n) : 0.0;
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double c = x[i] - m;
        acc += c * c;
    }
    *mean = m;
    *var = n > 0 ? acc / static_cast<double>(n) : 0.0;
}

void s_gemm_nn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
               bool accumulate) {
    for (int64_t i = 0; i < M; ++i) {
        double* ci = C + i * N;
        if (!accumulate) std::memset(ci, 0, sizeof(double) * static_cast<size_t>(N));
        const double* ai = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
            double a = ai[k];
            const double* bk = B + k * N;
            for (int64_t j = 0; j < N; ++j) ci[j] += a * bk[j];
        }
    }
}

void s_gemm_nt(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
               bool accumulate) {
    for (int64_t i = 0; i < M; ++i) {
        const double* ai = A + i * K;
        double* ci = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
            double acc = s_dot(K, ai, B + j * K);
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

void s_gemm_tn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
               bool accumulate) {
    if (!accumulate) std::memset(C, 0, sizeof(double) * static_cast<size_t>(M * N));
    for (int64_t k = 0; k < K; ++k) {
        const double* ak = A + k * M;
        const double* bk = B + k * N;
        for (int64_t i = 0; i < M; ++i) {
            double a = ak[i];
            double* ci = C + i * N;
            for (int64_t j = 0; j < N; ++j) ci[j] += a * bk[j];
        }
    }
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable t = {s_axpy, s_dot, s_sum, s_mean_var, s_gemm_nn, s_gemm_nt, s_gemm_tn};
    return t;
}

}  // namespace bmmae::kernels::detail
