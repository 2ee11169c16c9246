#pragma once

#include <cstdint>
#include <string>

// Double-precision inner-loop kernels behind the tensor engine. Every routine
// has a scalar reference implementation and, on x86-64 with AVX2+FMA, a SIMD
// variant selected at runtime. Element accumulation order is fixed per output
// element, so results are reproducible run-to-run for a given backend.
// Backends differ only by floating-point reassociation/FMA contraction;
// equivalence is tested at tight tolerance.
namespace bmmae::kernels {

enum class Backend { scalar, avx2 };

// Active backend. Defaults to the best supported one; the BMMAE_KERNEL
// environment variable ("scalar" / "avx2") overrides at startup.
Backend active();
const char* backend_name(Backend b);
// Returns false (and leaves the backend unchanged) if unsupported on this CPU.
bool set_backend(Backend b);
bool cpu_supports(Backend b);

// y[i] += a * x[i]
void axpy(int64_t n, double a, const double* x, double* y);
// sum_i x[i] * y[i]
double dot(int64_t n, const double* x, const double* y);
// sum_i x[i]
double sum(int64_t n, const double* x);
// mean and (biased) variance in one pass pair: var = E[(x-mean)^2]
void mean_var(int64_t n, const double* x, double* mean, double* var);

// Row-major GEMM family. accumulate=false overwrites C, true adds into it.
//   gemm_nn: C[MxN] = A[MxK] * B[KxN]
//   gemm_nt: C[MxN] = A[MxK] * B[NxK]^T
//   gemm_tn: C[MxN] = A[KxM]^T * B[KxN]
void gemm_nn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate);
void gemm_nt(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate);
void gemm_tn(int64_t M, int64_t N, int64_t K, const double* A, const double* B, double* C,
             bool accumulate);

namespace detail {

struct KernelTable {
    void (*axpy)(int64_t, double, const double*, double*);
    double (*dot)(int64_t, const double*, const double*);
    double (*sum)(int64_t, const double*);
    void (*mean_var)(int64_t, const double*, double*, double*);
    void (*gemm_nn)(int64_t, int64_t, int64_t, const double*, const double*, double*, bool);
    void (*gemm_nt)(int64_t, int64_t, int64_t, const double*, const double*, double*, bool);
    void (*gemm_tn)(int64_t, int64_t, int64_t, const double*, const double*, double*, bool);
};

const KernelTable& scalar_table();
#if defined(__x86_64__) || defined(_M_X64)
const KernelTable& avx2_table();
#endif

}  // namespace detail

}  // namespace bmmae::kernels
